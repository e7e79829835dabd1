#include "doctest_torch.hpp"

#include <fstream>
#include <map>
#include <set>

#include <opencv2/imgcodecs.hpp>

#include "agecycle/data_pipeline.hpp"
#include "agecycle/errors.hpp"
#include "helpers.hpp"

using namespace agecycle;

namespace {

std::vector<FaceRecord> records_with_groups(const std::vector<int>& groups) {
  std::vector<FaceRecord> out;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    FaceRecord r;
    r.subject_id = "s" + std::to_string(i);
    r.group = groups[i];
    r.image_path = "img" + std::to_string(i) + ".png";
    out.push_back(r);
  }
  return out;
}

void write_solid(const std::filesystem::path& path, int side, int value) {
  cv::Mat m(side, side, CV_8UC3, cv::Scalar(value, value, value));
  REQUIRE(cv::imwrite(path.string(), m));
}

}  // namespace

TEST_SUITE("data_pipeline") {

TEST_CASE("morph scheme bins") {
  const auto s = GroupScheme::morph();
  CHECK(s.n_groups() == 4);
  CHECK(assign_age_group(30, s) == 0);
  CHECK(assign_age_group(35, s) == 1);
  CHECK(assign_age_group(0, s) == 0);
  CHECK(assign_age_group(31, s) == 1);
  CHECK(assign_age_group(40, s) == 1);
  CHECK(assign_age_group(41, s) == 2);
  CHECK(assign_age_group(50, s) == 2);
  CHECK(assign_age_group(51, s) == 3);
  CHECK(assign_age_group(120, s) == 3);
}

TEST_CASE("utkface scheme bins") {
  const auto s = GroupScheme::utkface();
  CHECK(s.n_groups() == 9);
  CHECK(assign_age_group(0, s) == 0);
  CHECK(assign_age_group(3, s) == 0);
  CHECK(assign_age_group(4, s) == 1);
  CHECK(assign_age_group(17, s) == 2);
  CHECK(assign_age_group(18, s) == 3);
  CHECK(assign_age_group(80, s) == 7);
  CHECK(assign_age_group(81, s) == 8);
}

TEST_CASE("negative age is rejected") {
  CHECK_THROWS_AS(assign_age_group(-1, GroupScheme::morph()), InvalidInput);
}

TEST_CASE("decades scheme matches morph for four groups") {
  CHECK(GroupScheme::decades(4).upper_bounds() == GroupScheme::morph().upper_bounds());
  CHECK(GroupScheme::decades(2).n_groups() == 2);
  CHECK_THROWS_AS(GroupScheme::decades(1), InvalidInput);
}

TEST_CASE("scheme bounds must ascend") {
  CHECK_THROWS_AS(GroupScheme({30, 30}), InvalidInput);
  CHECK_THROWS_AS(GroupScheme({}), InvalidInput);
}

TEST_CASE("group midpoints map back to their group") {
  for (const auto& s : {GroupScheme::morph(), GroupScheme::utkface(), GroupScheme::decades(6)}) {
    for (int g = 0; g < s.n_groups(); ++g) {
      CHECK(assign_age_group(static_cast<int>(std::lround(s.midpoint_age(g))), s) == g);
    }
  }
}

TEST_CASE("one_hot examples") {
  CHECK(one_hot(0, 4).values() == std::vector<float>{1, 0, 0, 0});
  CHECK(one_hot(3, 4).values() == std::vector<float>{0, 0, 0, 1});
  CHECK_THROWS_AS(one_hot(4, 4), InvalidInput);
  CHECK_THROWS_AS(one_hot(-1, 4), InvalidInput);
}

TEST_CASE("one_hot round trips through argmax") {
  for (int n = 2; n <= 9; ++n) {
    for (int g = 0; g < n; ++g) {
      const auto v = one_hot(g, n);
      CHECK(v.group() == g);
      CHECK(v.to_tensor().argmax().item<std::int64_t>() == g);
    }
  }
}

TEST_CASE("condition vector must be one-hot") {
  CHECK_THROWS_AS(ConditionVector({0.5f, 0.5f}), InvalidInput);
  CHECK_THROWS_AS(ConditionVector({1.0f, 1.0f}), InvalidInput);
  CHECK_THROWS_AS(ConditionVector({0.0f, 0.0f}), InvalidInput);
  CHECK(ConditionVector({0.0f, 1.0f}).group() == 1);
}

TEST_CASE("split: ten single-image subjects") {
  const auto recs = records_with_groups(std::vector<int>(10, 0));
  for (std::uint64_t seed : {0ULL, 1ULL, 99ULL}) {
    const auto split = split_by_subject(recs, 0.8, seed);
    CHECK(split.train.size() == 8);
    CHECK(split.test.size() == 2);
    std::set<std::string> train_ids;
    for (const auto& r : split.train) train_ids.insert(r.subject_id);
    for (const auto& r : split.test) CHECK(train_ids.count(r.subject_id) == 0);
  }
}

TEST_CASE("split: a single subject lands on one side") {
  auto recs = records_with_groups({0, 1, 2});
  for (auto& r : recs) r.subject_id = "only";
  const auto split = split_by_subject(recs, 0.8, 5);
  CHECK(((split.train.size() == 3 && split.test.empty()) ||
         (split.test.size() == 3 && split.train.empty())));
}

TEST_CASE("split: unequal image counts stay subject-disjoint") {
  std::vector<FaceRecord> recs;
  std::mt19937 rng(4);
  for (int s = 0; s < 100; ++s) {
    const int count = 1 + static_cast<int>(rng() % 7);
    for (int k = 0; k < count; ++k) {
      FaceRecord r;
      r.subject_id = "subject" + std::to_string(s);
      r.image_path = r.subject_id + "_" + std::to_string(k) + ".png";
      recs.push_back(r);
    }
  }
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto split = split_by_subject(recs, 0.8, seed);
    std::set<std::string> train_ids;
    std::set<std::string> test_ids;
    for (const auto& r : split.train) train_ids.insert(r.subject_id);
    for (const auto& r : split.test) test_ids.insert(r.subject_id);
    for (const auto& id : train_ids) CHECK(test_ids.count(id) == 0);
    CHECK(train_ids.size() == 80);
    CHECK(test_ids.size() == 20);
    CHECK(split.train.size() + split.test.size() == recs.size());
  }
}

TEST_CASE("split is a function of the seed") {
  const auto recs = records_with_groups(std::vector<int>(50, 0));
  const auto a = split_by_subject(recs, 0.8, 12);
  const auto b = split_by_subject(recs, 0.8, 12);
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].subject_id == b.train[i].subject_id);
  }
  const auto c = split_by_subject(recs, 0.8, 13);
  bool differs = false;
  for (std::size_t i = 0; i < a.test.size(); ++i) {
    differs |= a.test[i].subject_id != c.test[i].subject_id;
  }
  CHECK(differs);
}

TEST_CASE("split preconditions") {
  CHECK_THROWS_AS(split_by_subject({}, 0.8, 0), InvalidInput);
  const auto recs = records_with_groups({0, 1});
  CHECK_THROWS_AS(split_by_subject(recs, 0.0, 0), InvalidInput);
  CHECK_THROWS_AS(split_by_subject(recs, 1.0, 0), InvalidInput);
}

TEST_CASE("pair sampling with two groups present") {
  const auto recs = records_with_groups({0, 0, 2, 2, 2});
  const auto draws = sample_pair_indices(recs, 200, 3);
  for (const auto& d : draws) {
    CHECK(recs[d.young_index].group == 0);
    CHECK(recs[d.old_index].group == 2);
  }
}

TEST_CASE("pair sampling needs two groups") {
  const auto recs = records_with_groups({1, 1, 1});
  CHECK_THROWS_AS(sample_pair_indices(recs, 4, 0), DatasetDegenerate);
  CHECK_THROWS_AS(sample_pair_indices(recs, 4, 0, false), DatasetDegenerate);
}

TEST_CASE("pair types are uniform over ordered group pairs") {
  // Unequal group sizes must not bias the pair type.
  const auto recs = records_with_groups({0, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2, 2});
  const auto draws = sample_pair_indices(recs, 10000, 2024);
  std::map<std::pair<int, int>, int> counts;
  for (const auto& d : draws) {
    ++counts[{recs[d.young_index].group, recs[d.old_index].group}];
  }
  REQUIRE(counts.size() == 3);
  double chi2 = 0.0;
  const double expected = 10000.0 / 3.0;
  for (const auto& [pair, n] : counts) {
    CHECK(pair.first < pair.second);
    chi2 += (n - expected) * (n - expected) / expected;
  }
  // Critical value of chi-square with 2 degrees of freedom at p = 0.01.
  CHECK(chi2 < 9.2103);
}

TEST_CASE("records are uniform within a group") {
  const auto recs = records_with_groups({0, 0, 0, 0, 1});
  const auto draws = sample_pair_indices(recs, 8000, 77);
  std::map<std::size_t, int> counts;
  for (const auto& d : draws) ++counts[d.young_index];
  REQUIRE(counts.size() == 4);
  double chi2 = 0.0;
  for (const auto& [_, n] : counts) chi2 += (n - 2000.0) * (n - 2000.0) / 2000.0;
  // Critical value with 3 degrees of freedom at p = 0.01.
  CHECK(chi2 < 11.345);
}

TEST_CASE("unordered sampling reverses about half the pairs") {
  const auto recs = records_with_groups({0, 1, 2, 3});
  const auto draws = sample_pair_indices(recs, 6000, 8, false);
  int reversed = 0;
  for (const auto& d : draws) {
    const int a = recs[d.young_index].group;
    const int b = recs[d.old_index].group;
    CHECK(a != b);
    reversed += a > b;
  }
  // 12 ordered pairs of distinct groups, half of them descending.
  CHECK(reversed / 6000.0 == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("ordered batches satisfy the age ordering for many seeds") {
  const auto recs = records_with_groups({0, 1, 1, 2, 3, 3, 3});
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    for (const auto& d : sample_pair_indices(recs, 16, seed)) {
      CHECK(recs[d.young_index].group < recs[d.old_index].group);
    }
  }
}

TEST_CASE("sampling is deterministic given the seed") {
  const auto recs = records_with_groups({0, 1, 2, 3, 0, 1});
  const auto a = sample_pair_indices(recs, 32, 5);
  const auto b = sample_pair_indices(recs, 32, 5);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].young_index == b[i].young_index);
    CHECK(a[i].old_index == b[i].old_index);
  }
}

TEST_CASE("load_image value mapping and resize") {
  testing::TempDir dir;
  write_solid(dir / "gray.png", 16, 128);
  write_solid(dir / "black.png", 16, 0);
  write_solid(dir / "big.png", 512, 200);

  const auto gray = load_image(dir / "gray.png", 16);
  CHECK(gray.sizes() == torch::IntArrayRef({3, 16, 16}));
  CHECK((gray - (128.0 / 127.5 - 1.0)).abs().max().item<double>() < 1e-6);
  CHECK(gray[0][0][0].item<double>() == doctest::Approx(0.0039).epsilon(0.01));

  const auto black = load_image(dir / "black.png", 16);
  CHECK(torch::equal(black, torch::full({3, 16, 16}, -1.0f)));

  const auto big = load_image(dir / "big.png", 256);
  CHECK(big.sizes() == torch::IntArrayRef({3, 256, 256}));
}

TEST_CASE("load_image channel order is RGB") {
  testing::TempDir dir;
  cv::Mat m(4, 4, CV_8UC3, cv::Scalar(0, 0, 255));  // BGR red
  REQUIRE(cv::imwrite((dir / "red.png").string(), m));
  const auto img = load_image(dir / "red.png", 4);
  CHECK(img[0].min().item<float>() == 1.0f);
  CHECK(img[2].max().item<float>() == -1.0f);
}

TEST_CASE("load_image output stays in range for random rasters") {
  testing::TempDir dir;
  cv::Mat m(37, 53, CV_8UC3);
  cv::randu(m, 0, 256);
  REQUIRE(cv::imwrite((dir / "noise.png").string(), m));
  const auto img = load_image(dir / "noise.png", 64);
  CHECK(img.min().item<float>() >= -1.0f);
  CHECK(img.max().item<float>() <= 1.0f);
}

TEST_CASE("load_image reports the failing path") {
  testing::TempDir dir;
  {
    std::ofstream f(dir / "broken.png");
    f << "not a png";
  }
  try {
    load_image(dir / "broken.png", 64);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("broken.png") != std::string::npos);
  }
  CHECK_THROWS_AS(load_image(dir / "missing.png", 64), IoError);
}

TEST_CASE("manifest round trip resolves paths against its directory") {
  testing::TempDir dir;
  std::filesystem::create_directories(dir / "data" / "img");
  write_solid(dir / "data" / "img" / "a.png", 8, 10);
  {
    std::ofstream f(dir / "data" / "manifest.csv");
    f << "\xEF\xBB\xBFsubject_id,path,age_years\n"
      << "alice,img/a.png,29\n"
      << "\n"
      << "bob, img/a.png ,52\n";
  }
  const auto recs = load_manifest(dir / "data" / "manifest.csv", GroupScheme::morph());
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].subject_id == "alice");
  CHECK(recs[0].group == 0);
  CHECK(recs[1].group == 3);
  CHECK(std::filesystem::exists(recs[1].image_path));

  std::filesystem::create_directories(dir / "elsewhere");
  write_manifest(dir / "elsewhere" / "copy.csv", recs);
  const auto again = load_manifest(dir / "elsewhere" / "copy.csv", GroupScheme::morph());
  REQUIRE(again.size() == 2);
  CHECK(std::filesystem::equivalent(again[0].image_path, recs[0].image_path));
  CHECK(again[1].age_years == 52);
}

TEST_CASE("manifest errors carry location") {
  testing::TempDir dir;
  {
    std::ofstream f(dir / "bad_header.csv");
    f << "id,file,age\n";
  }
  CHECK_THROWS_AS(load_manifest(dir / "bad_header.csv", GroupScheme::morph()), IoError);
  {
    std::ofstream f(dir / "bad_age.csv");
    f << "subject_id,path,age_years\na,x.png,30\nb,y.png,old\n";
  }
  try {
    load_manifest(dir / "bad_age.csv", GroupScheme::morph());
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }
  {
    std::ofstream f(dir / "negative.csv");
    f << "subject_id,path,age_years\na,x.png,-4\n";
  }
  CHECK_THROWS_AS(load_manifest(dir / "negative.csv", GroupScheme::morph()), InvalidInput);
  CHECK_THROWS_AS(load_manifest(dir / "absent.csv", GroupScheme::morph()), IoError);
}

TEST_CASE("age-prefixed directory ingestion") {
  testing::TempDir dir;
  write_solid(dir / "25_0_1_2017.jpg", 8, 1);
  write_solid(dir / "67_1_0_2017.jpg", 8, 2);
  write_solid(dir / "notes_x.png", 8, 3);
  const auto recs = scan_age_prefixed_directory(dir.path(), GroupScheme::utkface());
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].age_years == 25);
  CHECK(recs[0].group == 3);
  CHECK(recs[1].group == 7);
  CHECK(recs[0].subject_id != recs[1].subject_id);
}

TEST_CASE("dataset batches carry matching conditions") {
  testing::TempDir dir;
  std::vector<FaceRecord> recs;
  for (int i = 0; i < 6; ++i) {
    const auto p = dir / ("f" + std::to_string(i) + ".png");
    write_solid(p, 8, 40 * i);
    recs.push_back({"s" + std::to_string(i), p, 20 + 10 * i, i % 3});
  }
  FaceDataset ds(recs, 8, 3);
  const auto batch = ds.sample_batch(10, 4);
  CHECK(batch.size() == 10);
  CHECK(batch.young_images.sizes() == torch::IntArrayRef({10, 3, 8, 8}));
  CHECK(batch.young_conditions.sizes() == torch::IntArrayRef({10, 3}));
  for (int i = 0; i < batch.size(); ++i) {
    CHECK(batch.young_conditions[i].argmax().item<std::int64_t>() == batch.young_groups[i]);
    CHECK(batch.old_conditions[i].argmax().item<std::int64_t>() == batch.old_groups[i]);
    CHECK(batch.young_groups[i] < batch.old_groups[i]);
  }
  CHECK((batch.to(torch::kFloat64).old_images.scalar_type() == torch::kFloat64));
}

TEST_CASE("records outside the group range are rejected") {
  std::vector<FaceRecord> recs{{"a", "x.png", 90, 5}};
  CHECK_THROWS_AS(FaceDataset(recs, 8, 4), InvalidInput);
}

TEST_CASE("steps per epoch rounds up") {
  CHECK(steps_per_epoch(1600, 24) == 67);
  CHECK(steps_per_epoch(48, 24) == 2);
  CHECK(steps_per_epoch(1, 24) == 1);
}

}  // TEST_SUITE
