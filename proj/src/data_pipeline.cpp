#include "agecycle/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <map>
#include <random>
#include <set>
#include <thread>

#include <boost/tokenizer.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "agecycle/errors.hpp"
#include "agecycle/image_io.hpp"
#include "agecycle/log.hpp"

namespace agecycle {

GroupScheme::GroupScheme(std::vector<int> upper_bounds) : upper_bounds_(std::move(upper_bounds)) {
  if (upper_bounds_.empty()) {
    throw InvalidInput("GroupScheme needs at least one boundary (N >= 2)");
  }
  if (upper_bounds_.front() < 0) {
    throw InvalidInput("GroupScheme boundaries must be non-negative");
  }
  for (std::size_t i = 1; i < upper_bounds_.size(); ++i) {
    if (upper_bounds_[i] <= upper_bounds_[i - 1]) {
      throw InvalidInput("GroupScheme boundaries must be strictly ascending");
    }
  }
}

GroupScheme GroupScheme::morph() { return GroupScheme({30, 40, 50}); }

GroupScheme GroupScheme::utkface() { return GroupScheme({3, 11, 17, 29, 40, 55, 65, 80}); }

GroupScheme GroupScheme::decades(int n_groups) {
  if (n_groups < 2) {
    throw InvalidInput("GroupScheme::decades: n_groups must be >= 2");
  }
  std::vector<int> bounds;
  for (int g = 0; g + 1 < n_groups; ++g) {
    bounds.push_back(30 + 10 * g);
  }
  return GroupScheme(std::move(bounds));
}

int GroupScheme::lower_age(int group) const {
  if (group < 0 || group >= n_groups()) {
    throw InvalidInput("group index out of range");
  }
  return group == 0 ? 0 : upper_bounds_[group - 1] + 1;
}

double GroupScheme::midpoint_age(int group) const {
  const int lo = lower_age(group);
  if (group + 1 < n_groups()) {
    return 0.5 * (lo + upper_bounds_[group]);
  }
  const int prev_width = group == 0 ? 10 : upper_bounds_[group - 1] + 1 - lower_age(group - 1);
  return lo + 0.5 * (prev_width - 1);
}

int assign_age_group(int age_years, const GroupScheme& scheme) {
  if (age_years < 0) {
    throw InvalidInput("assign_age_group: negative age " + std::to_string(age_years));
  }
  const auto& bounds = scheme.upper_bounds();
  return static_cast<int>(std::lower_bound(bounds.begin(), bounds.end(), age_years) - bounds.begin());
}

ConditionVector::ConditionVector(std::vector<float> values) : values_(std::move(values)) {
  int ones = 0;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (values_[i] == 1.0F) {
      ++ones;
      group_ = static_cast<int>(i);
    } else if (values_[i] != 0.0F) {
      throw InvalidInput("condition vector is not one-hot");
    }
  }
  if (ones != 1) {
    throw InvalidInput("condition vector is not one-hot");
  }
}

torch::Tensor ConditionVector::to_tensor() const {
  return torch::tensor(values_, torch::kFloat32);
}

ConditionVector one_hot(int group, int n_groups) {
  if (n_groups < 1 || group < 0 || group >= n_groups) {
    throw InvalidInput("one_hot: group " + std::to_string(group) + " out of range for " +
                       std::to_string(n_groups) + " groups");
  }
  std::vector<float> v(static_cast<std::size_t>(n_groups), 0.0F);
  v[static_cast<std::size_t>(group)] = 1.0F;
  return ConditionVector(std::move(v));
}

torch::Tensor one_hot_rows(std::span<const int> groups, int n_groups) {
  auto out = torch::zeros({static_cast<std::int64_t>(groups.size()), n_groups});
  auto acc = out.accessor<float, 2>();
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i] < 0 || groups[i] >= n_groups) {
      throw InvalidInput("one_hot_rows: group out of range");
    }
    acc[static_cast<std::int64_t>(i)][groups[i]] = 1.0F;
  }
  return out;
}

namespace {

using CsvTokenizer = boost::tokenizer<boost::escaped_list_separator<char>>;

std::vector<std::string> split_csv_line(const std::string& line) {
  CsvTokenizer tok(line);
  return {tok.begin(), tok.end()};
}

std::string trim(std::string s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string::npos) {
    return {};
  }
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<FaceRecord> load_manifest(const std::filesystem::path& csv_path,
                                      const GroupScheme& scheme) {
  std::ifstream in(csv_path);
  if (!in) {
    throw IoError("cannot open manifest: " + csv_path.string());
  }
  const auto base = csv_path.parent_path();
  std::string line;
  if (!std::getline(in, line)) {
    throw IoError("empty manifest: " + csv_path.string());
  }
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) {
    line.erase(0, 3);
  }
  const auto header = split_csv_line(trim(line));
  if (header.size() != 3 || trim(header[0]) != "subject_id" || trim(header[1]) != "path" ||
      trim(header[2]) != "age_years") {
    throw IoError("manifest header must be 'subject_id,path,age_years': " + csv_path.string());
  }
  std::vector<FaceRecord> records;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    std::vector<std::string> fields;
    try {
      fields = split_csv_line(line);
    } catch (const boost::escaped_list_error& e) {
      throw IoError(csv_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (fields.size() != 3) {
      throw IoError(csv_path.string() + ":" + std::to_string(line_no) + ": expected 3 fields");
    }
    FaceRecord r;
    r.subject_id = trim(fields[0]);
    r.image_path = base / trim(fields[1]);
    try {
      std::size_t pos = 0;
      const std::string age = trim(fields[2]);
      r.age_years = std::stoi(age, &pos);
      if (pos != age.size()) {
        throw std::invalid_argument(age);
      }
    } catch (const std::exception&) {
      throw IoError(csv_path.string() + ":" + std::to_string(line_no) + ": bad age_years '" +
                    fields[2] + "'");
    }
    r.group = assign_age_group(r.age_years, scheme);
    records.push_back(std::move(r));
  }
  return records;
}

void write_manifest(const std::filesystem::path& csv_path, std::span<const FaceRecord> records) {
  std::ofstream out(csv_path, std::ios::binary);
  if (!out) {
    throw IoError("cannot write manifest: " + csv_path.string());
  }
  const auto base = std::filesystem::absolute(csv_path).parent_path();
  out << "subject_id,path,age_years\n";
  for (const auto& r : records) {
    const auto image = std::filesystem::absolute(r.image_path);
    auto rel = std::filesystem::relative(image, base);
    if (rel.empty()) {
      rel = image;
    }
    out << r.subject_id << ',' << rel.generic_string() << ',' << r.age_years << '\n';
  }
  if (!out) {
    throw IoError("short write: " + csv_path.string());
  }
}

std::vector<FaceRecord> scan_age_prefixed_directory(const std::filesystem::path& dir,
                                                    const GroupScheme& scheme) {
  if (!std::filesystem::is_directory(dir)) {
    throw IoError("not a directory: " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file()) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<FaceRecord> records;
  for (const auto& file : files) {
    const std::string name = file.filename().string();
    const auto underscore = name.find('_');
    if (underscore == std::string::npos || underscore == 0) {
      continue;
    }
    const std::string age = name.substr(0, underscore);
    if (!std::all_of(age.begin(), age.end(), [](unsigned char c) { return std::isdigit(c); })) {
      continue;
    }
    FaceRecord r;
    r.age_years = std::stoi(age);
    r.group = assign_age_group(r.age_years, scheme);
    r.image_path = file;
    r.subject_id = file.stem().string();
    records.push_back(std::move(r));
  }
  if (!records.empty()) {
    log::warn("directory ingestion of " + dir.string() +
              ": no subject ids, treating each file as its own subject (split is disjoint at "
              "file granularity only)");
  }
  return records;
}

Split split_by_subject(std::span<const FaceRecord> records, double train_fraction,
                       std::uint64_t seed) {
  if (records.empty()) {
    throw InvalidInput("split_by_subject: no records");
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw InvalidInput("split_by_subject: train_fraction must lie in (0, 1)");
  }
  std::set<std::string> unique;
  for (const auto& r : records) {
    unique.insert(r.subject_id);
  }
  std::vector<std::string> subjects(unique.begin(), unique.end());
  std::mt19937_64 rng(seed);
  std::shuffle(subjects.begin(), subjects.end(), rng);
  const auto n_train = static_cast<std::size_t>(
      std::llround(train_fraction * static_cast<double>(subjects.size())));
  const std::set<std::string> train_subjects(subjects.begin(),
                                             subjects.begin() + static_cast<std::ptrdiff_t>(n_train));
  Split split;
  for (const auto& r : records) {
    (train_subjects.contains(r.subject_id) ? split.train : split.test).push_back(r);
  }
  return split;
}

std::vector<PairDraw> sample_pair_indices(std::span<const FaceRecord> records, int batch_size,
                                          std::uint64_t rng_seed, bool ordered) {
  if (batch_size < 1) {
    throw InvalidInput("batch_size must be >= 1");
  }
  std::map<int, std::vector<std::size_t>> by_group;
  for (std::size_t i = 0; i < records.size(); ++i) {
    by_group[records[i].group].push_back(i);
  }
  if (by_group.size() < 2) {
    throw DatasetDegenerate("pair sampling needs records in at least 2 distinct age groups, found " +
                            std::to_string(by_group.size()));
  }
  std::vector<std::pair<int, int>> pairs;
  for (const auto& [a, _] : by_group) {
    for (const auto& [b, __] : by_group) {
      if (ordered ? a < b : a != b) {
        pairs.emplace_back(a, b);
      }
    }
  }
  std::mt19937_64 rng(rng_seed);
  std::uniform_int_distribution<std::size_t> pick_pair(0, pairs.size() - 1);
  std::vector<PairDraw> draws;
  draws.reserve(static_cast<std::size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    const auto [young, old] = pairs[pick_pair(rng)];
    const auto& ys = by_group[young];
    const auto& os = by_group[old];
    PairDraw d;
    d.young_index = ys[std::uniform_int_distribution<std::size_t>(0, ys.size() - 1)(rng)];
    d.old_index = os[std::uniform_int_distribution<std::size_t>(0, os.size() - 1)(rng)];
    draws.push_back(d);
  }
  return draws;
}

OrderedPairBatch OrderedPairBatch::to(torch::Dtype dtype) const {
  OrderedPairBatch out = *this;
  out.young_images = young_images.to(dtype);
  out.old_images = old_images.to(dtype);
  out.young_conditions = young_conditions.to(dtype);
  out.old_conditions = old_conditions.to(dtype);
  return out;
}

torch::Tensor load_image(const std::filesystem::path& path, int resolution) {
  if (resolution < 1) {
    throw InvalidInput("load_image: resolution must be positive");
  }
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (raw.empty()) {
    throw IoError("cannot read image: " + path.string());
  }
  if (raw.rows != resolution || raw.cols != resolution) {
    cv::Mat resized;
    cv::resize(raw, resized, cv::Size(resolution, resolution), 0, 0, cv::INTER_LINEAR);
    raw = resized;
  }
  return mat_to_image(raw);
}

FaceDataset::FaceDataset(std::vector<FaceRecord> records, int resolution, int n_groups)
    : records_(std::move(records)), resolution_(resolution), n_groups_(n_groups) {
  for (const auto& r : records_) {
    if (r.group < 0 || r.group >= n_groups_) {
      throw InvalidInput("record " + r.image_path.string() + " has group " +
                         std::to_string(r.group) + " outside [0, " + std::to_string(n_groups_) +
                         ")");
    }
  }
  images_.resize(records_.size());
  const std::size_t workers =
      std::clamp<std::size_t>(std::thread::hardware_concurrency(), 1, 8);
  std::vector<std::future<void>> jobs;
  for (std::size_t w = 0; w < workers; ++w) {
    jobs.push_back(std::async(std::launch::async, [this, w, workers] {
      for (std::size_t i = w; i < records_.size(); i += workers) {
        images_[i] = load_image(records_[i].image_path, resolution_);
      }
    }));
  }
  for (auto& j : jobs) {
    j.get();
  }
}

OrderedPairBatch FaceDataset::sample_batch(int batch_size, std::uint64_t rng_seed,
                                           bool ordered) const {
  const auto draws = sample_pair_indices(records_, batch_size, rng_seed, ordered);
  return assemble(draws);
}

OrderedPairBatch FaceDataset::assemble(std::span<const PairDraw> draws) const {
  OrderedPairBatch batch;
  std::vector<torch::Tensor> young;
  std::vector<torch::Tensor> old;
  for (const auto& d : draws) {
    young.push_back(images_.at(d.young_index));
    old.push_back(images_.at(d.old_index));
    batch.young_groups.push_back(records_[d.young_index].group);
    batch.old_groups.push_back(records_[d.old_index].group);
  }
  batch.young_images = torch::stack(young);
  batch.old_images = torch::stack(old);
  batch.young_conditions = one_hot_rows(batch.young_groups, n_groups_);
  batch.old_conditions = one_hot_rows(batch.old_groups, n_groups_);
  return batch;
}

std::int64_t steps_per_epoch(std::size_t train_size, int batch_size) {
  if (batch_size < 1) {
    throw InvalidInput("batch_size must be >= 1");
  }
  return static_cast<std::int64_t>((train_size + static_cast<std::size_t>(batch_size) - 1) /
                                   static_cast<std::size_t>(batch_size));
}

}  // namespace agecycle
