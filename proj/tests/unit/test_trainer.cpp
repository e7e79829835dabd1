#include "doctest_torch.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "agecycle/checkpoint.hpp"
#include "agecycle/errors.hpp"
#include "agecycle/synthetic_faces.hpp"
#include "agecycle/trainer.hpp"
#include "helpers.hpp"
#include "oracle.hpp"

using namespace agecycle;

namespace {

TrainState calibrated_state(const TrainConfig& cfg, const OrderedPairBatch& batch) {
  auto state = init_train_state(cfg);
  state.weights = calibrate_lambdas(state, batch);
  return state;
}

void saturate_attention(AttentionGenerator& g) {
  torch::NoGradGuard no_grad;
  g->attention_head()->weight.zero_();
  g->attention_head()->bias.fill_(50.0);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void check_cycle_matches(const CycleLosses& c, const oracle::Cycle& o) {
  CHECK(std::abs(c.gan_g.item<double>() - o.gan_g) < 1e-6);
  CHECK(std::abs(c.gan_d.item<double>() - o.gan_d) < 1e-6);
  CHECK(std::abs(c.recon.item<double>() - o.recon) < 1e-6);
  CHECK(std::abs(c.actv.item<double>() - o.actv) < 1e-6);
  CHECK(std::abs(c.reg_fake.item<double>() - o.reg_fake) < 1e-6);
  CHECK(std::abs(c.reg_real.item<double>() - o.reg_real) < 1e-6);
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("calibration examples") {
  auto w = calibrate_from_raw({2.0, 4.0, 1.0, 0.5});
  CHECK(w.lambda_recon == doctest::Approx(0.05));
  CHECK(w.lambda_actv == doctest::Approx(0.2));
  CHECK(w.lambda_reg == doctest::Approx(4.0));

  w = calibrate_from_raw({3.0, 3.0, 3.0, 3.0});
  CHECK(w.lambda_recon == doctest::Approx(0.1));
  CHECK(w.lambda_actv == doctest::Approx(0.1));
  CHECK(w.lambda_reg == doctest::Approx(1.0));

  w = calibrate_from_raw({2.0, 0.0, 1.0, 0.5});
  CHECK(w.lambda_recon == 1.0);
  CHECK(w.lambda_actv == doctest::Approx(0.2));
}

TEST_CASE("calibration on a real batch gives finite positive weights") {
  const auto cfg = testing::tiny_config();
  const auto batch = testing::random_batch(2, 2, 64, 1);
  auto state = init_train_state(cfg);
  const auto raw = raw_losses(state, batch);
  const auto w = calibrate_lambdas(state, batch);
  CHECK(w.lambda_recon == doctest::Approx(raw.gan / raw.recon / 10.0));
  CHECK(w.lambda_actv == doctest::Approx(raw.gan / raw.actv / 10.0));
  CHECK(w.lambda_reg == doctest::Approx(raw.gan / raw.reg));
}

TEST_CASE("weight overrides replace only the named terms") {
  WeightOverrides o;
  o.lambda_actv = 0.0;
  const auto w = o.apply({0.5, 0.25, 2.0});
  CHECK(w.lambda_recon == 0.5);
  CHECK(w.lambda_actv == 0.0);
  CHECK(w.lambda_reg == 2.0);
}

TEST_CASE("config validation lists every violation") {
  TrainConfig c;
  c.epochs = 0;
  c.batch_size = 0;
  c.g_update_period = 0;
  c.n_groups = 1;
  const auto v = c.violations();
  CHECK(v.size() == 4);
  try {
    c.validate();
    FAIL("expected InvalidInput");
  } catch (const InvalidInput& e) {
    const std::string msg = e.what();
    for (const char* field : {"epochs", "batch_size", "g_update_period", "groups"}) {
      CHECK(msg.find(field) != std::string::npos);
    }
  }
  CHECK(TrainConfig().violations().empty());
}

TEST_CASE("config defaults") {
  TrainConfig c;
  CHECK(c.epochs == 30);
  CHECK(c.batch_size == 24);
  CHECK(c.learning_rate == 1e-4);
  CHECK(c.g_update_period == 5);
  CHECK(c.adam_beta1 == 0.5);
  CHECK(c.adam_beta2 == 0.999);
  CHECK(!c.weights);
}

TEST_CASE("config json round trip") {
  auto c = testing::tiny_config(4);
  c.use_attention = false;
  c.weight_overrides.lambda_actv = 0.0;
  const auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  c.weights = LossWeights{1, 2, 3};
  CHECK(TrainConfig::from_json(c.to_json()).weights->lambda_actv == 2.0);
}

TEST_CASE("the two generators never share parameters") {
  auto state = init_train_state(testing::tiny_config());
  const auto gp = state.g_progress->parameters();
  const auto gr = state.g_regress->parameters();
  for (const auto& a : gp) {
    for (const auto& b : gr) {
      CHECK(a.unsafeGetTensorImpl() != b.unsafeGetTensorImpl());
    }
  }
  bool differs = false;
  for (std::size_t i = 0; i < gp.size(); ++i) differs |= !torch::equal(gp[i], gr[i]);
  CHECK(differs);
}

TEST_CASE("identity generators reconstruct exactly with a saturated mask") {
  auto state = init_train_state(testing::tiny_config());
  state.to(torch::kFloat64);
  saturate_attention(state.g_progress);
  saturate_attention(state.g_regress);
  const auto batch = testing::random_batch(2, 2, 64, 4, torch::kFloat64);
  torch::NoGradGuard no_grad;
  const auto p = progression_cycle(state, batch);
  CHECK(p.recon.item<double>() < 1e-9);
  CHECK(std::abs(p.actv.item<double>() - 1.0) < 1e-9);
  const auto r = regression_cycle(state, batch);
  CHECK(r.recon.item<double>() < 1e-9);
}

TEST_CASE("progression cycle matches the straight-line recomputation") {
  auto cfg = testing::tiny_config(4);
  cfg.g_base_width = 4;
  auto state = init_train_state(cfg);
  state.to(torch::kFloat64);
  const auto batch = testing::random_batch(3, 4, 64, 8, torch::kFloat64);
  torch::NoGradGuard no_grad;
  const auto c = progression_cycle(state, batch);
  const auto o = oracle::cycle(oracle::params_of(*state.g_progress), oracle::params_of(*state.g_regress),
                               oracle::params_of(*state.d_progress), cfg.generator_config(), 0.2,
                               batch.young_images, batch.young_conditions, batch.old_images,
                               batch.old_conditions);
  check_cycle_matches(c, o);
}

TEST_CASE("regression cycle is the mirrored progression cycle") {
  auto state = init_train_state(testing::tiny_config(4));
  state.to(torch::kFloat64);
  {
    // Symmetric net: both generators and both discriminators share weights.
    torch::NoGradGuard no_grad;
    const auto gp = state.g_progress->parameters();
    const auto gr = state.g_regress->parameters();
    for (std::size_t i = 0; i < gp.size(); ++i) gr[i].copy_(gp[i]);
    const auto dp = state.d_progress->parameters();
    const auto dr = state.d_regress->parameters();
    for (std::size_t i = 0; i < dp.size(); ++i) dr[i].copy_(dp[i]);
  }
  const auto batch = testing::random_batch(2, 4, 64, 9, torch::kFloat64);
  OrderedPairBatch swapped = batch;
  std::swap(swapped.young_images, swapped.old_images);
  std::swap(swapped.young_conditions, swapped.old_conditions);
  std::swap(swapped.young_groups, swapped.old_groups);
  torch::NoGradGuard no_grad;
  const auto r = regression_cycle(state, batch);
  const auto p = progression_cycle(state, swapped);
  CHECK(r.gan_g.item<double>() == doctest::Approx(p.gan_g.item<double>()).epsilon(1e-12));
  CHECK(r.gan_d.item<double>() == doctest::Approx(p.gan_d.item<double>()).epsilon(1e-12));
  CHECK(r.recon.item<double>() == doctest::Approx(p.recon.item<double>()).epsilon(1e-12));
  CHECK(r.actv.item<double>() == doctest::Approx(p.actv.item<double>()).epsilon(1e-12));
  CHECK(r.reg_fake.item<double>() == doctest::Approx(p.reg_fake.item<double>()).epsilon(1e-12));
  CHECK(r.reg_real.item<double>() == doctest::Approx(p.reg_real.item<double>()).epsilon(1e-12));
}

TEST_CASE("non-finite input raises a divergence error naming the step") {
  auto state = init_train_state(testing::tiny_config());
  state.step = 17;
  auto batch = testing::random_batch(2, 2, 64, 2);
  batch.young_images[0][0][0][0] = std::numeric_limits<float>::quiet_NaN();
  torch::NoGradGuard no_grad;
  try {
    progression_cycle(state, batch);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("17") != std::string::npos);
  }
}

TEST_CASE("train_step requires calibrated weights") {
  auto state = init_train_state(testing::tiny_config());
  CHECK_THROWS_AS(train_step(state, testing::random_batch(2, 2, 64, 1)), InvalidInput);
}

TEST_CASE("update schedule over twenty steps with period five") {
  const auto cfg = testing::tiny_config();
  const auto batch = testing::random_batch(2, 2, 64, 5);
  auto state = calibrated_state(cfg, batch);
  int d_changes = 0;
  int g_changes = 0;
  std::vector<std::int64_t> g_steps;
  for (int i = 0; i < 20; ++i) {
    const auto g_before = testing::snapshot(state.generator_parameters());
    const auto d_before = testing::snapshot(state.discriminator_parameters());
    train_step(state, testing::random_batch(2, 2, 64, 100 + i));
    CHECK(state.step == i + 1);
    if (!testing::same_bits(g_before, testing::snapshot(state.generator_parameters()))) {
      ++g_changes;
      g_steps.push_back(state.step);
    }
    d_changes += !testing::same_bits(d_before, testing::snapshot(state.discriminator_parameters()));
  }
  CHECK(d_changes == 20);
  CHECK(g_changes == 4);
  CHECK(g_steps == std::vector<std::int64_t>{5, 10, 15, 20});
  CHECK(state.d_optimizer.steps() == 20);
  CHECK(state.g_optimizer.steps() == 4);
}

TEST_CASE("zero learning rate changes nothing") {
  auto cfg = testing::tiny_config();
  cfg.learning_rate = 0.0;
  const auto batch = testing::random_batch(2, 2, 64, 6);
  auto state = calibrated_state(cfg, batch);
  const auto g0 = testing::snapshot(state.generator_parameters());
  const auto d0 = testing::snapshot(state.discriminator_parameters());
  std::vector<LossReport> reports;
  for (int i = 0; i < 6; ++i) reports.push_back(train_step(state, batch));
  CHECK(testing::same_bits(g0, testing::snapshot(state.generator_parameters())));
  CHECK(testing::same_bits(d0, testing::snapshot(state.discriminator_parameters())));
  for (const auto& r : reports) {
    CHECK(r.gan_g == reports[0].gan_g);
    CHECK(r.gan_d == reports[0].gan_d);
    CHECK(r.recon == reports[0].recon);
    CHECK(r.actv == reports[0].actv);
    CHECK(r.reg == reports[0].reg);
    CHECK(r.total == reports[0].total);
  }
}

TEST_CASE("a small discriminator step does not increase its loss") {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    auto cfg = testing::tiny_config(4);
    cfg.learning_rate = 1e-6;
    cfg.seed = seed;
    auto state = init_train_state(cfg);
    state.to(torch::kFloat64);
    const auto batch = testing::random_batch(4, 4, 64, seed + 10, torch::kFloat64);
    state.weights = calibrate_lambdas(state, batch);
    auto d_terms = [&] {
      torch::NoGradGuard no_grad;
      const auto fo = state.g_progress->forward(batch.young_images, batch.old_conditions).fused;
      const auto fy = state.g_regress->forward(batch.old_images, batch.young_conditions).fused;
      return discriminator_objective(state, batch, fo, fy);
    };
    const auto before = d_terms();
    train_step(state, batch);  // step 1: discriminators only
    const auto after = d_terms();
    CHECK(after.objective.item<double>() <= before.objective.item<double>());

    // Without the age terms the adversarial part alone must not rise either.
    auto cfg2 = cfg;
    auto state2 = init_train_state(cfg2);
    state2.to(torch::kFloat64);
    state2.weights = LossWeights{1.0, 1.0, 0.0};
    auto gan_d = [&] {
      torch::NoGradGuard no_grad;
      const auto fo = state2.g_progress->forward(batch.young_images, batch.old_conditions).fused;
      const auto fy = state2.g_regress->forward(batch.old_images, batch.young_conditions).fused;
      return discriminator_objective(state2, batch, fo, fy).gan_d.item<double>();
    };
    const double g0 = gan_d();
    train_step(state2, batch);
    CHECK(gan_d() <= g0);
  }
}

TEST_CASE("fake age terms reach the discriminator only when enabled") {
  auto cfg = testing::tiny_config(4);
  const auto batch = testing::random_batch(2, 4, 64, 12);
  auto state = calibrated_state(cfg, batch);
  const auto fo = state.g_progress->forward(batch.young_images, batch.old_conditions).fused.detach();
  const auto fy = state.g_regress->forward(batch.old_images, batch.young_conditions).fused.detach();
  const auto off = discriminator_objective(state, batch, fo, fy);
  state.config.fake_age_trains_d = true;
  const auto on = discriminator_objective(state, batch, fo, fy);
  CHECK(on.objective.item<double>() > off.objective.item<double>());
  CHECK(off.objective.item<double>() ==
        doctest::Approx(off.gan_d.item<double>() +
                        state.weights->lambda_reg * off.reg_real.item<double>()));
}

TEST_CASE("divergence is detected in parameters") {
  const auto cfg = testing::tiny_config();
  const auto batch = testing::random_batch(2, 2, 64, 7);
  auto state = calibrated_state(cfg, batch);
  {
    torch::NoGradGuard no_grad;
    state.d_progress->age_head()->weight[0][0] = std::numeric_limits<float>::infinity();
  }
  CHECK_THROWS_AS(train_step(state, batch), DivergenceError);
}

TEST_CASE("loss report fields are finite and non-negative") {
  const auto cfg = testing::tiny_config(4);
  const auto batch = testing::random_batch(2, 4, 64, 13);
  auto state = calibrated_state(cfg, batch);
  for (int i = 0; i < 5; ++i) {
    const auto r = train_step(state, batch);
    CHECK(r.all_finite());
    CHECK(r.recon >= 0.0);
    CHECK(r.actv >= 0.0);
    CHECK(r.reg >= 0.0);
    const auto j = loss_report_json(r, state.step);
    CHECK(j.at("step") == state.step);
    CHECK(j.at("recon").get<double>() == r.recon);
  }
}

TEST_CASE("batch seeds differ by step and seed") {
  CHECK(batch_seed(1, 1) != batch_seed(1, 2));
  CHECK(batch_seed(1, 1) != batch_seed(2, 1));
  CHECK(batch_seed(5, 9) == batch_seed(5, 9));
}

TEST_CASE("checkpoint round trip reproduces forward outputs and optimizer state") {
  testing::TempDir dir;
  const auto cfg = testing::tiny_config(4);
  const auto batch = testing::random_batch(2, 4, 64, 21);
  auto state = calibrated_state(cfg, batch);
  for (int i = 0; i < 6; ++i) train_step(state, batch);
  save_checkpoint(dir / "ck.agc", state);
  auto loaded = load_checkpoint(dir / "ck.agc");
  CHECK(loaded.step == 6);
  CHECK(loaded.g_optimizer.steps() == 1);
  CHECK(loaded.d_optimizer.steps() == 6);
  CHECK(loaded.weights->lambda_reg == state.weights->lambda_reg);
  CHECK(loaded.config.to_json() == state.config.to_json());
  CHECK(testing::same_bits(testing::snapshot(state.generator_parameters()),
                           testing::snapshot(loaded.generator_parameters())));
  const auto ms = state.d_optimizer.state();
  const auto ml = loaded.d_optimizer.state();
  REQUIRE(ms.size() == ml.size());
  for (std::size_t i = 0; i < ms.size(); ++i) CHECK(torch::equal(ms[i].second, ml[i].second));
  {
    torch::NoGradGuard no_grad;
    const auto a = state.g_progress->forward(batch.young_images, batch.old_conditions);
    const auto b = loaded.g_progress->forward(batch.young_images, batch.old_conditions);
    CHECK(torch::equal(a.fused, b.fused));
    CHECK(torch::equal(a.attention, b.attention));
  }
  // Continuing from the copy matches continuing from the original.
  const auto ra = train_step(state, batch);
  const auto rb = train_step(loaded, batch);
  CHECK(ra.total == rb.total);
}

TEST_CASE("fit resumes an interrupted run to the same final checkpoint") {
  testing::TempDir dir;
  const auto recs = write_synthetic_dataset(dir / "data", 4, 2, 64, 3);
  FaceDataset ds(recs, 64, 2);
  auto cfg = testing::tiny_config(2);
  cfg.epochs = 2;
  cfg.threads = 1;

  FitOptions full;
  full.out_dir = dir / "full";
  std::ostringstream log_full;
  full.log = &log_full;
  const auto done = fit(cfg, ds, full);
  CHECK(done.steps == 8);
  CHECK(done.checkpoint == final_checkpoint_path(full.out_dir));
  CHECK(std::filesystem::exists(latest_checkpoint_path(full.out_dir)));

  FitOptions part;
  part.out_dir = dir / "part";
  part.max_steps = 3;
  const auto stopped = fit(cfg, ds, part);
  CHECK(stopped.steps == 3);
  CHECK(load_checkpoint(latest_checkpoint_path(part.out_dir)).step == 3);
  CHECK(!std::filesystem::exists(final_checkpoint_path(part.out_dir)));

  part.max_steps = 0;
  part.resume = true;
  const auto resumed = fit(cfg, ds, part);
  CHECK(resumed.steps == 8);
  CHECK(resumed.last_report.total == done.last_report.total);
  CHECK(slurp(final_checkpoint_path(part.out_dir)) == slurp(final_checkpoint_path(full.out_dir)));

  // One JSON line per step.
  std::istringstream lines(log_full.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    CHECK(nlohmann::json::parse(line).at("step") == ++n);
  }
  CHECK(n == 8);
}

TEST_CASE("fit rejects mismatched datasets") {
  testing::TempDir dir;
  const auto recs = write_synthetic_dataset(dir / "data", 2, 2, 64, 3);
  FaceDataset ds(recs, 64, 2);
  FitOptions fo;
  fo.out_dir = dir / "run";
  CHECK_THROWS_AS(fit(testing::tiny_config(4), ds, fo), InvalidInput);
}

}  // TEST_SUITE

TEST_SUITE("trainer_convergence") {

TEST_CASE("generator loss falls between step 50 and step 500") {
  testing::TempDir dir;
  const auto recs = write_synthetic_dataset(dir / "data", 40, 4, 64, 5);
  FaceDataset ds(recs, 64, 4);
  std::vector<double> early;
  std::vector<double> late;
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    auto cfg = testing::tiny_config(4);
    cfg.g_base_width = 8;
    cfg.d_base_width = 8;
    cfg.d_max_width = 32;
    cfg.batch_size = 8;
    cfg.seed = seed;
    cfg.epochs = 100;
    FitOptions fo;
    fo.out_dir = dir / ("run" + std::to_string(seed));
    fo.max_steps = 500;
    double at50 = 0.0;
    double at500 = 0.0;
    fo.on_step = [&](std::int64_t step, const LossReport& r) {
      if (step == 50) at50 = r.g_total;
      if (step == 500) at500 = r.g_total;
    };
    fit(cfg, ds, fo);
    early.push_back(at50);
    late.push_back(at500);
  }
  std::sort(early.begin(), early.end());
  std::sort(late.begin(), late.end());
  MESSAGE("median G loss at step 50: " << early[1] << ", at step 500: " << late[1]);
  CHECK(late[1] < early[1]);
}

}  // TEST_SUITE
