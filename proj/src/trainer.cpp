#include "agecycle/trainer.hpp"

#include <cmath>
#include <sstream>

#include "agecycle/checkpoint.hpp"
#include "agecycle/errors.hpp"
#include "agecycle/log.hpp"

namespace agecycle {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::vector<NamedTensor> prefixed(const torch::nn::Module& module, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& item : module.named_parameters()) {
    out.emplace_back(prefix + item.key(), item.value());
  }
  return out;
}

void append(std::vector<NamedTensor>& dst, std::vector<NamedTensor> src) {
  dst.insert(dst.end(), std::make_move_iterator(src.begin()), std::make_move_iterator(src.end()));
}

double scalar(const torch::Tensor& t) { return t.item<double>(); }

}  // namespace

LossWeights WeightOverrides::apply(LossWeights w) const {
  if (lambda_recon) w.lambda_recon = *lambda_recon;
  if (lambda_actv) w.lambda_actv = *lambda_actv;
  if (lambda_reg) w.lambda_reg = *lambda_reg;
  return w;
}

GeneratorConfig TrainConfig::generator_config() const {
  GeneratorConfig g;
  g.resolution = resolution;
  g.n_groups = n_groups;
  g.base_width = g_base_width;
  g.n_res_blocks = g_res_blocks;
  g.use_attention = use_attention;
  return g;
}

DiscriminatorConfig TrainConfig::discriminator_config() const {
  DiscriminatorConfig d;
  d.resolution = resolution;
  d.n_groups = n_groups;
  d.base_width = d_base_width;
  d.max_width = d_max_width;
  return d;
}

std::vector<std::string> TrainConfig::violations() const {
  std::vector<std::string> v;
  if (epochs < 1) v.emplace_back("epochs must be >= 1");
  if (batch_size < 1) v.emplace_back("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    v.emplace_back("learning_rate must be finite and >= 0");
  }
  if (g_update_period < 1) v.emplace_back("g_update_period must be >= 1");
  if (resolution < 64 || resolution % 64 != 0) {
    v.emplace_back("resolution must be a positive multiple of 64");
  }
  if (n_groups < 2) v.emplace_back("groups must be >= 2");
  if (weights) {
    for (double w : {weights->lambda_recon, weights->lambda_actv, weights->lambda_reg}) {
      if (!std::isfinite(w) || w < 0.0) {
        v.emplace_back("lambda weights must be finite and >= 0");
        break;
      }
    }
  }
  for (const auto& o : {weight_overrides.lambda_recon, weight_overrides.lambda_actv,
                       weight_overrides.lambda_reg}) {
    if (o && (!std::isfinite(*o) || *o < 0.0)) {
      v.emplace_back("lambda overrides must be finite and >= 0");
      break;
    }
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) v.emplace_back("adam_beta1 must lie in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) v.emplace_back("adam_beta2 must lie in [0, 1)");
  if (g_base_width < 1) v.emplace_back("g_width must be >= 1");
  if (g_res_blocks < 0) v.emplace_back("g_res_blocks must be >= 0");
  if (d_base_width < 1) v.emplace_back("d_width must be >= 1");
  if (d_max_width < d_base_width) v.emplace_back("d_max_width must be >= d_width");
  if (threads < 0) v.emplace_back("threads must be >= 0");
  return v;
}

void TrainConfig::validate() const {
  const auto v = violations();
  if (v.empty()) {
    return;
  }
  std::ostringstream msg;
  msg << "invalid training configuration:";
  for (const auto& s : v) {
    msg << "\n  - " << s;
  }
  throw InvalidInput(msg.str());
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j = {
      {"epochs", epochs},
      {"batch_size", batch_size},
      {"learning_rate", learning_rate},
      {"g_update_period", g_update_period},
      {"resolution", resolution},
      {"groups", n_groups},
      {"seed", seed},
      {"use_attention", use_attention},
      {"ordered_input", ordered_input},
      {"fake_age_trains_d", fake_age_trains_d},
      {"adam_beta1", adam_beta1},
      {"adam_beta2", adam_beta2},
      {"g_width", g_base_width},
      {"g_res_blocks", g_res_blocks},
      {"d_width", d_base_width},
      {"d_max_width", d_max_width},
  };
  if (weights) {
    j["weights"] = {{"lambda_recon", weights->lambda_recon},
                    {"lambda_actv", weights->lambda_actv},
                    {"lambda_reg", weights->lambda_reg}};
  } else {
    j["weights"] = "auto";
  }
  if (weight_overrides.any()) {
    auto& o = j["weight_overrides"] = nlohmann::json::object();
    if (weight_overrides.lambda_recon) o["lambda_recon"] = *weight_overrides.lambda_recon;
    if (weight_overrides.lambda_actv) o["lambda_actv"] = *weight_overrides.lambda_actv;
    if (weight_overrides.lambda_reg) o["lambda_reg"] = *weight_overrides.lambda_reg;
  }
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.g_update_period = j.value("g_update_period", c.g_update_period);
  c.resolution = j.value("resolution", c.resolution);
  c.n_groups = j.value("groups", c.n_groups);
  c.seed = j.value("seed", c.seed);
  c.use_attention = j.value("use_attention", c.use_attention);
  c.ordered_input = j.value("ordered_input", c.ordered_input);
  c.fake_age_trains_d = j.value("fake_age_trains_d", c.fake_age_trains_d);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.g_base_width = j.value("g_width", c.g_base_width);
  c.g_res_blocks = j.value("g_res_blocks", c.g_res_blocks);
  c.d_base_width = j.value("d_width", c.d_base_width);
  c.d_max_width = j.value("d_max_width", c.d_max_width);
  if (j.contains("weights") && j["weights"].is_object()) {
    LossWeights w;
    w.lambda_recon = j["weights"].at("lambda_recon").get<double>();
    w.lambda_actv = j["weights"].at("lambda_actv").get<double>();
    w.lambda_reg = j["weights"].at("lambda_reg").get<double>();
    c.weights = w;
  }
  if (j.contains("weight_overrides")) {
    const auto& o = j["weight_overrides"];
    if (o.contains("lambda_recon")) c.weight_overrides.lambda_recon = o["lambda_recon"].get<double>();
    if (o.contains("lambda_actv")) c.weight_overrides.lambda_actv = o["lambda_actv"].get<double>();
    if (o.contains("lambda_reg")) c.weight_overrides.lambda_reg = o["lambda_reg"].get<double>();
  }
  return c;
}

std::vector<NamedTensor> TrainState::generator_parameters() const {
  auto out = prefixed(*g_progress, "G_p/");
  append(out, prefixed(*g_regress, "G_r/"));
  return out;
}

std::vector<NamedTensor> TrainState::discriminator_parameters() const {
  auto out = prefixed(*d_progress, "D_p/");
  append(out, prefixed(*d_regress, "D_r/"));
  return out;
}

void TrainState::to(torch::Dtype dtype) {
  g_progress->to(dtype);
  g_regress->to(dtype);
  d_progress->to(dtype);
  d_regress->to(dtype);
  const auto g_state = g_optimizer.state();
  const auto d_state = d_optimizer.state();
  const auto g_steps = g_optimizer.steps();
  const auto d_steps = d_optimizer.steps();
  g_optimizer = Adam(generator_parameters(), g_optimizer.options());
  d_optimizer = Adam(discriminator_parameters(), d_optimizer.options());
  g_optimizer.load_state(g_state, g_steps);
  d_optimizer.load_state(d_state, d_steps);
}

TrainState init_train_state(const TrainConfig& config) {
  config.validate();
  TrainState s;
  s.config = config;
  const auto gc = config.generator_config();
  const auto dc = config.discriminator_config();
  s.g_progress = init_generator(splitmix64(config.seed * 4 + 0), gc);
  s.g_regress = init_generator(splitmix64(config.seed * 4 + 1), gc);
  s.d_progress = init_discriminator(splitmix64(config.seed * 4 + 2), dc);
  s.d_regress = init_discriminator(splitmix64(config.seed * 4 + 3), dc);
  Adam::Options opts;
  opts.learning_rate = config.learning_rate;
  opts.beta1 = config.adam_beta1;
  opts.beta2 = config.adam_beta2;
  s.g_optimizer = Adam(s.generator_parameters(), opts);
  s.d_optimizer = Adam(s.discriminator_parameters(), opts);
  s.weights = config.weights;
  return s;
}

CycleLosses run_cycle(AttentionGenerator& forward_generator, AttentionGenerator& backward_generator,
                      PatchDiscriminator& discriminator, const torch::Tensor& source_images,
                      const torch::Tensor& source_conditions, const torch::Tensor& target_images,
                      const torch::Tensor& target_conditions, std::int64_t step) {
  CycleLosses c;
  c.translated = forward_generator->forward(source_images, target_conditions);
  c.reconstructed = backward_generator->forward(c.translated.fused, source_conditions);
  const auto fake = discriminator->forward(c.translated.fused);
  const auto real_target = discriminator->forward(target_images);
  const auto real_source = discriminator->forward(source_images);
  c.gan_g = lsgan_g_loss(fake.patch_scores);
  c.gan_d = lsgan_d_loss(real_target.patch_scores, fake.patch_scores);
  c.recon = reconstruction_loss(c.reconstructed.fused, source_images);
  if (!torch::isfinite(c.translated.attention).all().item<bool>()) {
    throw DivergenceError("non-finite attention mask at step " + std::to_string(step));
  }
  c.actv = attention_activation_loss(c.translated.attention);
  c.reg_fake = age_regression_loss(fake.age_vector, target_conditions);
  c.reg_real = age_regression_loss(real_source.age_vector, source_conditions);
  for (const auto* t : {&c.gan_g, &c.gan_d, &c.recon, &c.actv, &c.reg_fake, &c.reg_real}) {
    if (!std::isfinite(scalar(*t))) {
      throw DivergenceError("non-finite cycle loss at step " + std::to_string(step));
    }
  }
  return c;
}

CycleLosses progression_cycle(TrainState& state, const OrderedPairBatch& batch) {
  return run_cycle(state.g_progress, state.g_regress, state.d_progress, batch.young_images,
                   batch.young_conditions, batch.old_images, batch.old_conditions, state.step);
}

CycleLosses regression_cycle(TrainState& state, const OrderedPairBatch& batch) {
  return run_cycle(state.g_regress, state.g_progress, state.d_regress, batch.old_images,
                   batch.old_conditions, batch.young_images, batch.young_conditions, state.step);
}

RawLosses raw_losses(TrainState& state, const OrderedPairBatch& batch) {
  torch::NoGradGuard no_grad;
  const auto p = progression_cycle(state, batch);
  const auto r = regression_cycle(state, batch);
  RawLosses raw;
  raw.gan = scalar(p.gan_g + p.gan_d + r.gan_g + r.gan_d);
  raw.recon = scalar(p.recon + r.recon);
  raw.actv = scalar(p.actv + r.actv);
  raw.reg = scalar(p.reg_fake + p.reg_real + r.reg_fake + r.reg_real);
  return raw;
}

LossWeights calibrate_from_raw(const RawLosses& raw) {
  const double gan = std::abs(raw.gan);
  auto ratio = [gan](double term, const char* name) {
    if (term == 0.0) {
      log::warn(std::string("lambda calibration: raw ") + name +
                " loss is exactly 0; using weight 1");
      return 1.0;
    }
    return gan / std::abs(term);
  };
  LossWeights w;
  // A zero term keeps weight 1 exactly; only calibrated ratios are divided.
  w.lambda_recon = raw.recon == 0.0 ? ratio(raw.recon, "reconstruction")
                                    : ratio(raw.recon, "reconstruction") / 10.0;
  w.lambda_actv = raw.actv == 0.0 ? ratio(raw.actv, "attention activation")
                                  : ratio(raw.actv, "attention activation") / 10.0;
  w.lambda_reg = ratio(raw.reg, "age regression");
  return w;
}

LossWeights calibrate_lambdas(TrainState& state, const OrderedPairBatch& batch) {
  const auto w = calibrate_from_raw(raw_losses(state, batch));
  w.validate();
  return w;
}

DiscriminatorTerms discriminator_objective(TrainState& state, const OrderedPairBatch& batch,
                                           const torch::Tensor& fake_old,
                                           const torch::Tensor& fake_young) {
  const auto& w = state.weights.value();
  const auto dp_real = state.d_progress->forward(batch.old_images);
  const auto dp_fake = state.d_progress->forward(fake_old);
  const auto dp_source = state.d_progress->forward(batch.young_images);
  const auto dr_real = state.d_regress->forward(batch.young_images);
  const auto dr_fake = state.d_regress->forward(fake_young);
  const auto dr_source = state.d_regress->forward(batch.old_images);
  DiscriminatorTerms t;
  t.gan_d = lsgan_d_loss(dp_real.patch_scores, dp_fake.patch_scores) +
            lsgan_d_loss(dr_real.patch_scores, dr_fake.patch_scores);
  t.reg_real = age_regression_loss(dp_source.age_vector, batch.young_conditions) +
               age_regression_loss(dr_source.age_vector, batch.old_conditions);
  t.objective = t.gan_d + w.lambda_reg * t.reg_real;
  if (state.config.fake_age_trains_d) {
    t.objective = t.objective +
                  w.lambda_reg * (age_regression_loss(dp_fake.age_vector, batch.old_conditions) +
                                  age_regression_loss(dr_fake.age_vector, batch.young_conditions));
  }
  return t;
}

namespace {

void check_parameters_finite(const TrainState& state) {
  for (const auto& list : {state.generator_parameters(), state.discriminator_parameters()}) {
    for (const auto& [name, p] : list) {
      if (!torch::isfinite(p).all().item<bool>()) {
        throw DivergenceError("parameter " + name + " became non-finite at step " +
                              std::to_string(state.step));
      }
    }
  }
}

std::string describe(const LossReport& r) {
  return loss_report_json(r, -1).dump();
}

}  // namespace

LossReport train_step(TrainState& state, const OrderedPairBatch& batch) {
  if (!state.weights) {
    throw InvalidInput("train_step: loss weights not calibrated");
  }
  const auto& w = *state.weights;
  const std::int64_t next_step = state.step + 1;
  const bool update_g = next_step % state.config.g_update_period == 0;

  GeneratorOutput to_old;
  GeneratorOutput to_young;
  GeneratorOutput back_young;
  GeneratorOutput back_old;
  {
    torch::AutoGradMode grad_mode(update_g);
    to_old = state.g_progress->forward(batch.young_images, batch.old_conditions);
    to_young = state.g_regress->forward(batch.old_images, batch.young_conditions);
    back_young = state.g_regress->forward(to_old.fused, batch.young_conditions);
    back_old = state.g_progress->forward(to_young.fused, batch.old_conditions);
  }

  LossReport report;

  // Discriminators: descend the real/fake terms and the real-image age terms.
  const auto d_terms =
      discriminator_objective(state, batch, to_old.fused.detach(), to_young.fused.detach());
  const auto& d_loss = d_terms.objective;
  report.gan_d = scalar(d_terms.gan_d);
  report.reg = scalar(d_terms.reg_real);
  report.d_total = scalar(d_loss);
  if (!std::isfinite(report.d_total)) {
    throw DivergenceError("non-finite discriminator loss at step " + std::to_string(next_step) +
                          ": " + describe(report));
  }
  state.d_optimizer.zero_grad();
  d_loss.backward();
  state.d_optimizer.step();
  state.d_optimizer.zero_grad();

  // Generators: adversarial, cycle reconstruction, activation and fake-image age terms.
  {
    torch::AutoGradMode grad_mode(update_g);
    const auto dp_fake = state.d_progress->forward(to_old.fused);
    const auto dr_fake = state.d_regress->forward(to_young.fused);
    const auto gan_g = lsgan_g_loss(dp_fake.patch_scores) + lsgan_g_loss(dr_fake.patch_scores);
    const auto recon = reconstruction_loss(back_young.fused, batch.young_images) +
                       reconstruction_loss(back_old.fused, batch.old_images);
    const auto actv =
        attention_activation_loss(to_old.attention) + attention_activation_loss(to_young.attention);
    const auto reg_fake = age_regression_loss(dp_fake.age_vector, batch.old_conditions) +
                          age_regression_loss(dr_fake.age_vector, batch.young_conditions);
    const auto g_loss =
        gan_g + w.lambda_recon * recon + w.lambda_actv * actv + w.lambda_reg * reg_fake;

    report.gan_g = scalar(gan_g);
    report.recon = scalar(recon);
    report.actv = scalar(actv);
    report.reg += scalar(reg_fake);
    report.g_total = scalar(g_loss);
    if (!std::isfinite(report.g_total)) {
      throw DivergenceError("non-finite generator loss at step " + std::to_string(next_step) +
                            ": " + describe(report));
    }
    if (update_g) {
      state.g_optimizer.zero_grad();
      g_loss.backward();
      state.g_optimizer.step();
      state.g_optimizer.zero_grad();
      // Discriminator grads accumulated through the generator objective are discarded.
      state.d_optimizer.zero_grad();
    }
  }

  report.total = total_loss(report.gan_g + report.gan_d, report.recon, report.actv, report.reg, w);
  state.step = next_step;
  if (!report.all_finite()) {
    throw DivergenceError("non-finite loss report at step " + std::to_string(next_step) + ": " +
                          describe(report));
  }
  check_parameters_finite(state);
  return report;
}

nlohmann::json loss_report_json(const LossReport& r, std::int64_t step) {
  nlohmann::json j = {{"gan_g", r.gan_g}, {"gan_d", r.gan_d},     {"recon", r.recon},
                      {"actv", r.actv},   {"reg", r.reg},         {"total", r.total},
                      {"g_total", r.g_total}, {"d_total", r.d_total}};
  if (step >= 0) {
    j["step"] = step;
  }
  return j;
}

std::filesystem::path latest_checkpoint_path(const std::filesystem::path& out_dir) {
  return out_dir / "checkpoint_latest.agc";
}

std::filesystem::path final_checkpoint_path(const std::filesystem::path& out_dir) {
  return out_dir / "checkpoint_final.agc";
}

std::uint64_t batch_seed(std::uint64_t seed, std::int64_t step) {
  return splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(step));
}

FitResult fit(const TrainConfig& config, const FaceDataset& train, const FitOptions& options) {
  config.validate();
  if (train.n_groups() != config.n_groups || train.resolution() != config.resolution) {
    throw InvalidInput("fit: dataset resolution/groups do not match the configuration");
  }
  if (config.threads > 0) {
    at::set_num_threads(config.threads);
  }
  std::filesystem::create_directories(options.out_dir);

  const std::int64_t per_epoch = steps_per_epoch(train.size(), config.batch_size);
  const std::int64_t total_steps = per_epoch * config.epochs;
  auto draw = [&](std::int64_t step) {
    return train.sample_batch(config.batch_size, batch_seed(config.seed, step),
                              config.ordered_input);
  };

  TrainState state;
  const auto latest = latest_checkpoint_path(options.out_dir);
  if (options.resume && std::filesystem::exists(latest)) {
    state = load_checkpoint(latest);
    log::info("resumed from " + latest.string() + " at step " + std::to_string(state.step));
  } else {
    state = init_train_state(config);
  }
  if (!state.weights) {
    state.weights = config.weight_overrides.apply(calibrate_lambdas(state, draw(1)));
    std::ostringstream msg;
    msg << "calibrated weights: recon=" << state.weights->lambda_recon
        << " actv=" << state.weights->lambda_actv << " reg=" << state.weights->lambda_reg;
    log::info(msg.str());
  }

  FitResult result;
  const std::int64_t stop =
      options.max_steps > 0 ? std::min(options.max_steps, total_steps) : total_steps;
  while (state.step < stop) {
    const auto batch = draw(state.step + 1);
    result.last_report = train_step(state, batch);
    if (options.log != nullptr) {
      *options.log << loss_report_json(result.last_report, state.step).dump() << '\n';
    }
    if (options.on_step) {
      options.on_step(state.step, result.last_report);
    }
    if (state.step % per_epoch == 0 || state.step == stop) {
      save_checkpoint(latest, state);
    }
  }
  if (options.log != nullptr) {
    options.log->flush();
  }
  result.steps = state.step;
  if (state.step == total_steps) {
    save_checkpoint(final_checkpoint_path(options.out_dir), state);
    result.checkpoint = final_checkpoint_path(options.out_dir);
  } else {
    result.checkpoint = latest;
  }
  return result;
}

}  // namespace agecycle
