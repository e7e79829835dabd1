#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "agecycle/adam.hpp"
#include "agecycle/data_pipeline.hpp"
#include "agecycle/discriminator.hpp"
#include "agecycle/generator.hpp"
#include "agecycle/losses.hpp"

namespace agecycle {

/// Per-term weights fixed by hand while the others are still calibrated.
struct WeightOverrides {
  std::optional<double> lambda_recon;
  std::optional<double> lambda_actv;
  std::optional<double> lambda_reg;

  bool any() const { return lambda_recon || lambda_actv || lambda_reg; }
  LossWeights apply(LossWeights w) const;
};

struct TrainConfig {
  int epochs = 30;
  int batch_size = 24;
  double learning_rate = 1e-4;
  /// Generators step once per this many discriminator steps.
  int g_update_period = 5;
  int resolution = 256;
  int n_groups = 4;
  /// Empty means calibrate from the first batch.
  std::optional<LossWeights> weights;
  /// Applied on top of calibrated weights (ignored when `weights` is set).
  WeightOverrides weight_overrides;
  std::uint64_t seed = 0;
  bool use_attention = true;
  bool ordered_input = true;
  /// Let the fake-image age terms also train the discriminators' age heads.
  bool fake_age_trains_d = false;

  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;

  int g_base_width = 32;
  int g_res_blocks = 4;
  int d_base_width = 32;
  int d_max_width = 512;

  /// Intra-op threads; 0 leaves the library default.
  int threads = 0;

  GeneratorConfig generator_config() const;
  DiscriminatorConfig discriminator_config() const;

  /// Every violated constraint, empty when valid.
  std::vector<std::string> violations() const;
  /// Throws InvalidInput listing every violation.
  void validate() const;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// The four networks, their optimizers, the step counter and resolved weights.
struct TrainState {
  TrainConfig config;
  AttentionGenerator g_progress{nullptr};
  AttentionGenerator g_regress{nullptr};
  PatchDiscriminator d_progress{nullptr};
  PatchDiscriminator d_regress{nullptr};
  Adam g_optimizer;
  Adam d_optimizer;
  std::int64_t step = 0;
  std::optional<LossWeights> weights;

  /// Prefixed ("G_p/", "G_r/", "D_p/", "D_r/") parameter lists.
  std::vector<NamedTensor> generator_parameters() const;
  std::vector<NamedTensor> discriminator_parameters() const;

  /// Converts all networks (and optimizer moments) to `dtype`.
  void to(torch::Dtype dtype);
};

TrainState init_train_state(const TrainConfig& config);

/// Loss terms of one cycle for a batch: source images are translated with the
/// target condition by the forward generator, then mapped back with the source
/// condition by the backward generator; the cycle's discriminator judges them.
struct CycleLosses {
  GeneratorOutput translated;     // G_fwd(source, target condition)
  GeneratorOutput reconstructed;  // G_bwd(translated.fused, source condition)
  torch::Tensor gan_g;            // mean (D(fake) - 1)^2
  torch::Tensor gan_d;            // mean (D(real target) - 1)^2 + mean D(fake)^2
  torch::Tensor recon;            // |reconstructed - source|_1 mean
  torch::Tensor actv;             // translated.attention activation
  torch::Tensor reg_fake;         // |D^a(fake) - target condition|^2
  torch::Tensor reg_real;         // |D^a(source) - source condition|^2
};

CycleLosses run_cycle(AttentionGenerator& forward_generator, AttentionGenerator& backward_generator,
                      PatchDiscriminator& discriminator, const torch::Tensor& source_images,
                      const torch::Tensor& source_conditions, const torch::Tensor& target_images,
                      const torch::Tensor& target_conditions, std::int64_t step = 0);

/// Young -> old with G_p, back with G_r, judged by D_p.
CycleLosses progression_cycle(TrainState& state, const OrderedPairBatch& batch);
/// Old -> young with G_r, back with G_p, judged by D_r.
CycleLosses regression_cycle(TrainState& state, const OrderedPairBatch& batch);

/// Unweighted adversarial, reconstruction, activation and age totals over both cycles.
struct RawLosses {
  double gan = 0.0;
  double recon = 0.0;
  double actv = 0.0;
  double reg = 0.0;
};

RawLosses raw_losses(TrainState& state, const OrderedPairBatch& batch);

/// lambda_x = |gan| / |x|, then lambda_recon and lambda_actv are divided by
/// 10. A zero term falls back to weight 1 and logs a warning.
LossWeights calibrate_from_raw(const RawLosses& raw);
LossWeights calibrate_lambdas(TrainState& state, const OrderedPairBatch& batch);

struct DiscriminatorTerms {
  torch::Tensor gan_d;     // least-squares real/fake terms of D_p and D_r
  torch::Tensor reg_real;  // real-image age terms
  torch::Tensor objective; // what the discriminators descend
};

/// Discriminator objective for fixed fakes (which must not carry gradient to G).
DiscriminatorTerms discriminator_objective(TrainState& state, const OrderedPairBatch& batch,
                                           const torch::Tensor& fake_old,
                                           const torch::Tensor& fake_young);

/// One iteration: discriminators always step, generators step when the new
/// step counter is a multiple of g_update_period. Throws DivergenceError on
/// any non-finite loss or parameter.
LossReport train_step(TrainState& state, const OrderedPairBatch& batch);

nlohmann::json loss_report_json(const LossReport& report, std::int64_t step);

struct FitOptions {
  std::filesystem::path out_dir;
  /// Continue from out_dir/checkpoint_latest.agc when present.
  bool resume = false;
  /// Stop after this many steps in total (for tests and interruption); 0 = run to the end.
  std::int64_t max_steps = 0;
  /// Line-delimited JSON loss log; may be null.
  std::ostream* log = nullptr;
  std::function<void(std::int64_t step, const LossReport&)> on_step;
};

std::filesystem::path latest_checkpoint_path(const std::filesystem::path& out_dir);
std::filesystem::path final_checkpoint_path(const std::filesystem::path& out_dir);

/// Seed of the batch drawn at 1-based step `step`.
std::uint64_t batch_seed(std::uint64_t seed, std::int64_t step);

struct FitResult {
  std::filesystem::path checkpoint;
  LossReport last_report;
  std::int64_t steps = 0;
};

/// Runs epochs x ceil(|train| / batch_size) steps, checkpointing after every
/// epoch (checkpoint_latest.agc) and at the end (checkpoint_final.agc).
FitResult fit(const TrainConfig& config, const FaceDataset& train, const FitOptions& options);

}  // namespace agecycle
