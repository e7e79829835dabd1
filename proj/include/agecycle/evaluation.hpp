#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "agecycle/data_pipeline.hpp"
#include "agecycle/generator.hpp"

namespace agecycle {

/// Age estimation and face verification. Implementations are deterministic
/// for fixed inputs unless deterministic() says otherwise.
class EstimatorBackend {
 public:
  virtual ~EstimatorBackend() = default;

  virtual std::string name() const = 0;
  /// Estimated age in years.
  virtual double estimate_age(const torch::Tensor& image) = 0;
  /// Same-person confidence in [0, 100].
  virtual double verify(const torch::Tensor& a, const torch::Tensor& b) = 0;
  virtual bool deterministic() const { return true; }

  /// Batched forms; failures are rethrown as BackendError naming the index.
  virtual std::vector<double> estimate_ages(std::span<const torch::Tensor> images);
  virtual std::vector<double> verify_pairs(std::span<const torch::Tensor> a,
                                           std::span<const torch::Tensor> b);
};

struct AgeOracleConfig {
  int resolution = 64;
  int n_groups = 4;
  int n_subjects = 200;
  int steps = 600;
  int batch_size = 64;
  double learning_rate = 1e-3;
  /// Std of Gaussian pixel noise added to training renders.
  double noise_std = 0.03;
  std::uint64_t seed = 0x0AC1E;
};

/// Small CNN classifying procedural renders into age groups.
class AgeClassifierImpl : public torch::nn::Module {
 public:
  AgeClassifierImpl(int resolution, int n_groups);
  torch::Tensor forward(const torch::Tensor& images);  // logits [B, N]

 private:
  torch::nn::Sequential features_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(AgeClassifier);

/// Trains on renders of subjects disjoint from any dataset seed (its own
/// subject stream), quantized to 8 bits like stored images. Frozen on return.
AgeClassifier train_age_oracle(const AgeOracleConfig& config);
void save_age_oracle(const std::filesystem::path& path, AgeClassifier& model,
                     const AgeOracleConfig& config);
std::pair<AgeClassifier, AgeOracleConfig> load_age_oracle(const std::filesystem::path& path);

/// Fraction of fresh renders (unseen subjects) the classifier labels correctly.
double age_oracle_accuracy(AgeClassifier& model, const AgeOracleConfig& config, int n_subjects,
                           std::uint64_t seed);

/// Subject recovery by nearest prototype in a block-averaged 8x8 pixel space.
/// Each subject's prototype is the mean of its gallery images. Posteriors use
/// a Gaussian kernel plus an "unknown" class at the rejection radius, so images
/// far from every prototype match nobody.
class IdentityOracle {
 public:
  IdentityOracle(std::vector<std::string> subject_ids, const std::vector<torch::Tensor>& images);

  /// Posterior over gallery subjects (the remainder is the unknown class).
  torch::Tensor posterior(const torch::Tensor& image) const;
  /// Index of the nearest prototype, or -1 beyond the rejection radius.
  int recover(const torch::Tensor& image) const;
  /// 100 * sum_s p(s | a) p(s | b).
  double verify(const torch::Tensor& a, const torch::Tensor& b) const;

  const std::vector<std::string>& subjects() const { return subjects_; }
  double kernel_width() const { return sigma_; }
  double rejection_radius() const { return radius_; }

  static torch::Tensor embed(const torch::Tensor& image);

 private:
  std::vector<std::string> subjects_;
  torch::Tensor prototypes_;  // [S, D]
  double sigma_ = 1.0;
  double radius_ = 1.0;
};

/// Local default backend: the age classifier (argmax group midpoint under
/// `scheme`) plus the identity oracle.
class OracleBackend : public EstimatorBackend {
 public:
  OracleBackend(AgeClassifier classifier, IdentityOracle identity, GroupScheme scheme);

  std::string name() const override { return "oracle"; }
  double estimate_age(const torch::Tensor& image) override;
  double verify(const torch::Tensor& a, const torch::Tensor& b) override;
  std::vector<double> estimate_ages(std::span<const torch::Tensor> images) override;

  /// Argmax groups for a batch [B, 3, H, W].
  std::vector<int> classify(const torch::Tensor& images);
  const IdentityOracle& identity() const { return identity_; }

 private:
  AgeClassifier classifier_;
  IdentityOracle identity_;
  GroupScheme scheme_;
};

struct GroupErrorBreakdown {
  int target_group = 0;
  std::size_t count = 0;
  double mean_error = 0.0;
};

struct GroupErrorResult {
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<GroupErrorBreakdown> per_group;
};

/// mean |assign_age_group(estimate_age(image)) - target| over the list.
GroupErrorResult group_classification_error(
    std::span<const std::pair<torch::Tensor, int>> generated, EstimatorBackend& estimator,
    const GroupScheme& scheme);

struct IdentityResult {
  double rate = 0.0;        // fraction of pairs with score >= threshold
  double mean_score = 0.0;  // in [0, 100]
};

IdentityResult identity_preservation(std::span<const torch::Tensor> inputs,
                                     std::span<const torch::Tensor> outputs,
                                     EstimatorBackend& estimator, double threshold);

/// Expected |U - t| for an estimate U uniform over groups, averaged over the
/// targets listed.
double chance_group_error(std::span<const int> targets, int n_groups);

struct EvalReport {
  std::string backend;
  std::size_t samples = 0;
  double mean_group_error = 0.0;
  double group_error_std = 0.0;
  double identity_rate = 0.0;
  double identity_mean_score = 0.0;
  double identity_threshold = 0.0;
  std::vector<GroupErrorBreakdown> per_group;
  /// Extra measurements (attention activation, cycle reconstruction, ...).
  std::vector<std::pair<std::string, double>> diagnostics;

  nlohmann::json to_json() const;
  /// Plain-text table with "Age Est. Error" and "Veri. Rate (%)" columns.
  std::string to_table(const std::string& row_label) const;
};

/// One translated test image.
struct Translation {
  std::size_t source = 0;  // index into the test dataset
  int source_group = 0;
  int target_group = 0;
  torch::Tensor output;     // [3, H, W]
  torch::Tensor attention;  // [H, W]
};

/// Translates every test image to every other group: G_p for older targets,
/// G_r for younger ones.
std::vector<Translation> translate_to_all_groups(AttentionGenerator& progressor,
                                                 AttentionGenerator& regressor,
                                                 const FaceDataset& test, int batch_size = 32);

/// Mean L1 of G_r(G_p(x, older), source) against x over ordered test pairs,
/// plus the mirror direction, averaged.
double cycle_reconstruction_l1(AttentionGenerator& progressor, AttentionGenerator& regressor,
                               const FaceDataset& test, int batch_size = 32);

EvalReport evaluate_translations(const FaceDataset& test, std::span<const Translation> translations,
                                 EstimatorBackend& estimator, const GroupScheme& scheme,
                                 double identity_threshold);

}  // namespace agecycle
