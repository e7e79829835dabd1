#pragma once

#include <torch/torch.h>

namespace agecycle {

struct LossWeights {
  double lambda_recon = 1.0;
  double lambda_actv = 1.0;
  double lambda_reg = 1.0;

  /// Throws InvalidInput unless every weight is finite and non-negative.
  void validate() const;
};

struct LossReport {
  double gan_g = 0.0;  // (D(G(.)) - 1)^2 terms
  double gan_d = 0.0;  // (D(real) - 1)^2 + D(G(.))^2 terms
  double recon = 0.0;
  double actv = 0.0;
  double reg = 0.0;    // all four age terms
  double total = 0.0;  // weighted sum with gan = gan_g + gan_d
  /// Objective actually descended by the generators / discriminators.
  double g_total = 0.0;
  double d_total = 0.0;

  bool all_finite() const;
};

// All reductions are means so magnitudes do not depend on resolution or batch.

/// mean((real - 1)^2) + mean(fake^2)
torch::Tensor lsgan_d_loss(const torch::Tensor& real_scores, const torch::Tensor& fake_scores);

/// mean((fake - 1)^2)
torch::Tensor lsgan_g_loss(const torch::Tensor& fake_scores);

/// Mean absolute difference over every pixel and channel.
torch::Tensor reconstruction_loss(const torch::Tensor& reconstruction,
                                  const torch::Tensor& original);

/// ||mask||_2 / sqrt(H * W) per mask, averaged over the batch. Accepts [H, W]
/// or [B, H, W]; entries must lie in [0, 1].
torch::Tensor attention_activation_loss(const torch::Tensor& mask);

/// ||pred - target||^2 per row, averaged over the batch. Accepts [N] or [B, N].
torch::Tensor age_regression_loss(const torch::Tensor& pred, const torch::Tensor& target);

/// gan + lambda_recon * recon + lambda_actv * actv + lambda_reg * reg.
/// Throws NumericError on any non-finite part.
double total_loss(double gan, double recon, double actv, double reg, const LossWeights& weights);

}  // namespace agecycle
