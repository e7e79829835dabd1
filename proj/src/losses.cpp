#include "agecycle/losses.hpp"

#include <cmath>

#include "agecycle/errors.hpp"

namespace agecycle {

void LossWeights::validate() const {
  for (double w : {lambda_recon, lambda_actv, lambda_reg}) {
    if (!std::isfinite(w) || w < 0.0) {
      throw InvalidInput("loss weights must be finite and non-negative");
    }
  }
}

bool LossReport::all_finite() const {
  for (double v : {gan_g, gan_d, recon, actv, reg, total, g_total, d_total}) {
    if (!std::isfinite(v)) {
      return false;
    }
  }
  return true;
}

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw InvalidInput(std::string(what) + ": shape mismatch");
  }
}

}  // namespace

torch::Tensor lsgan_d_loss(const torch::Tensor& real_scores, const torch::Tensor& fake_scores) {
  require_same_shape(real_scores, fake_scores, "lsgan_d_loss");
  return (real_scores - 1).square().mean() + fake_scores.square().mean();
}

torch::Tensor lsgan_g_loss(const torch::Tensor& fake_scores) {
  return (fake_scores - 1).square().mean();
}

torch::Tensor reconstruction_loss(const torch::Tensor& reconstruction,
                                  const torch::Tensor& original) {
  require_same_shape(reconstruction, original, "reconstruction_loss");
  return (reconstruction - original).abs().mean();
}

torch::Tensor attention_activation_loss(const torch::Tensor& mask) {
  if (mask.dim() == 2) {
    return attention_activation_loss(mask.unsqueeze(0));
  }
  if (mask.dim() != 3) {
    throw InvalidInput("attention_activation_loss: expected [H, W] or [B, H, W] mask");
  }
  {
    torch::NoGradGuard no_grad;
    if (((mask < 0) | (mask > 1) | mask.isnan()).any().item<bool>()) {
      throw InvalidInput("attention_activation_loss: mask entries outside [0, 1]");
    }
  }
  // sqrt(mean(m^2)) == ||m||_2 / sqrt(HW); the clamp keeps the gradient finite at m == 0.
  const auto mean_sq = mask.square().flatten(1).mean(1);
  const auto norm = torch::where(mean_sq > 0, mean_sq.clamp_min(1e-30).sqrt(),
                                 torch::zeros_like(mean_sq));
  return norm.mean();
}

torch::Tensor age_regression_loss(const torch::Tensor& pred, const torch::Tensor& target) {
  if (pred.dim() == 1 && target.dim() == 1) {
    return age_regression_loss(pred.unsqueeze(0), target.unsqueeze(0));
  }
  require_same_shape(pred, target, "age_regression_loss");
  if (pred.dim() != 2) {
    throw InvalidInput("age_regression_loss: expected [N] or [B, N]");
  }
  return (pred - target.to(pred.dtype())).square().sum(1).mean();
}

double total_loss(double gan, double recon, double actv, double reg, const LossWeights& weights) {
  for (double v : {gan, recon, actv, reg, weights.lambda_recon, weights.lambda_actv,
                   weights.lambda_reg}) {
    if (!std::isfinite(v)) {
      throw NumericError("total_loss: non-finite input");
    }
  }
  return gan + weights.lambda_recon * recon + weights.lambda_actv * actv + weights.lambda_reg * reg;
}

}  // namespace agecycle
