#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace agecycle {

struct DiscriminatorConfig {
  static constexpr int kConvLayers = 6;

  int resolution = 256;
  int n_groups = 4;
  int base_width = 32;
  int max_width = 512;
  double leaky_slope = 0.2;

  /// Width of conv layer `i` (0-based): base_width * 2^i, capped at max_width.
  int width(int layer) const;
  /// Side of the patch map, resolution / 2^6.
  int patch_size() const { return resolution >> kConvLayers; }
  void validate() const;
};

struct DiscriminatorOutput {
  torch::Tensor patch_scores;  // [B, 1, h, w], linear (least-squares targets)
  torch::Tensor age_vector;    // [B, N]
};

/// Six 4x4 stride-2 convolutions, each followed by a leaky ReLU; a 1-channel
/// 4x4 stride-1 conv on the last feature map gives patch realism scores, and
/// a fully connected layer on the flattened features gives the age vector.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit PatchDiscriminatorImpl(const DiscriminatorConfig& config);

  DiscriminatorOutput forward(const torch::Tensor& images);

  const DiscriminatorConfig& config() const { return config_; }
  torch::nn::Conv2d conv_layer(int i) const { return convs_.at(static_cast<std::size_t>(i)); }
  torch::nn::Conv2d patch_head() const { return patch_head_; }
  torch::nn::Linear age_head() const { return age_head_; }

  /// Output of conv layer `i` followed by its activation.
  torch::Tensor conv_block(int i, const torch::Tensor& x);

 private:
  DiscriminatorConfig config_;
  std::vector<torch::nn::Conv2d> convs_;
  torch::nn::Conv2d patch_head_{nullptr};
  torch::nn::Linear age_head_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

/// Deterministic in `seed`: conv weights use Kaiming-normal scaling for the
/// leaky slope, biases 0; the age head uses N(0, 1/fan_in).
PatchDiscriminator init_discriminator(std::uint64_t seed, const DiscriminatorConfig& config);

DiscriminatorOutput discriminator_forward(PatchDiscriminator& discriminator,
                                          const torch::Tensor& images);

}  // namespace agecycle
