#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace agecycle {

struct GeneratorConfig {
  int resolution = 256;
  int n_groups = 4;
  int base_width = 32;
  int n_downsample = 2;
  int n_res_blocks = 4;
  /// Off is the no-attention ablation: the image branch is the output.
  bool use_attention = true;

  void validate() const;
};

/// Fusion operands and result. Batched: rgb/fused [B, 3, H, W], attention [B, H, W].
struct GeneratorOutput {
  torch::Tensor rgb;
  torch::Tensor attention;
  torch::Tensor fused;
};

/// Tiles each condition entry into an H x W plane and appends the planes to
/// the image channels. Accepts [3, H, W] with [N], or [B, 3, H, W] with [B, N];
/// every condition row must be one-hot.
torch::Tensor inject_condition(const torch::Tensor& images, const torch::Tensor& conditions);

/// fused = attention * input + (1 - attention) * rgb, attention broadcast over channels.
torch::Tensor fuse_with_attention(const torch::Tensor& input, const torch::Tensor& rgb,
                                  const torch::Tensor& attention);

class ResidualBlockImpl : public torch::nn::Module {
 public:
  explicit ResidualBlockImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_;
};
TORCH_MODULE(ResidualBlock);

/// Conditional generator: shared encoder and residual trunk, then an image
/// decoder ending in tanh and a single-channel attention decoder ending in
/// sigmoid.
class AttentionGeneratorImpl : public torch::nn::Module {
 public:
  explicit AttentionGeneratorImpl(const GeneratorConfig& config);

  GeneratorOutput forward(const torch::Tensor& images, const torch::Tensor& conditions);

  const GeneratorConfig& config() const { return config_; }

  /// Final conv of the attention branch (pre-sigmoid); null when attention is off.
  torch::nn::Conv2d attention_head() const { return attention_head_; }
  torch::nn::Conv2d image_head() const { return image_head_; }

 private:
  GeneratorConfig config_;
  torch::nn::Sequential encoder_{nullptr};
  torch::nn::Sequential trunk_{nullptr};
  torch::nn::Sequential image_decoder_{nullptr};
  torch::nn::Conv2d image_head_{nullptr};
  torch::nn::Sequential attention_decoder_{nullptr};
  torch::nn::Conv2d attention_head_{nullptr};
};
TORCH_MODULE(AttentionGenerator);

/// Deterministic in `seed`: conv weights ~ N(0, 0.02), biases 0, instance-norm
/// affine scale 1. The attention head bias starts at 0 so the initial mask
/// sits near 0.5.
AttentionGenerator init_generator(std::uint64_t seed, const GeneratorConfig& config);

GeneratorOutput generator_forward(AttentionGenerator& generator, const torch::Tensor& images,
                                  const torch::Tensor& conditions);

}  // namespace agecycle
