#include "agecycle/discriminator.hpp"

#include <algorithm>
#include <cmath>

#include <ATen/CPUGeneratorImpl.h>

#include "agecycle/errors.hpp"

namespace agecycle {

namespace nn = torch::nn;

int DiscriminatorConfig::width(int layer) const {
  return std::min(base_width << layer, max_width);
}

void DiscriminatorConfig::validate() const {
  if (n_groups < 2) {
    throw InvalidInput("discriminator: n_groups must be >= 2");
  }
  if (base_width < 1 || max_width < base_width) {
    throw InvalidInput("discriminator: invalid widths");
  }
  if (resolution < (1 << kConvLayers) || resolution % (1 << kConvLayers) != 0) {
    throw InvalidInput("discriminator: resolution must be a positive multiple of 64");
  }
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(const DiscriminatorConfig& config)
    : config_(config) {
  config_.validate();
  int in = 3;
  for (int i = 0; i < DiscriminatorConfig::kConvLayers; ++i) {
    const int out = config_.width(i);
    convs_.push_back(register_module(
        "conv" + std::to_string(i),
        nn::Conv2d(nn::Conv2dOptions(in, out, 4).stride(2).padding(1))));
    in = out;
  }
  patch_head_ = register_module("patch_head", nn::Conv2d(nn::Conv2dOptions(in, 1, 4)));
  const int side = config_.patch_size();
  age_head_ = register_module("age_head", nn::Linear(in * side * side, config_.n_groups));
}

torch::Tensor PatchDiscriminatorImpl::conv_block(int i, const torch::Tensor& x) {
  return torch::leaky_relu(convs_.at(static_cast<std::size_t>(i))->forward(x),
                           config_.leaky_slope);
}

DiscriminatorOutput PatchDiscriminatorImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != config_.resolution ||
      images.size(3) != config_.resolution) {
    throw InvalidInput("discriminator: expected [B, 3, " + std::to_string(config_.resolution) +
                       ", " + std::to_string(config_.resolution) + "] input");
  }
  auto x = images;
  for (int i = 0; i < DiscriminatorConfig::kConvLayers; ++i) {
    x = conv_block(i, x);
  }
  DiscriminatorOutput out;
  // Asymmetric zero padding keeps a 4x4 stride-1 kernel size-preserving.
  out.patch_scores = patch_head_->forward(torch::constant_pad_nd(x, {1, 2, 1, 2}, 0.0));
  out.age_vector = age_head_->forward(x.flatten(1));
  return out;
}

PatchDiscriminator init_discriminator(std::uint64_t seed, const DiscriminatorConfig& config) {
  PatchDiscriminator d(config);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard no_grad;
  const double gain = std::sqrt(2.0 / (1.0 + config.leaky_slope * config.leaky_slope));
  for (auto& module : d->modules(/*include_self=*/false)) {
    if (auto* c = module->as<nn::Conv2dImpl>()) {
      const double fan_in = static_cast<double>(c->weight[0].numel());
      c->weight.normal_(0.0, gain / std::sqrt(fan_in), gen);
      c->bias.zero_();
    } else if (auto* l = module->as<nn::LinearImpl>()) {
      const double fan_in = static_cast<double>(l->weight.size(1));
      l->weight.normal_(0.0, 1.0 / std::sqrt(fan_in), gen);
      l->bias.zero_();
    }
  }
  return d;
}

DiscriminatorOutput discriminator_forward(PatchDiscriminator& discriminator,
                                          const torch::Tensor& images) {
  return discriminator->forward(images);
}

}  // namespace agecycle
