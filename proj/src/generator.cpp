#include "agecycle/generator.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include "agecycle/errors.hpp"

namespace agecycle {

namespace nn = torch::nn;

void GeneratorConfig::validate() const {
  if (n_groups < 2) {
    throw InvalidInput("generator: n_groups must be >= 2");
  }
  if (base_width < 1 || n_res_blocks < 0 || n_downsample < 0) {
    throw InvalidInput("generator: widths and depths must be positive");
  }
  if (resolution < 1 || resolution % (1 << n_downsample) != 0) {
    throw InvalidInput("generator: resolution must be divisible by 2^n_downsample");
  }
}

namespace {

void check_one_hot_rows(const torch::Tensor& c) {
  const bool binary = ((c == 0) | (c == 1)).all().item<bool>();
  const bool single = (c.sum(1) == 1).all().item<bool>();
  if (!binary || !single) {
    throw InvalidInput("condition is not one-hot");
  }
}

nn::Conv2d conv(int in, int out, int kernel, int stride, int padding) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding));
}

nn::InstanceNorm2d inorm(int channels) {
  return nn::InstanceNorm2d(nn::InstanceNorm2dOptions(channels).affine(true));
}

nn::Sequential make_decoder(int in_width, int n_up) {
  nn::Sequential seq;
  int width = in_width;
  for (int i = 0; i < n_up; ++i) {
    seq->push_back(nn::Upsample(
        nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
    seq->push_back(conv(width, width / 2, 3, 1, 1));
    seq->push_back(inorm(width / 2));
    seq->push_back(nn::ReLU());
    width /= 2;
  }
  return seq;
}

}  // namespace

torch::Tensor inject_condition(const torch::Tensor& images, const torch::Tensor& conditions) {
  if (images.dim() == 3 && conditions.dim() == 1) {
    return inject_condition(images.unsqueeze(0), conditions.unsqueeze(0)).squeeze(0);
  }
  if (images.dim() != 4 || conditions.dim() != 2 || images.size(0) != conditions.size(0)) {
    throw InvalidInput("inject_condition: expected [B,C,H,W] images with [B,N] conditions");
  }
  check_one_hot_rows(conditions);
  const auto h = images.size(2);
  const auto w = images.size(3);
  auto planes = conditions.to(images.dtype())
                    .view({conditions.size(0), conditions.size(1), 1, 1})
                    .expand({conditions.size(0), conditions.size(1), h, w});
  return torch::cat({images, planes}, 1);
}

torch::Tensor fuse_with_attention(const torch::Tensor& input, const torch::Tensor& rgb,
                                  const torch::Tensor& attention) {
  const auto a = attention.unsqueeze(-3);
  return a * input + (1 - a) * rgb;
}

ResidualBlockImpl::ResidualBlockImpl(int channels) {
  body_ = register_module("body", nn::Sequential(conv(channels, channels, 3, 1, 1), inorm(channels),
                                                 nn::ReLU(), conv(channels, channels, 3, 1, 1),
                                                 inorm(channels)));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) { return x + body_->forward(x); }

AttentionGeneratorImpl::AttentionGeneratorImpl(const GeneratorConfig& config) : config_(config) {
  config_.validate();
  const int w0 = config_.base_width;
  nn::Sequential encoder(conv(3 + config_.n_groups, w0, 7, 1, 3), inorm(w0), nn::ReLU());
  int width = w0;
  for (int i = 0; i < config_.n_downsample; ++i) {
    encoder->push_back(conv(width, width * 2, 4, 2, 1));
    encoder->push_back(inorm(width * 2));
    encoder->push_back(nn::ReLU());
    width *= 2;
  }
  encoder_ = register_module("encoder", encoder);

  nn::Sequential trunk;
  for (int i = 0; i < config_.n_res_blocks; ++i) {
    trunk->push_back(ResidualBlock(width));
  }
  trunk_ = register_module("trunk", trunk);

  image_decoder_ = register_module("image_decoder", make_decoder(width, config_.n_downsample));
  image_head_ = register_module("image_head", conv(w0, 3, 7, 1, 3));
  if (config_.use_attention) {
    attention_decoder_ =
        register_module("attention_decoder", make_decoder(width, config_.n_downsample));
    attention_head_ = register_module("attention_head", conv(w0, 1, 7, 1, 3));
  }
}

GeneratorOutput AttentionGeneratorImpl::forward(const torch::Tensor& images,
                                                const torch::Tensor& conditions) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != config_.resolution ||
      images.size(3) != config_.resolution) {
    throw InvalidInput("generator: expected [B, 3, " + std::to_string(config_.resolution) + ", " +
                       std::to_string(config_.resolution) + "] input");
  }
  if (conditions.dim() != 2 || conditions.size(1) != config_.n_groups) {
    throw InvalidInput("generator: expected [B, " + std::to_string(config_.n_groups) +
                       "] conditions");
  }
  const auto features = trunk_->forward(encoder_->forward(inject_condition(images, conditions)));
  GeneratorOutput out;
  out.rgb = torch::tanh(image_head_->forward(image_decoder_->forward(features)));
  if (config_.use_attention) {
    out.attention =
        torch::sigmoid(attention_head_->forward(attention_decoder_->forward(features))).squeeze(1);
    out.fused = fuse_with_attention(images, out.rgb, out.attention);
  } else {
    out.attention = torch::zeros({images.size(0), images.size(2), images.size(3)}, images.options());
    out.fused = out.rgb;
  }
  return out;
}

AttentionGenerator init_generator(std::uint64_t seed, const GeneratorConfig& config) {
  AttentionGenerator g(config);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard no_grad;
  for (auto& module : g->modules(/*include_self=*/false)) {
    if (auto* c = module->as<nn::Conv2dImpl>()) {
      c->weight.normal_(0.0, 0.02, gen);
      if (c->bias.defined()) {
        c->bias.zero_();
      }
    } else if (auto* n = module->as<nn::InstanceNorm2dImpl>()) {
      n->weight.fill_(1.0);
      n->bias.zero_();
    }
  }
  return g;
}

GeneratorOutput generator_forward(AttentionGenerator& generator, const torch::Tensor& images,
                                  const torch::Tensor& conditions) {
  return generator->forward(images, conditions);
}

}  // namespace agecycle
