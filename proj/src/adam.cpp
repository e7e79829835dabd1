#include "agecycle/adam.hpp"

#include <cmath>
#include <map>

#include "agecycle/errors.hpp"

namespace agecycle {

Adam::Adam(std::vector<NamedTensor> params, Options options)
    : params_(std::move(params)), options_(options) {
  for (const auto& [_, p] : params_) {
    first_.push_back(torch::zeros_like(p));
    second_.push_back(torch::zeros_like(p));
  }
}

void Adam::zero_grad() {
  for (auto& [_, p] : params_) {
    if (p.grad().defined()) {
      p.mutable_grad().zero_();
    }
  }
}

void Adam::step() {
  torch::NoGradGuard no_grad;
  ++steps_;
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double step_size = options_.learning_rate / correction1;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].second;
    if (!p.grad().defined()) {
      continue;
    }
    const auto& g = p.grad();
    first_[i].mul_(b1).add_(g, 1.0 - b1);
    second_[i].mul_(b2).addcmul_(g, g, 1.0 - b2);
    const auto denom = (second_[i] / correction2).sqrt_().add_(options_.eps);
    p.addcdiv_(first_[i], denom, -step_size);
  }
}

std::vector<NamedTensor> Adam::state() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.emplace_back(params_[i].first + "/m", first_[i]);
    out.emplace_back(params_[i].first + "/v", second_[i]);
  }
  return out;
}

void Adam::load_state(const std::vector<NamedTensor>& state, std::int64_t steps) {
  std::map<std::string, torch::Tensor> by_name(state.begin(), state.end());
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto m = by_name.find(params_[i].first + "/m");
    const auto v = by_name.find(params_[i].first + "/v");
    if (m == by_name.end() || v == by_name.end()) {
      throw InvalidInput("optimizer state missing entry for " + params_[i].first);
    }
    first_[i].copy_(m->second);
    second_[i].copy_(v->second);
  }
  steps_ = steps;
}

}  // namespace agecycle
