#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace agecycle {

using NamedTensor = std::pair<std::string, torch::Tensor>;

/// Adam with bias correction over an explicit, named parameter list. The
/// moments are plain tensors so checkpoints can store them by name.
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  Adam(std::vector<NamedTensor> params, Options options);

  void zero_grad();
  /// Parameters without a gradient are skipped.
  void step();

  std::int64_t steps() const { return steps_; }
  const Options& options() const { return options_; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }

  /// "<name>/m", "<name>/v" for every parameter.
  std::vector<NamedTensor> state() const;
  void load_state(const std::vector<NamedTensor>& state, std::int64_t steps);

 private:
  std::vector<NamedTensor> params_;
  std::vector<torch::Tensor> first_;
  std::vector<torch::Tensor> second_;
  Options options_;
  std::int64_t steps_ = 0;
};

}  // namespace agecycle
