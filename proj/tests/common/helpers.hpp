#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include <torch/torch.h>

#include "agecycle/data_pipeline.hpp"
#include "agecycle/trainer.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("agecycle_test_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Narrow 64x64 networks that run in milliseconds.
inline agecycle::TrainConfig tiny_config(int n_groups = 2) {
  agecycle::TrainConfig c;
  c.resolution = 64;
  c.n_groups = n_groups;
  c.batch_size = 2;
  c.g_base_width = 2;
  c.g_res_blocks = 1;
  c.d_base_width = 2;
  c.d_max_width = 4;
  c.seed = 3;
  return c;
}

/// Random batch with ordered groups drawn from `n_groups`.
inline agecycle::OrderedPairBatch random_batch(int batch, int n_groups, int resolution,
                                               std::uint64_t seed,
                                               torch::Dtype dtype = torch::kFloat32) {
  torch::manual_seed(seed);
  std::mt19937_64 rng(seed);
  agecycle::OrderedPairBatch b;
  for (int i = 0; i < batch; ++i) {
    const int y = static_cast<int>(rng() % static_cast<std::uint64_t>(n_groups - 1));
    const int o = y + 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(n_groups - 1 - y));
    b.young_groups.push_back(y);
    b.old_groups.push_back(o);
  }
  b.young_images = torch::rand({batch, 3, resolution, resolution}) * 2 - 1;
  b.old_images = torch::rand({batch, 3, resolution, resolution}) * 2 - 1;
  b.young_conditions = agecycle::one_hot_rows(b.young_groups, n_groups);
  b.old_conditions = agecycle::one_hot_rows(b.old_groups, n_groups);
  return b.to(dtype);
}

inline std::vector<torch::Tensor> snapshot(const std::vector<agecycle::NamedTensor>& params) {
  std::vector<torch::Tensor> out;
  for (const auto& [_, p] : params) {
    out.push_back(p.detach().clone());
  }
  return out;
}

inline bool same_bits(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!torch::equal(a[i], b[i])) return false;
  }
  return true;
}

}  // namespace testing
