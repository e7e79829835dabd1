#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace agecycle {

/// Contiguous age bins covering [0, inf). Each entry of `upper_bounds` is the
/// inclusive upper age of one bin; the final bin is open-ended, so a scheme
/// with k bounds has k + 1 groups.
class GroupScheme {
 public:
  explicit GroupScheme(std::vector<int> upper_bounds);

  /// 30-, 31-40, 41-50, 51+
  static GroupScheme morph();
  /// 0-3, 4-11, 12-17, 18-29, 30-40, 41-55, 56-65, 66-80, 81+
  static GroupScheme utkface();
  /// Ten-year bins starting at 30 (identical to morph() for n_groups == 4).
  static GroupScheme decades(int n_groups);

  int n_groups() const { return static_cast<int>(upper_bounds_.size()) + 1; }
  const std::vector<int>& upper_bounds() const { return upper_bounds_; }

  int lower_age(int group) const;
  /// Midpoint of a bin; the open last bin uses the width of its predecessor.
  double midpoint_age(int group) const;

 private:
  std::vector<int> upper_bounds_;
};

int assign_age_group(int age_years, const GroupScheme& scheme);

/// One-hot age-group indicator.
class ConditionVector {
 public:
  /// Throws InvalidInput unless exactly one entry is 1 and the rest are 0.
  explicit ConditionVector(std::vector<float> values);

  int group() const { return group_; }
  int size() const { return static_cast<int>(values_.size()); }
  const std::vector<float>& values() const { return values_; }
  torch::Tensor to_tensor() const;

 private:
  std::vector<float> values_;
  int group_ = 0;
};

ConditionVector one_hot(int group, int n_groups);

/// [B, N] float tensor of one-hot rows.
torch::Tensor one_hot_rows(std::span<const int> groups, int n_groups);

struct FaceRecord {
  std::string subject_id;
  std::filesystem::path image_path;
  int age_years = 0;
  int group = 0;
};

/// Reads a `subject_id,path,age_years` CSV; paths resolve against the
/// manifest's directory.
std::vector<FaceRecord> load_manifest(const std::filesystem::path& csv_path,
                                      const GroupScheme& scheme);

void write_manifest(const std::filesystem::path& csv_path,
                    std::span<const FaceRecord> records);

/// Ingests a directory of `AGE_*.ext` files (UTKFace naming). No subject ids
/// exist there, so each file becomes its own subject and a warning is logged.
std::vector<FaceRecord> scan_age_prefixed_directory(const std::filesystem::path& dir,
                                                    const GroupScheme& scheme);

struct Split {
  std::vector<FaceRecord> train;
  std::vector<FaceRecord> test;
};

/// Subject-disjoint split. round(train_fraction * n_subjects) subjects go to
/// the training side; the subject permutation is a function of `seed` only.
Split split_by_subject(std::span<const FaceRecord> records, double train_fraction,
                       std::uint64_t seed);

/// Index-level pair draw shared by batch sampling and its tests.
struct PairDraw {
  std::size_t young_index = 0;
  std::size_t old_index = 0;
};

/// Draws `batch_size` record pairs. With `ordered` set, a group pair (a, b)
/// with a < b is chosen uniformly among pairs present in `records`; without
/// it, any ordered pair of distinct groups is eligible. Records are then drawn
/// uniformly (with replacement) inside each group.
std::vector<PairDraw> sample_pair_indices(std::span<const FaceRecord> records,
                                          int batch_size, std::uint64_t rng_seed,
                                          bool ordered = true);

/// Images are stored channel-first, [B, 3, H, W], values in [-1, 1].
struct OrderedPairBatch {
  torch::Tensor young_images;
  torch::Tensor old_images;
  torch::Tensor young_conditions;  // [B, N]
  torch::Tensor old_conditions;    // [B, N]
  std::vector<int> young_groups;
  std::vector<int> old_groups;

  int size() const { return static_cast<int>(young_groups.size()); }
  OrderedPairBatch to(torch::Dtype dtype) const;
};

/// [3, H, W] in [-1, 1]; 8-bit values map through x / 127.5 - 1 after a
/// bilinear resize to resolution x resolution.
torch::Tensor load_image(const std::filesystem::path& path, int resolution);

/// Records plus their decoded images, kept in memory for batch assembly.
class FaceDataset {
 public:
  FaceDataset(std::vector<FaceRecord> records, int resolution, int n_groups);

  const std::vector<FaceRecord>& records() const { return records_; }
  int resolution() const { return resolution_; }
  int n_groups() const { return n_groups_; }
  std::size_t size() const { return records_.size(); }
  const torch::Tensor& image(std::size_t i) const { return images_[i]; }

  OrderedPairBatch sample_batch(int batch_size, std::uint64_t rng_seed,
                                bool ordered = true) const;
  OrderedPairBatch assemble(std::span<const PairDraw> draws) const;

 private:
  std::vector<FaceRecord> records_;
  std::vector<torch::Tensor> images_;
  int resolution_;
  int n_groups_;
};

/// Batches per epoch: ceil(train_size / batch_size).
std::int64_t steps_per_epoch(std::size_t train_size, int batch_size);

}  // namespace agecycle
