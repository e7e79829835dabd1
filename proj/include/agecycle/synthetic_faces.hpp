#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "agecycle/data_pipeline.hpp"

namespace agecycle {

/// Identity (face shape, skin tone, eye spacing, hair, background) comes from
/// `subject_seed`; `group` only drives the aging operator.
struct ProceduralFaceSpec {
  std::uint64_t subject_seed = 0;
  int group = 0;
  int n_groups = 4;
  int resolution = 64;
};

/// Peak amplitude of the wrinkle bands: 0.15 * group / (n_groups - 1).
double wrinkle_amplitude(int group, int n_groups);

/// Deterministic render, [3, R, R] in [-1, 1]. The aging operator adds
/// horizontal sinusoidal bands (period R / 16 rows) on the forehead and below
/// the mouth with amplitude wrinkle_amplitude(group), and darkens two
/// laugh-line arcs by 0.6 times that amplitude.
torch::Tensor render_procedural_face(const ProceduralFaceSpec& spec);

/// [R, R] bool mask of every pixel the aging operator may touch.
torch::Tensor aging_operator_support(int resolution);

/// Mean squared amplitude of the wrinkle-frequency component, measured per
/// column of the forehead and mouth bands on channel-mean luminance. For a
/// render this equals wrinkle_amplitude(group)^2 up to 8-bit quantization.
double wrinkle_energy(const torch::Tensor& image);

/// Age in years assigned to a synthetic subject at `group`, consistent with
/// GroupScheme::decades(n_groups).
int synthetic_age(std::uint64_t subject_seed, int group);

/// Seed of the i-th subject of a dataset drawn with `dataset_seed`.
std::uint64_t synthetic_subject_seed(std::uint64_t dataset_seed, int index);

std::string synthetic_subject_id(std::uint64_t subject_seed);

/// Renders n_subjects x n_groups faces as PNGs under out_dir/images and writes
/// out_dir/manifest.csv. Returns the records in manifest order.
std::vector<FaceRecord> write_synthetic_dataset(const std::filesystem::path& out_dir,
                                                int n_subjects, int n_groups, int resolution,
                                                std::uint64_t seed);

}  // namespace agecycle
