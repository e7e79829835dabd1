#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "agecycle/evaluation.hpp"
#include "agecycle/remote_estimator.hpp"
#include "agecycle/trainer.hpp"

namespace agecycle {

std::string tool_version();

/// Age bins used for a group count: morph() for 4, utkface() for 9, decades otherwise.
GroupScheme scheme_for(int n_groups);

/// Provenance record written next to every run's outputs.
struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::filesystem::path checkpoint;
  std::filesystem::path dataset;
  std::string dataset_sha256;
  nlohmann::json metrics = nlohmann::json::object();
  /// Every file the run wrote, relative to the manifest's directory when possible.
  std::vector<std::filesystem::path> artifacts;

  nlohmann::json to_json() const;
  void write(const std::filesystem::path& path) const;
};

/// SHA-256 over the manifest bytes followed by every referenced image, in order.
std::string dataset_sha256(const std::filesystem::path& manifest_csv,
                           std::span<const FaceRecord> records);

struct SynthDataOptions {
  std::filesystem::path out_dir;
  int n_subjects = 500;
  int n_groups = 4;
  int resolution = 64;
  std::uint64_t seed = 7;
};

/// Returns the manifest path.
std::filesystem::path cmd_synth_data(const SynthDataOptions& options);

struct TrainOptions {
  TrainConfig config;
  std::filesystem::path data;  // manifest CSV
  std::filesystem::path out_dir;
  double train_fraction = 0.8;
  std::uint64_t split_seed = 7;
  bool resume = false;
  std::int64_t max_steps = 0;
};

/// Splits by subject, trains, and writes train.csv, test.csv, loss_log.jsonl,
/// checkpoints and run_manifest.json under out_dir. Returns the checkpoint path.
std::filesystem::path cmd_train(const TrainOptions& options);

enum class Direction { kProgress, kRegress };
Direction parse_direction(const std::string& text);

struct TranslateOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path input;  // an image or a directory of images
  Direction direction = Direction::kProgress;
  int source_group = 0;
  std::vector<int> targets;
  std::filesystem::path out_dir;
  bool export_attention = false;
};

/// Throws InvalidInput naming the first (source, target) pair that disagrees
/// with the direction or lies outside [0, n_groups).
void check_translation_targets(Direction direction, int source_group,
                               std::span<const int> targets, int n_groups);

/// Lays out panels left to right: the input with a red border, then one
/// output per target. With attention maps a second row holds them as
/// grayscale (mask * 255) under their outputs. Returns an 8-bit BGR image.
cv::Mat compose_grid(const torch::Tensor& input, std::span<const torch::Tensor> outputs,
                     std::span<const torch::Tensor> attention);

/// Returns the written grid paths, one per input image, in sorted input order.
std::vector<std::filesystem::path> cmd_translate(const TranslateOptions& options);

enum class BackendKind { kOracle, kRemote };

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path data;  // test manifest CSV
  std::filesystem::path out_dir;
  BackendKind backend = BackendKind::kOracle;
  RemoteEstimatorOptions remote;
  double identity_threshold = 50.0;
  /// Cached age oracle; trained and stored here when missing. Empty: out_dir/age_oracle.agc.
  std::filesystem::path oracle_path;
  AgeOracleConfig oracle;
};

/// Writes eval_report.json, eval_report.txt and eval_manifest.json only after
/// every metric has been computed, so a failing backend leaves no report.
EvalReport cmd_eval(const EvalOptions& options);

/// Loads or trains the age oracle for the given image geometry.
AgeClassifier obtain_age_oracle(const std::filesystem::path& path, AgeOracleConfig config);

}  // namespace agecycle
