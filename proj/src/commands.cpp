#include "agecycle/commands.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <opencv2/imgproc.hpp>
#include <openssl/evp.h>

#include "agecycle/checkpoint.hpp"
#include "agecycle/errors.hpp"
#include "agecycle/image_io.hpp"
#include "agecycle/log.hpp"
#include "agecycle/synthetic_faces.hpp"

#ifndef AGECYCLE_VERSION
#define AGECYCLE_VERSION "0.0.0"
#endif

namespace agecycle {

namespace fs = std::filesystem;

namespace {

std::string relative_to(const fs::path& p, const fs::path& base) {
  std::error_code ec;
  const auto rel = fs::relative(p, base, ec);
  if (ec || rel.empty() || rel.native().rfind("..", 0) == 0) {
    return p.string();
  }
  return rel.string();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) {
    throw IoError("cannot write " + path.string());
  }
  f << text;
  if (!f) {
    throw IoError("short write: " + path.string());
  }
}

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

std::vector<fs::path> list_inputs(const fs::path& input) {
  if (!fs::exists(input)) {
    throw IoError("input not found: " + input.string());
  }
  if (!fs::is_directory(input)) {
    return {input};
  }
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(input)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) {
    throw InvalidInput("no images in " + input.string());
  }
  return out;
}

cv::Mat gray_panel(const torch::Tensor& mask) {
  cv::Mat bgr;
  cv::cvtColor(mask_to_mat(mask), bgr, cv::COLOR_GRAY2BGR);
  return bgr;
}

}  // namespace

std::string tool_version() { return AGECYCLE_VERSION; }

GroupScheme scheme_for(int n_groups) {
  if (n_groups == 4) return GroupScheme::morph();
  if (n_groups == 9) return GroupScheme::utkface();
  return GroupScheme::decades(n_groups);
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json artifact_list = nlohmann::json::array();
  for (const auto& a : artifacts) {
    artifact_list.push_back(a.string());
  }
  return {{"tool", "agecycle"},
          {"version", tool_version()},
          {"command", command},
          {"config", config},
          {"checkpoint", checkpoint.string()},
          {"dataset", {{"manifest", dataset.string()}, {"sha256", dataset_sha256}}},
          {"metrics", metrics},
          {"artifacts", artifact_list}};
}

void RunManifest::write(const fs::path& path) const { write_text(path, to_json().dump(2) + "\n"); }

std::string dataset_sha256(const fs::path& manifest_csv, std::span<const FaceRecord> records) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw NumericError("SHA-256 initialization failed");
  }
  auto feed = [&](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
      throw IoError("cannot read " + p.string());
    }
    std::vector<char> buf(1 << 16);
    while (in) {
      in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
  };
  feed(manifest_csv);
  for (const auto& r : records) {
    feed(r.image_path);
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    static constexpr char kHex[] = "0123456789abcdef";
    hex << kHex[digest[i] >> 4] << kHex[digest[i] & 0xF];
  }
  return hex.str();
}

// ---------------------------------------------------------------------------

fs::path cmd_synth_data(const SynthDataOptions& options) {
  if (options.n_groups < 2) {
    throw InvalidInput("synth-data: groups must be >= 2 (training needs at least two age groups)");
  }
  const auto records = write_synthetic_dataset(options.out_dir, options.n_subjects,
                                               options.n_groups, options.resolution, options.seed);
  const auto manifest = options.out_dir / "manifest.csv";
  log::info("wrote " + std::to_string(records.size()) + " images and " + manifest.string());
  return manifest;
}

fs::path cmd_train(const TrainOptions& options) {
  options.config.validate();
  const auto scheme = scheme_for(options.config.n_groups);
  const auto records = load_manifest(options.data, scheme);
  const auto split = split_by_subject(records, options.train_fraction, options.split_seed);
  if (split.train.empty()) {
    throw DatasetDegenerate("train split is empty");
  }
  fs::create_directories(options.out_dir);
  const auto train_csv = options.out_dir / "train.csv";
  const auto test_csv = options.out_dir / "test.csv";
  write_manifest(train_csv, split.train);
  write_manifest(test_csv, split.test);

  FaceDataset train(split.train, options.config.resolution, options.config.n_groups);
  const auto log_path = options.out_dir / "loss_log.jsonl";
  std::ofstream loss_log(log_path, options.resume ? std::ios::app : std::ios::trunc);
  if (!loss_log) {
    throw IoError("cannot write " + log_path.string());
  }
  FitOptions fo;
  fo.out_dir = options.out_dir;
  fo.resume = options.resume;
  fo.max_steps = options.max_steps;
  fo.log = &loss_log;
  const auto result = fit(options.config, train, fo);

  RunManifest m;
  m.command = "train";
  m.config = options.config.to_json();
  m.config["train_fraction"] = options.train_fraction;
  m.config["split_seed"] = options.split_seed;
  m.checkpoint = relative_to(result.checkpoint, options.out_dir);
  m.dataset = options.data;
  m.dataset_sha256 = dataset_sha256(options.data, records);
  m.metrics = loss_report_json(result.last_report, result.steps);
  for (const auto& p : {train_csv, test_csv, log_path, latest_checkpoint_path(options.out_dir),
                        final_checkpoint_path(options.out_dir)}) {
    if (fs::exists(p)) {
      m.artifacts.push_back(relative_to(p, options.out_dir));
    }
  }
  m.write(options.out_dir / "run_manifest.json");
  return result.checkpoint;
}

// ---------------------------------------------------------------------------

Direction parse_direction(const std::string& text) {
  if (text == "progress") return Direction::kProgress;
  if (text == "regress") return Direction::kRegress;
  throw InvalidInput("direction must be 'progress' or 'regress', got '" + text + "'");
}

void check_translation_targets(Direction direction, int source_group, std::span<const int> targets,
                               int n_groups) {
  if (source_group < 0 || source_group >= n_groups) {
    throw InvalidInput("source group " + std::to_string(source_group) + " outside [0, " +
                       std::to_string(n_groups) + ")");
  }
  if (targets.empty()) {
    throw InvalidInput("no target groups given");
  }
  for (int t : targets) {
    const std::string pair = "(source " + std::to_string(source_group) + ", target " +
                             std::to_string(t) + ")";
    if (t < 0 || t >= n_groups) {
      throw InvalidInput("target outside [0, " + std::to_string(n_groups) + "): " + pair);
    }
    if (direction == Direction::kProgress && t <= source_group) {
      throw InvalidInput("progress requires target > source: " + pair);
    }
    if (direction == Direction::kRegress && t >= source_group) {
      throw InvalidInput("regress requires target < source: " + pair);
    }
  }
}

cv::Mat compose_grid(const torch::Tensor& input, std::span<const torch::Tensor> outputs,
                     std::span<const torch::Tensor> attention) {
  if (!attention.empty() && attention.size() != outputs.size()) {
    throw InvalidInput("compose_grid: one attention map per output expected");
  }
  const int h = static_cast<int>(input.size(1));
  const int w = static_cast<int>(input.size(2));
  const int cols = 1 + static_cast<int>(outputs.size());
  const int rows = attention.empty() ? 1 : 2;
  cv::Mat grid(rows * h, cols * w, CV_8UC3, cv::Scalar(255, 255, 255));
  cv::Mat first = image_to_mat(input);
  const int border = std::max(1, std::min(h, w) / 32);
  cv::rectangle(first, cv::Rect(0, 0, w, h), cv::Scalar(0, 0, 255), border);
  first.copyTo(grid(cv::Rect(0, 0, w, h)));
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const int x = static_cast<int>(i + 1) * w;
    image_to_mat(outputs[i]).copyTo(grid(cv::Rect(x, 0, w, h)));
    if (!attention.empty()) {
      gray_panel(attention[i]).copyTo(grid(cv::Rect(x, h, w, h)));
    }
  }
  return grid;
}

std::vector<fs::path> cmd_translate(const TranslateOptions& options) {
  auto state = load_checkpoint(options.checkpoint);
  const int n_groups = state.config.n_groups;
  check_translation_targets(options.direction, options.source_group, options.targets, n_groups);
  auto& generator =
      options.direction == Direction::kProgress ? state.g_progress : state.g_regress;
  generator->eval();
  fs::create_directories(options.out_dir);

  std::vector<fs::path> written;
  torch::NoGradGuard no_grad;
  for (const auto& path : list_inputs(options.input)) {
    const auto image = load_image(path, state.config.resolution);
    const auto n = static_cast<std::int64_t>(options.targets.size());
    const auto batch = image.unsqueeze(0).expand({n, -1, -1, -1}).contiguous();
    const auto result = generator->forward(batch, one_hot_rows(options.targets, n_groups));

    // Pixels the mask retains completely must come through untouched.
    if (state.config.use_attention) {
      const auto keep = (result.attention == 1.0).unsqueeze(1).expand_as(batch);
      if (keep.any().item<bool>()) {
        const auto diff = (result.fused - batch).abs().masked_select(keep).max().item<double>();
        if (diff > 1e-5) {
          throw NumericError("translation changed a pixel whose attention is 1 (|diff| = " +
                             std::to_string(diff) + ")");
        }
      }
    }

    std::vector<torch::Tensor> outputs;
    std::vector<torch::Tensor> masks;
    for (std::int64_t i = 0; i < n; ++i) {
      outputs.push_back(result.fused[i]);
      if (options.export_attention) {
        masks.push_back(result.attention[i]);
      }
    }
    const auto stem = path.stem().string();
    const auto grid_path = options.out_dir / (stem + "_grid.png");
    write_png(grid_path, compose_grid(image, outputs, masks));
    written.push_back(grid_path);
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      const auto tag = "_g" + std::to_string(options.targets[i]);
      write_png(options.out_dir / (stem + tag + ".png"), image_to_mat(outputs[i]));
      if (options.export_attention) {
        write_png(options.out_dir / (stem + "_attention" + tag + ".png"), mask_to_mat(masks[i]));
      }
    }
  }
  return written;
}

// ---------------------------------------------------------------------------

AgeClassifier obtain_age_oracle(const fs::path& path, AgeOracleConfig config) {
  if (!path.empty() && fs::exists(path)) {
    auto [model, stored] = load_age_oracle(path);
    if (stored.resolution == config.resolution && stored.n_groups == config.n_groups) {
      return model;
    }
    log::warn("cached age oracle at " + path.string() + " has a different geometry; retraining");
  }
  log::info("training age oracle (" + std::to_string(config.steps) + " steps)");
  auto model = train_age_oracle(config);
  if (!path.empty()) {
    if (path.has_parent_path()) {
      fs::create_directories(path.parent_path());
    }
    save_age_oracle(path, model, config);
  }
  return model;
}

EvalReport cmd_eval(const EvalOptions& options) {
  auto state = load_checkpoint(options.checkpoint);
  state.g_progress->eval();
  state.g_regress->eval();
  const int n_groups = state.config.n_groups;
  const auto scheme = scheme_for(n_groups);
  const auto records = load_manifest(options.data, scheme);
  if (records.empty()) {
    throw DatasetDegenerate("evaluation manifest is empty: " + options.data.string());
  }
  FaceDataset test(records, state.config.resolution, n_groups);

  std::unique_ptr<EstimatorBackend> backend;
  fs::path oracle_path;
  if (options.backend == BackendKind::kOracle) {
    AgeOracleConfig oc = options.oracle;
    oc.resolution = state.config.resolution;
    oc.n_groups = n_groups;
    oracle_path = options.oracle_path.empty() ? options.out_dir / "age_oracle.agc"
                                              : options.oracle_path;
    auto classifier = obtain_age_oracle(oracle_path, oc);
    std::vector<std::string> ids;
    std::vector<torch::Tensor> gallery;
    for (std::size_t i = 0; i < test.size(); ++i) {
      ids.push_back(test.records()[i].subject_id);
      gallery.push_back(test.image(i));
    }
    backend = std::make_unique<OracleBackend>(classifier, IdentityOracle(ids, gallery), scheme);
  } else {
    backend = std::make_unique<RemoteEstimator>(options.remote);
  }

  const auto translations = translate_to_all_groups(state.g_progress, state.g_regress, test);
  if (translations.empty()) {
    throw DatasetDegenerate("no translatable test images (need at least two groups)");
  }
  auto report = evaluate_translations(test, translations, *backend, scheme,
                                      options.identity_threshold);
  std::vector<int> targets;
  for (const auto& t : translations) {
    targets.push_back(t.target_group);
  }
  report.diagnostics.emplace_back("chance_group_error", chance_group_error(targets, n_groups));
  report.diagnostics.emplace_back(
      "cycle_reconstruction_l1", cycle_reconstruction_l1(state.g_progress, state.g_regress, test));

  // Nothing is written until every metric is in hand.
  fs::create_directories(options.out_dir);
  const auto json_path = options.out_dir / "eval_report.json";
  const auto table_path = options.out_dir / "eval_report.txt";
  write_text(json_path, report.to_json().dump(2) + "\n");
  write_text(table_path, report.to_table(state.config.use_attention ? "model" : "model (no att.)"));

  RunManifest m;
  m.command = "eval";
  m.config = state.config.to_json();
  m.config["backend"] = backend->name();
  m.config["identity_threshold"] = options.identity_threshold;
  if (options.backend == BackendKind::kRemote) {
    m.config["endpoint"] = options.remote.endpoint;
  }
  m.checkpoint = options.checkpoint;
  m.dataset = options.data;
  m.dataset_sha256 = dataset_sha256(options.data, records);
  m.metrics = report.to_json();
  m.artifacts = {relative_to(json_path, options.out_dir), relative_to(table_path, options.out_dir)};
  if (!oracle_path.empty()) {
    m.artifacts.push_back(relative_to(oracle_path, options.out_dir));
  }
  m.write(options.out_dir / "eval_manifest.json");
  return report;
}

}  // namespace agecycle
