#include "agecycle/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>

#include "agecycle/checkpoint.hpp"
#include "agecycle/errors.hpp"
#include "agecycle/losses.hpp"
#include "agecycle/synthetic_faces.hpp"

namespace agecycle {

namespace nn = torch::nn;

std::vector<double> EstimatorBackend::estimate_ages(std::span<const torch::Tensor> images) {
  std::vector<double> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    try {
      out.push_back(estimate_age(images[i]));
    } catch (const std::exception& e) {
      throw BackendError(name() + ": estimate_age failed for image " + std::to_string(i) + ": " +
                         e.what());
    }
  }
  return out;
}

std::vector<double> EstimatorBackend::verify_pairs(std::span<const torch::Tensor> a,
                                                   std::span<const torch::Tensor> b) {
  if (a.size() != b.size()) {
    throw InvalidInput("verify_pairs: lists differ in length");
  }
  std::vector<double> out;
  out.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    try {
      out.push_back(verify(a[i], b[i]));
    } catch (const std::exception& e) {
      throw BackendError(name() + ": verify failed for pair " + std::to_string(i) + ": " +
                         e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Age oracle

AgeClassifierImpl::AgeClassifierImpl(int resolution, int n_groups) {
  features_ = register_module(
      "features",
      nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, 16, 3).padding(1)),
                     nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                     nn::Conv2d(nn::Conv2dOptions(16, 32, 4).stride(2).padding(1)),
                     nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                     nn::Conv2d(nn::Conv2dOptions(32, 64, 4).stride(2).padding(1)),
                     nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                     nn::Conv2d(nn::Conv2dOptions(64, 64, 4).stride(2).padding(1)),
                     nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2))));
  const int side = resolution / 8;
  head_ = register_module("head", nn::Linear(64 * side * side, n_groups));
}

torch::Tensor AgeClassifierImpl::forward(const torch::Tensor& images) {
  return head_->forward(features_->forward(images).flatten(1));
}

namespace {

torch::Tensor quantize_8bit(const torch::Tensor& x) {
  return ((x + 1.0) * 127.5).round() / 127.5 - 1.0;
}

torch::Tensor render_batch(std::span<const std::uint64_t> seeds, std::span<const int> groups,
                           int n_groups, int resolution) {
  std::vector<torch::Tensor> images;
  images.reserve(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    images.push_back(render_procedural_face({seeds[i], groups[i], n_groups, resolution}));
  }
  return quantize_8bit(torch::stack(images));
}

std::uint64_t oracle_subject_seed(std::uint64_t oracle_seed, int index) {
  // Offset keeps the oracle's subject stream away from dataset seeds.
  return synthetic_subject_seed(oracle_seed ^ 0x5EED0F0AC1E5ULL, index);
}

}  // namespace

AgeClassifier train_age_oracle(const AgeOracleConfig& config) {
  if (config.n_groups < 2 || config.n_subjects < 1 || config.steps < 0 || config.batch_size < 1) {
    throw InvalidInput("invalid age oracle configuration");
  }
  torch::manual_seed(config.seed);
  AgeClassifier model(config.resolution, config.n_groups);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(config.seed);

  // Pre-render the training pool.
  std::vector<std::uint64_t> seeds;
  std::vector<int> groups;
  for (int s = 0; s < config.n_subjects; ++s) {
    for (int g = 0; g < config.n_groups; ++g) {
      seeds.push_back(oracle_subject_seed(config.seed, s));
      groups.push_back(g);
    }
  }
  const auto pool = render_batch(seeds, groups, config.n_groups, config.resolution);
  const auto labels = torch::tensor(std::vector<std::int64_t>(groups.begin(), groups.end()));

  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(config.learning_rate));
  model->train();
  for (int step = 0; step < config.steps; ++step) {
    const auto idx = torch::randint(pool.size(0), {config.batch_size}, gen, torch::kLong);
    auto x = pool.index_select(0, idx);
    if (config.noise_std > 0) {
      x = x + torch::randn(x.sizes(), gen) * config.noise_std;
    }
    const auto loss = torch::nn::functional::cross_entropy(model->forward(x),
                                                           labels.index_select(0, idx));
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  model->eval();
  for (auto& p : model->parameters()) {
    p.set_requires_grad(false);
  }
  return model;
}

void save_age_oracle(const std::filesystem::path& path, AgeClassifier& model,
                     const AgeOracleConfig& config) {
  nlohmann::json header = {{"kind", "age_oracle"},
                           {"resolution", config.resolution},
                           {"groups", config.n_groups},
                           {"n_subjects", config.n_subjects},
                           {"steps", config.steps},
                           {"batch_size", config.batch_size},
                           {"learning_rate", config.learning_rate},
                           {"noise_std", config.noise_std},
                           {"seed", config.seed}};
  std::vector<NamedTensor> blobs;
  for (const auto& item : model->named_parameters()) {
    blobs.emplace_back(item.key(), item.value());
  }
  write_archive(path, header, blobs);
}

std::pair<AgeClassifier, AgeOracleConfig> load_age_oracle(const std::filesystem::path& path) {
  const auto archive = read_archive(path);
  const auto& h = archive.header;
  if (h.value("kind", std::string()) != "age_oracle") {
    throw IoError("not an age oracle archive: " + path.string());
  }
  AgeOracleConfig config;
  config.resolution = h.at("resolution").get<int>();
  config.n_groups = h.at("groups").get<int>();
  config.n_subjects = h.at("n_subjects").get<int>();
  config.steps = h.at("steps").get<int>();
  config.batch_size = h.at("batch_size").get<int>();
  config.learning_rate = h.at("learning_rate").get<double>();
  config.noise_std = h.at("noise_std").get<double>();
  config.seed = h.at("seed").get<std::uint64_t>();
  AgeClassifier model(config.resolution, config.n_groups);
  std::map<std::string, torch::Tensor> blobs(archive.blobs.begin(), archive.blobs.end());
  torch::NoGradGuard no_grad;
  for (auto& item : model->named_parameters()) {
    const auto it = blobs.find(item.key());
    if (it == blobs.end() || it->second.sizes() != item.value().sizes()) {
      throw IoError("age oracle archive missing or misshaped '" + item.key() + "'");
    }
    item.value().copy_(it->second);
    item.value().set_requires_grad(false);
  }
  model->eval();
  return {model, config};
}

double age_oracle_accuracy(AgeClassifier& model, const AgeOracleConfig& config, int n_subjects,
                           std::uint64_t seed) {
  std::vector<std::uint64_t> seeds;
  std::vector<int> groups;
  for (int s = 0; s < n_subjects; ++s) {
    for (int g = 0; g < config.n_groups; ++g) {
      seeds.push_back(synthetic_subject_seed(seed, s));
      groups.push_back(g);
    }
  }
  torch::NoGradGuard no_grad;
  const auto pred =
      model->forward(render_batch(seeds, groups, config.n_groups, config.resolution)).argmax(1);
  const auto truth = torch::tensor(std::vector<std::int64_t>(groups.begin(), groups.end()));
  return (pred == truth).to(torch::kFloat64).mean().item<double>();
}

// ---------------------------------------------------------------------------
// Identity oracle

torch::Tensor IdentityOracle::embed(const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3 || image.size(1) % 8 != 0 ||
      image.size(2) % 8 != 0) {
    throw InvalidInput("identity oracle: expected [3, H, W] with H, W divisible by 8");
  }
  const auto block = image.size(1) / 8;
  return torch::avg_pool2d(image.detach().to(torch::kFloat64).unsqueeze(0), {block, block})
      .flatten();
}

IdentityOracle::IdentityOracle(std::vector<std::string> subject_ids,
                               const std::vector<torch::Tensor>& images) {
  if (subject_ids.size() != images.size() || images.empty()) {
    throw InvalidInput("identity oracle: gallery ids and images must be non-empty and aligned");
  }
  std::map<std::string, std::vector<torch::Tensor>> by_subject;
  for (std::size_t i = 0; i < images.size(); ++i) {
    by_subject[subject_ids[i]].push_back(embed(images[i]));
  }
  std::vector<torch::Tensor> protos;
  for (auto& [id, embeddings] : by_subject) {
    subjects_.push_back(id);
    protos.push_back(torch::stack(embeddings).mean(0));
  }
  prototypes_ = torch::stack(protos);
  if (subjects_.size() >= 2) {
    const auto d = torch::cdist(prototypes_, prototypes_);
    const auto nn_dist =
        (d + torch::eye(d.size(0), d.options()) * 1e30).amin(1);
    const double median = nn_dist.median().item<double>();
    radius_ = 0.5 * median;
  } else {
    radius_ = 1.0;
  }
  sigma_ = radius_ / 3.0;
}

torch::Tensor IdentityOracle::posterior(const torch::Tensor& image) const {
  const auto e = embed(image);
  const auto d2 = (prototypes_ - e).square().sum(1);
  // Unknown class sits at the rejection radius.
  const auto logits = torch::cat({-d2, torch::full({1}, -radius_ * radius_, d2.options())}) /
                      (2.0 * sigma_ * sigma_);
  const auto p = torch::softmax(logits, 0);
  return p.slice(0, 0, static_cast<std::int64_t>(subjects_.size()));
}

int IdentityOracle::recover(const torch::Tensor& image) const {
  const auto e = embed(image);
  const auto d2 = (prototypes_ - e).square().sum(1);
  const auto best = d2.argmin().item<std::int64_t>();
  if (std::sqrt(d2[best].item<double>()) > radius_) {
    return -1;
  }
  return static_cast<int>(best);
}

double IdentityOracle::verify(const torch::Tensor& a, const torch::Tensor& b) const {
  return std::clamp(100.0 * (posterior(a) * posterior(b)).sum().item<double>(), 0.0, 100.0);
}

// ---------------------------------------------------------------------------
// Oracle backend

OracleBackend::OracleBackend(AgeClassifier classifier, IdentityOracle identity, GroupScheme scheme)
    : classifier_(std::move(classifier)), identity_(std::move(identity)), scheme_(std::move(scheme)) {}

std::vector<int> OracleBackend::classify(const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  const auto pred = classifier_->forward(quantize_8bit(images.to(torch::kFloat32).clamp(-1, 1)))
                        .argmax(1)
                        .contiguous();
  return {pred.data_ptr<std::int64_t>(), pred.data_ptr<std::int64_t>() + pred.numel()};
}

double OracleBackend::estimate_age(const torch::Tensor& image) {
  return scheme_.midpoint_age(classify(image.unsqueeze(0)).front());
}

std::vector<double> OracleBackend::estimate_ages(std::span<const torch::Tensor> images) {
  std::vector<double> out;
  out.reserve(images.size());
  constexpr std::size_t kChunk = 128;
  for (std::size_t i = 0; i < images.size(); i += kChunk) {
    const auto n = std::min(kChunk, images.size() - i);
    std::vector<torch::Tensor> chunk(images.begin() + static_cast<std::ptrdiff_t>(i),
                                     images.begin() + static_cast<std::ptrdiff_t>(i + n));
    for (int g : classify(torch::stack(chunk))) {
      out.push_back(scheme_.midpoint_age(g));
    }
  }
  return out;
}

double OracleBackend::verify(const torch::Tensor& a, const torch::Tensor& b) {
  return identity_.verify(a, b);
}

// ---------------------------------------------------------------------------
// Metrics

GroupErrorResult group_classification_error(
    std::span<const std::pair<torch::Tensor, int>> generated, EstimatorBackend& estimator,
    const GroupScheme& scheme) {
  if (generated.empty()) {
    throw InvalidInput("group_classification_error: empty list");
  }
  std::vector<torch::Tensor> images;
  images.reserve(generated.size());
  for (const auto& [img, _] : generated) {
    images.push_back(img);
  }
  const auto ages = estimator.estimate_ages(images);
  std::vector<double> errors;
  std::map<int, std::pair<std::size_t, double>> per_group;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    const double age = ages[i];
    if (!std::isfinite(age)) {
      throw BackendError(estimator.name() + ": non-finite age for image " + std::to_string(i));
    }
    const int estimated = assign_age_group(std::max(0, static_cast<int>(std::lround(age))), scheme);
    const double err = std::abs(estimated - generated[i].second);
    errors.push_back(err);
    auto& slot = per_group[generated[i].second];
    slot.first += 1;
    slot.second += err;
  }
  GroupErrorResult result;
  double sum = 0.0;
  for (double e : errors) sum += e;
  result.mean = sum / static_cast<double>(errors.size());
  double var = 0.0;
  for (double e : errors) var += (e - result.mean) * (e - result.mean);
  result.stddev = std::sqrt(var / static_cast<double>(errors.size()));
  for (const auto& [g, slot] : per_group) {
    result.per_group.push_back({g, slot.first, slot.second / static_cast<double>(slot.first)});
  }
  return result;
}

IdentityResult identity_preservation(std::span<const torch::Tensor> inputs,
                                     std::span<const torch::Tensor> outputs,
                                     EstimatorBackend& estimator, double threshold) {
  if (inputs.size() != outputs.size()) {
    throw InvalidInput("identity_preservation: input and output lists differ in length");
  }
  if (inputs.empty()) {
    throw InvalidInput("identity_preservation: empty lists");
  }
  const auto scores = estimator.verify_pairs(inputs, outputs);
  IdentityResult r;
  std::size_t accepted = 0;
  for (double s : scores) {
    if (!std::isfinite(s) || s < 0.0 || s > 100.0) {
      throw BackendError(estimator.name() + ": verification score outside [0, 100]");
    }
    accepted += s >= threshold ? 1 : 0;
    r.mean_score += s;
  }
  r.mean_score /= static_cast<double>(scores.size());
  r.rate = static_cast<double>(accepted) / static_cast<double>(scores.size());
  return r;
}

double chance_group_error(std::span<const int> targets, int n_groups) {
  if (targets.empty() || n_groups < 1) {
    throw InvalidInput("chance_group_error: empty targets");
  }
  double total = 0.0;
  for (int t : targets) {
    for (int u = 0; u < n_groups; ++u) {
      total += std::abs(u - t);
    }
  }
  return total / (static_cast<double>(targets.size()) * n_groups);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& g : per_group) {
    per.push_back({{"target_group", g.target_group}, {"count", g.count}, {"mean_error", g.mean_error}});
  }
  nlohmann::json diag = nlohmann::json::object();
  for (const auto& [k, v] : diagnostics) {
    diag[k] = v;
  }
  return {{"backend", backend},
          {"samples", samples},
          {"units", "age groups (not comparable to year-based errors)"},
          {"mean_group_error", mean_group_error},
          {"group_error_std", group_error_std},
          {"identity_rate", identity_rate},
          {"identity_mean_score", identity_mean_score},
          {"identity_threshold", identity_threshold},
          {"per_group", per},
          {"diagnostics", diag}};
}

std::string EvalReport::to_table(const std::string& row_label) const {
  std::ostringstream out;
  out << std::fixed;
  const int label_width = std::max<int>(12, static_cast<int>(row_label.size()) + 2);
  out << std::left << std::setw(label_width) << "" << "| " << std::setw(24)
      << "Age Est. Error (groups)" << "| " << "Veri. Rate (%)\n";
  out << std::string(static_cast<std::size_t>(label_width), '-') << "+-" << std::string(24, '-')
      << "+-" << std::string(20, '-') << '\n';
  std::ostringstream err;
  err << std::fixed << std::setprecision(2) << mean_group_error << " +/- " << group_error_std;
  std::ostringstream ver;
  ver << std::fixed << std::setprecision(2) << identity_rate * 100.0 << " ("
      << identity_mean_score << ")";
  out << std::setw(label_width) << row_label << "| " << std::setw(24) << err.str() << "| "
      << ver.str() << '\n';
  out << "\nPer target group:\n";
  for (const auto& g : per_group) {
    out << "  group " << g.target_group << ": " << std::setprecision(3) << g.mean_error << " (n="
        << g.count << ")\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Translation over a test split

std::vector<Translation> translate_to_all_groups(AttentionGenerator& progressor,
                                                 AttentionGenerator& regressor,
                                                 const FaceDataset& test, int batch_size) {
  torch::NoGradGuard no_grad;
  struct Job {
    std::size_t source;
    int target;
  };
  std::vector<Job> older;
  std::vector<Job> younger;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const int s = test.records()[i].group;
    for (int t = 0; t < test.n_groups(); ++t) {
      if (t > s) older.push_back({i, t});
      if (t < s) younger.push_back({i, t});
    }
  }
  std::vector<Translation> out;
  auto run = [&](AttentionGenerator& g, const std::vector<Job>& jobs) {
    for (std::size_t b = 0; b < jobs.size(); b += static_cast<std::size_t>(batch_size)) {
      const auto n = std::min(jobs.size() - b, static_cast<std::size_t>(batch_size));
      std::vector<torch::Tensor> images;
      std::vector<int> targets;
      for (std::size_t k = 0; k < n; ++k) {
        images.push_back(test.image(jobs[b + k].source));
        targets.push_back(jobs[b + k].target);
      }
      const auto result = g->forward(torch::stack(images), one_hot_rows(targets, test.n_groups()));
      for (std::size_t k = 0; k < n; ++k) {
        Translation t;
        t.source = jobs[b + k].source;
        t.source_group = test.records()[t.source].group;
        t.target_group = jobs[b + k].target;
        t.output = result.fused[static_cast<std::int64_t>(k)].clone();
        t.attention = result.attention[static_cast<std::int64_t>(k)].clone();
        out.push_back(std::move(t));
      }
    }
  };
  run(progressor, older);
  run(regressor, younger);
  return out;
}

double cycle_reconstruction_l1(AttentionGenerator& progressor, AttentionGenerator& regressor,
                               const FaceDataset& test, int batch_size) {
  torch::NoGradGuard no_grad;
  double total = 0.0;
  std::size_t count = 0;
  for (bool forward : {true, false}) {
    std::vector<std::size_t> sources;
    std::vector<int> source_groups;
    std::vector<int> targets;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const int s = test.records()[i].group;
      for (int t = 0; t < test.n_groups(); ++t) {
        if (forward ? t > s : t < s) {
          sources.push_back(i);
          source_groups.push_back(s);
          targets.push_back(t);
        }
      }
    }
    auto& first = forward ? progressor : regressor;
    auto& second = forward ? regressor : progressor;
    for (std::size_t b = 0; b < sources.size(); b += static_cast<std::size_t>(batch_size)) {
      const auto n = std::min(sources.size() - b, static_cast<std::size_t>(batch_size));
      std::vector<torch::Tensor> images;
      for (std::size_t k = 0; k < n; ++k) images.push_back(test.image(sources[b + k]));
      const auto x = torch::stack(images);
      const std::span<const int> tgt(targets.data() + b, n);
      const std::span<const int> src(source_groups.data() + b, n);
      const auto there = first->forward(x, one_hot_rows(tgt, test.n_groups())).fused;
      const auto back = second->forward(there, one_hot_rows(src, test.n_groups())).fused;
      total += reconstruction_loss(back, x).item<double>() * static_cast<double>(n);
      count += n;
    }
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

EvalReport evaluate_translations(const FaceDataset& test, std::span<const Translation> translations,
                                 EstimatorBackend& estimator, const GroupScheme& scheme,
                                 double identity_threshold) {
  std::vector<std::pair<torch::Tensor, int>> generated;
  std::vector<torch::Tensor> inputs;
  std::vector<torch::Tensor> outputs;
  double attention = 0.0;
  for (const auto& t : translations) {
    generated.emplace_back(t.output, t.target_group);
    inputs.push_back(test.image(t.source));
    outputs.push_back(t.output);
    attention += t.attention.mean().item<double>();
  }
  const auto err = group_classification_error(generated, estimator, scheme);
  const auto id = identity_preservation(inputs, outputs, estimator, identity_threshold);
  EvalReport r;
  r.backend = estimator.name();
  r.samples = translations.size();
  r.mean_group_error = err.mean;
  r.group_error_std = err.stddev;
  r.per_group = err.per_group;
  r.identity_rate = id.rate;
  r.identity_mean_score = id.mean_score;
  r.identity_threshold = identity_threshold;
  r.diagnostics.emplace_back("mean_attention", attention / static_cast<double>(translations.size()));
  return r;
}

}  // namespace agecycle
