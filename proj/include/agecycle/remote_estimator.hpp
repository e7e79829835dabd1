#pragma once

#include <chrono>
#include <string>

#include <json.hpp>

#include "agecycle/evaluation.hpp"

namespace agecycle {

struct RemoteEstimatorOptions {
  /// Base URL, e.g. "http://localhost:8080" or "https://host/api".
  std::string endpoint;
  /// Sent as "Authorization: Bearer <token>" when non-empty.
  std::string bearer_token;
  std::chrono::milliseconds timeout{10000};
  int max_attempts = 3;
  /// Delay before the second attempt; doubles on each further retry.
  std::chrono::milliseconds initial_backoff{200};
  /// Upper bound on in-flight requests for the batched calls.
  int max_concurrency = 4;
  /// Whether the service promises identical answers for identical inputs.
  bool deterministic = false;
};

/// Client for a JSON age/verification service:
///   POST <endpoint>/estimate {"image": base64 PNG} -> {"age": number}
///   POST <endpoint>/verify {"image_a": ..., "image_b": ...} -> {"confidence": number in [0, 100]}
/// Network failures and 5xx responses are retried with exponential backoff;
/// other failures raise BackendError immediately. Values are never substituted.
class RemoteEstimator : public EstimatorBackend {
 public:
  explicit RemoteEstimator(RemoteEstimatorOptions options);

  std::string name() const override { return "remote"; }
  double estimate_age(const torch::Tensor& image) override;
  double verify(const torch::Tensor& a, const torch::Tensor& b) override;
  bool deterministic() const override { return options_.deterministic; }

  std::vector<double> estimate_ages(std::span<const torch::Tensor> images) override;
  std::vector<double> verify_pairs(std::span<const torch::Tensor> a,
                                   std::span<const torch::Tensor> b) override;

  const RemoteEstimatorOptions& options() const { return options_; }

 private:
  nlohmann::json post(const std::string& route, const nlohmann::json& body) const;

  RemoteEstimatorOptions options_;
  std::string origin_;  // scheme://host[:port]
  std::string prefix_;  // path below the origin, no trailing slash
};

std::string base64_encode(const std::string& bytes);
/// PNG-encodes a [3, H, W] image in [-1, 1] and base64-encodes the result.
std::string image_to_base64_png(const torch::Tensor& image);

}  // namespace agecycle
