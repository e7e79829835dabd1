#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "agecycle/remote_estimator.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <openssl/evp.h>

#include "agecycle/errors.hpp"
#include "agecycle/image_io.hpp"

namespace agecycle {

namespace {

double number_field(const nlohmann::json& response, const char* field, const std::string& route) {
  if (!response.is_object() || !response.contains(field)) {
    throw BackendError("remote " + route + ": response lacks field '" + field + "'");
  }
  const auto& v = response.at(field);
  if (!v.is_number()) {
    throw BackendError("remote " + route + ": field '" + field + "' is not a number");
  }
  const double x = v.get<double>();
  if (!std::isfinite(x)) {
    throw BackendError("remote " + route + ": field '" + field + "' is not finite");
  }
  return x;
}

// Runs fn(i) for i in [0, n) on up to `limit` threads, rethrowing the first failure.
template <typename F>
void bounded_parallel_for(std::size_t n, int limit, F fn) {
  const auto workers = std::max<std::size_t>(1, std::min<std::size_t>(n, std::max(1, limit)));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto body = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      {
        std::lock_guard lock(failure_mutex);
        if (failure) return;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t w = 1; w < workers; ++w) threads.emplace_back(body);
  body();
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

std::string base64_encode(const std::string& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string image_to_base64_png(const torch::Tensor& image) {
  const auto png = encode_png(image_to_mat(image));
  return base64_encode(std::string(png.begin(), png.end()));
}

RemoteEstimator::RemoteEstimator(RemoteEstimatorOptions options) : options_(std::move(options)) {
  const auto& url = options_.endpoint;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw InvalidInput("remote endpoint must include a scheme (http:// or https://): " + url);
  }
  const auto scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") {
    throw InvalidInput("unsupported endpoint scheme '" + scheme + "'");
  }
  const auto path_start = url.find('/', scheme_end + 3);
  origin_ = url.substr(0, path_start);
  prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  if (origin_.size() <= scheme_end + 3) {
    throw InvalidInput("remote endpoint has no host: " + url);
  }
  if (options_.max_attempts < 1) {
    throw InvalidInput("remote max_attempts must be >= 1");
  }
}

nlohmann::json RemoteEstimator::post(const std::string& route, const nlohmann::json& body) const {
  const std::string path = prefix_ + route;
  const std::string payload = body.dump();
  httplib::Headers headers;
  if (!options_.bearer_token.empty()) {
    headers.emplace("Authorization", "Bearer " + options_.bearer_token);
  }
  auto backoff = options_.initial_backoff;
  std::string last_error;
  for (int attempt = 1; attempt <= options_.max_attempts; ++attempt) {
    if (attempt > 1) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
    httplib::Client client(origin_);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(options_.timeout);
    const auto usecs =
        std::chrono::duration_cast<std::chrono::microseconds>(options_.timeout - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
    auto res = client.Post(path, headers, payload, "application/json");
    if (!res) {
      last_error = "network error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw BackendError("POST " + origin_ + path + " failed with HTTP " +
                         std::to_string(res->status) + ": " + res->body.substr(0, 200));
    }
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw BackendError("POST " + origin_ + path + ": response is not valid JSON: " + e.what());
    }
  }
  throw BackendError("POST " + origin_ + path + " failed after " +
                     std::to_string(options_.max_attempts) + " attempts: " + last_error);
}

double RemoteEstimator::estimate_age(const torch::Tensor& image) {
  const auto response = post("/estimate", {{"image", image_to_base64_png(image)}});
  return number_field(response, "age", "/estimate");
}

double RemoteEstimator::verify(const torch::Tensor& a, const torch::Tensor& b) {
  const auto response =
      post("/verify", {{"image_a", image_to_base64_png(a)}, {"image_b", image_to_base64_png(b)}});
  const double c = number_field(response, "confidence", "/verify");
  if (c < 0.0 || c > 100.0) {
    throw BackendError("remote /verify: field 'confidence' outside [0, 100]");
  }
  return c;
}

std::vector<double> RemoteEstimator::estimate_ages(std::span<const torch::Tensor> images) {
  std::vector<double> out(images.size());
  bounded_parallel_for(images.size(), options_.max_concurrency, [&](std::size_t i) {
    try {
      out[i] = estimate_age(images[i]);
    } catch (const std::exception& e) {
      throw BackendError("remote: estimate_age failed for image " + std::to_string(i) + ": " +
                         e.what());
    }
  });
  return out;
}

std::vector<double> RemoteEstimator::verify_pairs(std::span<const torch::Tensor> a,
                                                  std::span<const torch::Tensor> b) {
  if (a.size() != b.size()) {
    throw InvalidInput("verify_pairs: lists differ in length");
  }
  std::vector<double> out(a.size());
  bounded_parallel_for(a.size(), options_.max_concurrency, [&](std::size_t i) {
    try {
      out[i] = verify(a[i], b[i]);
    } catch (const std::exception& e) {
      throw BackendError("remote: verify failed for pair " + std::to_string(i) + ": " + e.what());
    }
  });
  return out;
}

}  // namespace agecycle
