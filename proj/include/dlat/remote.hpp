#pragma once

#include <chrono>
#include <cstdlib>
#include <httplib.h>
#include <mutex>
#include <nlohmann/json.hpp>
#include <string>
#include <thread>

#include "dlat/datamodel.hpp"
#include "dlat/metrics.hpp"

// HTTP adapter for an external face-verification endpoint. Protocol:
// POST <path> with JSON {"image_a": {"side": S, "pixels": [...]},
// "image_b": {...}}; response JSON {"similarity": <percent>}.
// The credential is read from an environment variable and sent as a
// bearer token.

namespace dlat {

struct RemoteOracleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RemoteVerifierConfig {
  std::string host = "localhost";
  int port = 80;
  std::string path = "/verify";
  std::string api_key_env = "DLAT_API_KEY";  // env var holding the credential
  int timeout_seconds = 10;
  int max_retries = 3;          // on 429 and 5xx
  int backoff_ms = 100;         // doubled per retry
  int min_interval_ms = 0;      // rate limit between requests
};

class RemoteVerifier {
 public:
  RemoteVerifierConfig config;

  explicit RemoteVerifier(RemoteVerifierConfig cfg) : config(std::move(cfg)) {}

  double verify(const FaceImage& a, const FaceImage& b, const std::string& pair_id) const {
    rate_limit();
    nlohmann::json req;
    req["image_a"] = encode(a);
    req["image_b"] = encode(b);
    httplib::Client cli(config.host, config.port);
    cli.set_read_timeout(config.timeout_seconds, 0);
    cli.set_connection_timeout(config.timeout_seconds, 0);
    httplib::Headers headers;
    if (const char* key = std::getenv(config.api_key_env.c_str()))
      headers.emplace("Authorization", std::string("Bearer ") + key);

    int backoff = config.backoff_ms;
    for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
      auto res = cli.Post(config.path, headers, req.dump(), "application/json");
      if (!res)
        throw RemoteOracleError("verifier unreachable for pair " + pair_id + " (" +
                                httplib::to_string(res.error()) + ")");
      if (res->status == 429 || res->status >= 500) {
        if (attempt == config.max_retries)
          throw RemoteOracleError("verifier returned HTTP " + std::to_string(res->status) +
                                  " for pair " + pair_id + " after " +
                                  std::to_string(config.max_retries) + " retries");
        std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
        backoff *= 2;
        continue;
      }
      if (res->status == 401 || res->status == 403)
        throw RemoteOracleError("verifier auth failure (HTTP " + std::to_string(res->status) +
                                ") for pair " + pair_id);
      if (res->status != 200)
        throw RemoteOracleError("verifier HTTP " + std::to_string(res->status) + " for pair " +
                                pair_id);
      return parse(res->body, pair_id);
    }
    throw RemoteOracleError("verifier retry loop exhausted for pair " + pair_id);
  }

  // Adapter matching the FaceVerifier signature used by the metrics module.
  FaceVerifier as_verifier() const {
    auto self = *this;
    return [self](const FaceImage& a, const FaceImage& b) {
      return self.verify(a, b, "(unlabeled)");
    };
  }

 private:
  static nlohmann::json encode(const FaceImage& img) {
    img.check();
    nlohmann::json j;
    j["side"] = img.side();
    j["pixels"] = img.pixels.data;
    return j;
  }

  static double parse(const std::string& body, const std::string& pair_id) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const std::exception& e) {
      throw RemoteOracleError("verifier returned malformed JSON for pair " + pair_id + ": " +
                              e.what());
    }
    if (!j.contains("similarity") || !j["similarity"].is_number())
      throw RemoteOracleError("verifier response missing numeric 'similarity' for pair " +
                              pair_id);
    const double s = j["similarity"].get<double>();
    if (!(s >= 0.0 && s <= 100.0))
      throw RemoteOracleError("verifier similarity " + std::to_string(s) +
                              " outside [0,100] for pair " + pair_id);
    return s;
  }

  void rate_limit() const {
    if (config.min_interval_ms <= 0) return;
    static std::mutex mu;
    static std::chrono::steady_clock::time_point last{};
    std::lock_guard<std::mutex> lock(mu);
    const auto now = std::chrono::steady_clock::now();
    const auto gap = std::chrono::milliseconds(config.min_interval_ms);
    if (last.time_since_epoch().count() != 0 && now - last < gap)
      std::this_thread::sleep_for(gap - (now - last));
    last = std::chrono::steady_clock::now();
  }
};

}  // namespace dlat
