#pragma once

// HTTP judge transport. Kept out of interpreter.hpp so the core headers do
// not pull in cpp-httplib.

#include <chrono>
#include <string>

#include "httplib.h"
#include "safer/interpreter.hpp"

namespace safer {

/// POSTs the prompt as text/plain with bearer auth and returns the body.
/// 5xx, 429 and connection failures are retried; 401/403 are not.
class RemoteJudge final : public Judge {
 public:
  explicit RemoteJudge(JudgeClientConfig config) : config_(std::move(config)) {
    config_.validate();
    split_url(config_.url, base_, path_);
  }

  std::string query(const std::string& prompt) override {
    return retry_with_backoff(config_.retry, [&] { return attempt(prompt); });
  }

  std::string label() const override { return "remote:" + config_.url; }

 private:
  static void split_url(const std::string& url, std::string& base, std::string& path) {
    const auto scheme = url.find("://");
    const auto host_start = scheme == std::string::npos ? 0 : scheme + 3;
    const auto slash = url.find('/', host_start);
    base = slash == std::string::npos ? url : url.substr(0, slash);
    path = slash == std::string::npos ? "/" : url.substr(slash);
  }

  std::string attempt(const std::string& prompt) const {
    httplib::Client client(base_);
    const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
    const auto secs = static_cast<time_t>(config_.timeout_seconds);
    const auto usecs = static_cast<time_t>((timeout.count() - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
    auto res = client.Post(path_, headers, prompt, "text/plain");
    if (!res) throw TransientJudgeFailure("request failed: " + httplib::to_string(res.error()));
    if (res->status == 401 || res->status == 403)
      throw AuthError("judge rejected credentials (HTTP " + std::to_string(res->status) + ")");
    if (res->status == 429 || res->status >= 500)
      throw TransientJudgeFailure("HTTP " + std::to_string(res->status));
    if (res->status < 200 || res->status >= 300)
      throw TransportError("judge returned HTTP " + std::to_string(res->status));
    return res->body;
  }

  JudgeClientConfig config_;
  std::string base_;
  std::string path_;
};

}  // namespace safer
