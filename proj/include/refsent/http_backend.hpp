#pragma once

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <optional>
#include <string>
#include <string_view>

#include "refsent/inference.hpp"

namespace refsent {

struct HttpBackendConfig {
  /// e.g. "http://127.0.0.1:8080/v1"; a bare host gets "/v1" appended.
  std::string base_url;
  std::string model;
  std::string api_key;
  std::chrono::seconds timeout{60};
};

inline constexpr const char* kBackendUrlEnv = "REFSENT_BACKEND_URL";
inline constexpr const char* kBackendTokenEnv = "REFSENT_BACKEND_TOKEN";

inline std::optional<std::string> env_value(const char* name) {
  const char* v = std::getenv(name);
  if (v == nullptr || *v == '\0') return std::nullopt;
  return std::string(v);
}

struct EndpointUrl {
  std::string scheme_host_port;
  std::string path;
};

/// Splits "http://host:port/prefix" into the origin and the completions path.
inline EndpointUrl completions_endpoint(std::string_view base_url) {
  base_url = trim(base_url);
  const auto scheme_end = base_url.find("://");
  if (scheme_end == std::string_view::npos)
    throw std::invalid_argument("backend URL needs a scheme: '" + std::string(base_url) + "'");
  if (to_lower_ascii(base_url.substr(0, scheme_end)) != "http")
    throw std::invalid_argument("only http:// endpoints are supported (built without TLS): '" +
                                std::string(base_url) + "'");
  const auto path_start = base_url.find('/', scheme_end + 3);
  EndpointUrl url;
  url.scheme_host_port = std::string(base_url.substr(0, path_start));
  std::string prefix =
      path_start == std::string_view::npos ? std::string() : std::string(base_url.substr(path_start));
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  if (prefix.empty()) prefix = "/v1";
  if (prefix.size() >= 12 && prefix.compare(prefix.size() - 12, 12, "/completions") == 0)
    url.path = prefix;
  else
    url.path = prefix + "/completions";
  return url;
}

/// Client for an OpenAI-compatible /completions endpoint. Each call opens its
/// own connection, so concurrent calls are safe.
class HttpCompletionBackend final : public CompletionBackend {
 public:
  explicit HttpCompletionBackend(HttpBackendConfig config)
      : config_(std::move(config)), endpoint_(completions_endpoint(config_.base_url)) {}

  CompletionResponse complete(const CompletionRequest& request) override {
    nlohmann::json body = {{"model", request.model.empty() ? config_.model : request.model},
                           {"prompt", request.prompt},
                           {"temperature", request.params.temperature},
                           {"max_tokens", request.params.max_tokens}};
    if (request.params.seed) body["seed"] = *request.params.seed;

    httplib::Client client(endpoint_.scheme_host_port);
    const auto timeout = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout).count();
    client.set_connection_timeout(timeout, 0);
    client.set_read_timeout(timeout, 0);
    client.set_write_timeout(timeout, 0);
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

    const auto started = std::chrono::steady_clock::now();
    auto res = client.Post(endpoint_.path, headers,
                           body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace),
                           "application/json");
    const auto latency = std::chrono::duration_cast<std::chrono::milliseconds>(
                             std::chrono::steady_clock::now() - started)
                             .count();
    if (!res)
      throw BackendError("transport error: " + httplib::to_string(res.error()), true);
    if (res->status < 200 || res->status >= 300) {
      const bool transient = res->status == 429 || res->status >= 500;
      throw BackendError("HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200),
                         transient);
    }
    try {
      const auto payload = nlohmann::json::parse(res->body);
      const auto& choices = payload.at("choices");
      if (!choices.is_array() || choices.empty()) throw std::runtime_error("no choices");
      return {choices.at(0).at("text").get<std::string>(), latency, res->body};
    } catch (const std::exception& e) {
      throw BackendError(std::string("malformed completion payload (") + e.what() +
                             "): " + res->body.substr(0, 200),
                         false);
    }
  }

  std::string model_id() const override { return config_.model; }

  const HttpBackendConfig& config() const noexcept { return config_; }

 private:
  HttpBackendConfig config_;
  EndpointUrl endpoint_;
};

}  // namespace refsent
