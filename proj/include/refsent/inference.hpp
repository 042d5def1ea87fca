#pragma once

#include <fmt/format.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <variant>
#include <vector>

#include "refsent/corpus.hpp"
#include "refsent/promptgen.hpp"
#include "refsent/rating.hpp"

namespace refsent {

// ---------------------------------------------------------------------------
// Requests and backends

/// Sampling settings. The default is the one-token, temperature 1.0 protocol;
/// greedy() is for reproducible runs against backends that honour a seed.
struct DecodingParams {
  double temperature = 1.0;
  int max_tokens = 1;
  std::optional<std::int64_t> seed;

  static DecodingParams greedy(std::optional<std::int64_t> seed = std::nullopt) {
    return {0.0, 1, seed};
  }

  std::string cache_key() const {
    return fmt::format("temperature={:.3f};max_tokens={};seed={}", temperature, max_tokens,
                       seed ? std::to_string(*seed) : std::string("none"));
  }

  friend bool operator==(const DecodingParams&, const DecodingParams&) = default;
};

/// Sample-side facts a mock backend may consult. Never sent over the wire.
struct RequestContext {
  std::string review_id;
  double business_average = 0.0;
};

struct CompletionRequest {
  std::string model;
  std::string prompt;
  DecodingParams params;
  std::optional<RequestContext> context;
};

struct CompletionResponse {
  std::string text;
  std::int64_t latency_ms = 0;
  std::string raw_payload;
};

class BackendError : public std::runtime_error {
 public:
  BackendError(const std::string& what, bool transient, int attempts = 1)
      : std::runtime_error(what), transient_(transient), attempts_(attempts) {}

  bool transient() const noexcept { return transient_; }
  int attempts() const noexcept { return attempts_; }

 private:
  bool transient_;
  int attempts_;
};

/// A text-completion endpoint. Implementations must tolerate concurrent
/// complete() calls. Transport-level hiccups are reported as transient
/// BackendErrors so complete() below can retry them.
class CompletionBackend {
 public:
  virtual ~CompletionBackend() = default;
  virtual CompletionResponse complete(const CompletionRequest& request) = 0;
  virtual std::string model_id() const = 0;
};

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds base_delay{250};
  double multiplier = 2.0;
  std::function<void(std::string_view)> log = [](std::string_view msg) {
    std::clog << "[refsent] " << msg << '\n';
  };
};

/// Calls the backend, retrying transient failures with exponential backoff.
inline CompletionResponse complete(const CompletionRequest& request, CompletionBackend& backend,
                                   const RetryPolicy& retry = {}) {
  const int max_attempts = std::max(1, retry.max_attempts);
  auto delay = retry.base_delay;
  for (int attempt = 1;; ++attempt) {
    try {
      return backend.complete(request);
    } catch (const BackendError& e) {
      if (!e.transient()) throw BackendError(e.what(), false, attempt);
      if (attempt >= max_attempts) {
        auto msg = fmt::format("backend failed after {} attempts: {}", attempt, e.what());
        if (retry.log) retry.log(msg);
        throw BackendError(msg, true, attempt);
      }
      if (retry.log)
        retry.log(fmt::format("attempt {}/{} failed ({}); retrying in {} ms", attempt, max_attempts,
                              e.what(), delay.count()));
      if (delay.count() > 0) std::this_thread::sleep_for(delay);
      delay = std::chrono::milliseconds(
          static_cast<std::int64_t>(std::llround(static_cast<double>(delay.count()) * retry.multiplier)));
    }
  }
}

// ---------------------------------------------------------------------------
// Output parsing

/// Accepts exactly one character in '1'..'5' after trimming whitespace.
inline std::optional<int> parse_rating(std::string_view raw) {
  const auto t = trim(raw);
  if (t.size() != 1 || t[0] < '1' || t[0] > '5') return std::nullopt;
  return t[0] - '0';
}

inline constexpr int kImputedRating = 3;

struct Prediction {
  std::string review_id;
  PromptVariant variant;
  std::optional<int> rating;
  bool parse_failed = false;
  bool imputed = false;
  std::string raw_text;
  int attempts = 0;
  std::int64_t latency_ms = 0;
  std::string error;  // set when the backend itself failed for this sample

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

// ---------------------------------------------------------------------------
// Prediction cache

struct CacheKey {
  std::string review_id;
  std::string variant;
  std::string model;
  std::string template_version;
  std::string params;

  std::string joined() const {
    return review_id + '\x1f' + variant + '\x1f' + model + '\x1f' + template_version + '\x1f' + params;
  }
};

inline nlohmann::ordered_json to_json(const Prediction& p, const CacheKey& key) {
  nlohmann::ordered_json j;
  j["review_id"] = p.review_id;
  j["variant"] = p.variant.name();
  j["model"] = key.model;
  j["template_version"] = key.template_version;
  j["params"] = key.params;
  j["rating"] = p.rating ? nlohmann::ordered_json(*p.rating) : nlohmann::ordered_json(nullptr);
  j["parse_failed"] = p.parse_failed;
  j["imputed"] = p.imputed;
  j["raw_text"] = p.raw_text;
  j["attempts"] = p.attempts;
  j["latency_ms"] = p.latency_ms;
  return j;
}

/// Append-only JSON-lines store of predictions keyed by (review_id, variant,
/// model, template version, decoding params). Appends are serialized.
class PredictionCache {
 public:
  explicit PredictionCache(std::filesystem::path path) : path_(std::move(path)) { load(); }

  PredictionCache(const PredictionCache&) = delete;
  PredictionCache& operator=(const PredictionCache&) = delete;

  std::optional<Prediction> find(const CacheKey& key) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key.joined());
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void append(const CacheKey& key, const Prediction& p) {
    std::lock_guard lock(mu_);
    if (!out_.is_open()) {
      if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
      out_.open(path_, std::ios::binary | std::ios::app);
      if (!out_) throw std::runtime_error("cannot append to prediction cache " + path_.string());
    }
    out_ << to_json(p, key).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
    out_.flush();
    entries_[key.joined()] = p;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  void load() {
    std::ifstream in(path_, std::ios::binary);
    if (!in) return;
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        CacheKey key{j.at("review_id").get<std::string>(), j.at("variant").get<std::string>(),
                     j.at("model").get<std::string>(), j.at("template_version").get<std::string>(),
                     j.at("params").get<std::string>()};
        Prediction p;
        p.review_id = key.review_id;
        p.variant = PromptVariant::parse(key.variant);
        if (!j.at("rating").is_null()) p.rating = j.at("rating").get<int>();
        p.parse_failed = j.at("parse_failed").get<bool>();
        p.imputed = j.at("imputed").get<bool>();
        p.raw_text = j.at("raw_text").get<std::string>();
        p.attempts = j.at("attempts").get<int>();
        p.latency_ms = j.at("latency_ms").get<std::int64_t>();
        entries_[key.joined()] = std::move(p);
      } catch (const std::exception&) {
        // A torn final line from an interrupted run; the sample is simply recomputed.
      }
    }
  }

  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::ofstream out_;
  std::unordered_map<std::string, Prediction> entries_;
};

// ---------------------------------------------------------------------------
// Batch prediction

struct BatchOptions {
  std::size_t concurrency = 4;
  RetryPolicy retry;
  PredictionCache* cache = nullptr;
  std::string template_version = std::string(kTemplateVersion);
};

namespace detail {

inline Prediction predict_one(const ReviewSample& sample, const PromptVariant& variant,
                              CompletionBackend& backend, const DecodingParams& params,
                              const RetryPolicy& retry) {
  Prediction p;
  p.review_id = sample.review_id;
  p.variant = variant;
  CompletionRequest request{backend.model_id(), build_prompt(sample, variant), params,
                            RequestContext{sample.review_id, sample.business_average}};
  try {
    // One extra generation when the first is unusable, then impute.
    for (int generation = 0; generation < 2; ++generation) {
      const auto started = std::chrono::steady_clock::now();
      auto response = complete(request, backend, retry);
      ++p.attempts;
      p.latency_ms += std::max<std::int64_t>(
          response.latency_ms, std::chrono::duration_cast<std::chrono::milliseconds>(
                                   std::chrono::steady_clock::now() - started)
                                   .count());
      p.raw_text = response.text;
      if (auto rating = parse_rating(response.text)) {
        p.rating = *rating;
        p.parse_failed = false;
        return p;
      }
      p.parse_failed = true;
    }
  } catch (const std::exception& e) {
    p.error = e.what();
    p.parse_failed = true;
  }
  p.rating = kImputedRating;
  p.imputed = true;
  return p;
}

}  // namespace detail

/// Predicts every sample with at most `options.concurrency` requests in
/// flight. Output order matches input order. Cached predictions are reused;
/// fresh ones are appended to the cache as they complete, except samples
/// whose backend call failed, which stay uncached so a rerun retries them.
inline std::vector<Prediction> predict_batch(std::span<const ReviewSample> samples,
                                             const PromptVariant& variant,
                                             CompletionBackend& backend,
                                             const DecodingParams& params,
                                             const BatchOptions& options = {}) {
  if (options.concurrency < 1) throw std::invalid_argument("concurrency must be at least 1");
  if (!variant.valid()) throw std::invalid_argument("invalid prompt variant " + variant.name());

  const std::string model = backend.model_id();
  const std::string params_key = params.cache_key();
  auto key_for = [&](const ReviewSample& s) {
    return CacheKey{s.review_id, variant.name(), model, options.template_version, params_key};
  };

  std::vector<Prediction> results(samples.size());
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (options.cache) {
      if (auto hit = options.cache->find(key_for(samples[i]))) {
        results[i] = std::move(*hit);
        continue;
      }
    }
    pending.push_back(i);
  }

  std::atomic<std::size_t> next{0};
  std::mutex failure_mu;
  std::exception_ptr failure;
  auto worker = [&] {
    try {
      for (std::size_t k = next.fetch_add(1); k < pending.size(); k = next.fetch_add(1)) {
        const std::size_t i = pending[k];
        results[i] = detail::predict_one(samples[i], variant, backend, params, options.retry);
        if (options.cache && results[i].error.empty())
          options.cache->append(key_for(samples[i]), results[i]);
      }
    } catch (...) {
      // Cache I/O failure: stop handing out work and surface it after the join.
      next.store(pending.size());
      std::lock_guard lock(failure_mu);
      if (!failure) failure = std::current_exception();
    }
  };

  const std::size_t workers = std::min(options.concurrency, pending.size());
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

// ---------------------------------------------------------------------------
// Deterministic mock backends

struct FixedToken {
  std::string token;
};
struct RoundBusinessAverage {};
struct Scripted {
  std::map<std::string, std::string> token_by_review_id;
};

using MockPolicy = std::variant<FixedToken, RoundBusinessAverage, Scripted>;

class MockBackend final : public CompletionBackend {
 public:
  explicit MockBackend(MockPolicy policy) : policy_(std::move(policy)) {}

  CompletionResponse complete(const CompletionRequest& request) override {
    calls_.fetch_add(1);
    return {std::visit([&](const auto& p) { return respond(p, request); }, policy_), 0, {}};
  }

  std::string model_id() const override {
    return std::visit(
        [](const auto& p) -> std::string {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, FixedToken>)
            return "mock/fixed:" + p.token;
          else if constexpr (std::is_same_v<P, RoundBusinessAverage>)
            return "mock/round_business_average";
          else
            return "mock/scripted";
        },
        policy_);
  }

  std::size_t call_count() const noexcept { return calls_.load(); }

 private:
  static std::string respond(const FixedToken& p, const CompletionRequest&) { return p.token; }

  static std::string respond(const RoundBusinessAverage&, const CompletionRequest& request) {
    if (!request.context)
      throw BackendError("round_business_average mock needs a sample context", false);
    return std::to_string(round_half_up_stars(request.context->business_average));
  }

  static std::string respond(const Scripted& p, const CompletionRequest& request) {
    if (!request.context) throw BackendError("scripted mock needs a sample context", false);
    auto it = p.token_by_review_id.find(request.context->review_id);
    if (it == p.token_by_review_id.end())
      throw BackendError("scripted mock has no token for review " + request.context->review_id,
                         false);
    return it->second;
  }

  MockPolicy policy_;
  std::atomic<std::size_t> calls_{0};
};

inline std::unique_ptr<MockBackend> mock_backend(MockPolicy policy) {
  return std::make_unique<MockBackend>(std::move(policy));
}

/// "fixed:<token>", "round_business_average" or "scripted:<path to JSON
/// object mapping review_id to token>".
inline MockPolicy parse_mock_policy(std::string_view spec) {
  spec = trim(spec);
  if (spec == "round_business_average") return RoundBusinessAverage{};
  if (spec.rfind("fixed:", 0) == 0) return FixedToken{std::string(spec.substr(6))};
  if (spec.rfind("scripted:", 0) == 0) {
    const std::filesystem::path path(std::string(spec.substr(9)));
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open scripted mock file " + path.string());
    return Scripted{nlohmann::json::parse(in).get<std::map<std::string, std::string>>()};
  }
  throw std::invalid_argument("unknown mock policy '" + std::string(spec) + "'");
}

}  // namespace refsent
