// Shared fixtures and independent oracles for the unit and acceptance tests.
#pragma once

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "refsent/refsent.hpp"

namespace testing_support {

inline const std::filesystem::path kSourceDir = REFSENT_SOURCE_DIR;
inline const std::filesystem::path kFixtures = kSourceDir / "tests" / "fixtures";
inline const std::filesystem::path kGolden = kSourceDir / "tests" / "golden";
inline const std::filesystem::path kReference = kSourceDir / "data" / "published_reference.json";

inline bool update_golden() {
  const char* v = std::getenv("REFSENT_UPDATE_GOLDEN");
  return v != nullptr && *v != '\0' && std::string(v) != "0";
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "refsent") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline refsent::ReviewSample make_sample(std::string id, int stars, double ua, double ba) {
  refsent::ReviewSample s;
  s.review_id = id;
  s.user_id = "u-" + id;
  s.business_id = "b-" + id;
  s.text = "The meal was good and the room was quiet tonight.";
  s.stars = stars;
  s.user_average = ua;
  s.business_average = ba;
  s.business_name = "Place " + id;
  return s;
}

// ---------------------------------------------------------------------------
// Canonical prompt samples

inline std::vector<refsent::ReviewSample> canonical_samples() {
  using refsent::ReviewSample;
  ReviewSample full;
  full.review_id = "canon-full-week";
  full.user_id = "user-a";
  full.business_id = "biz-a";
  full.text = "Lovely patio and a friendly host. The ramen broth was rich, though the noodles were a bit soft.";
  full.stars = 4;
  full.user_average = 3.875;
  full.business_average = 4.0;
  full.business_name = "Sakura Noodle Bar";
  full.hours = {{"Monday", "11:0-22:0"},  {"Tuesday", "11:0-22:0"}, {"Wednesday", "11:0-22:0"},
                {"Thursday", "11:0-22:0"}, {"Friday", "11:0-23:30"}, {"Saturday", "12:0-23:30"},
                {"Sunday", "12:0-21:0"}};
  full.open_days_per_week = 7;

  ReviewSample no_hours;
  no_hours.review_id = "canon-no-hours";
  no_hours.user_id = "user-b";
  no_hours.business_id = "biz-b";
  no_hours.text = "Waited an hour.\r\n\r\nCold fries, \"fresh\" salad that wasn't. Never again.";
  no_hours.stars = 1;
  no_hours.user_average = 2.5;
  no_hours.business_average = 2.0;
  no_hours.business_name = "Joe's \"Famous\" Caf\xC3\xA9";
  no_hours.open_days_per_week = 0;

  ReviewSample one_day;
  one_day.review_id = "canon-one-day";
  one_day.user_id = "user-c";
  one_day.business_id = "biz-c";
  one_day.text = "Only open on Saturdays but worth planning around. Great brunch.";
  one_day.stars = 5;
  one_day.user_average = 4.999;
  one_day.business_average = 4.5;
  one_day.business_name = "Weekend Table";
  one_day.hours = {{"Saturday", "8:0-14:30"}};
  one_day.open_days_per_week = 1;
  return {full, no_hours, one_day};
}

// ---------------------------------------------------------------------------
// Oracles. Written independently of the library formulas.

namespace oracle {

struct Instance {
  std::vector<int> predicted;
  std::vector<int> actual;
};

inline Instance random_instance(std::mt19937_64& rng, std::size_t max_n = 20) {
  std::uniform_int_distribution<std::size_t> size(1, max_n);
  std::uniform_int_distribution<int> star(1, 5);
  Instance in;
  const auto n = size(rng);
  for (std::size_t i = 0; i < n; ++i) {
    in.predicted.push_back(star(rng));
    in.actual.push_back(star(rng));
  }
  return in;
}

inline std::vector<refsent::LabeledPrediction> labeled(const Instance& in) {
  std::vector<refsent::LabeledPrediction> out;
  for (std::size_t i = 0; i < in.predicted.size(); ++i)
    out.push_back({"r" + std::to_string(i), in.predicted[i], in.actual[i], false});
  return out;
}

// confusion[actual][predicted]
inline std::map<int, std::map<int, int>> confusion(const Instance& in) {
  std::map<int, std::map<int, int>> m;
  for (std::size_t i = 0; i < in.predicted.size(); ++i) ++m[in.actual[i]][in.predicted[i]];
  return m;
}

/// Per-class precision and recall from the confusion matrix, F1 as their
/// harmonic mean, averaged over every label seen on either side.
inline double macro_f1(const Instance& in) {
  const auto m = confusion(in);
  std::set<int> labels(in.actual.begin(), in.actual.end());
  labels.insert(in.predicted.begin(), in.predicted.end());
  double total = 0.0;
  for (int k : labels) {
    double tp = 0, col = 0, row = 0;
    for (const auto& [a, preds] : m)
      for (const auto& [p, count] : preds) {
        if (a == k && p == k) tp += count;
        if (p == k) col += count;
        if (a == k) row += count;
      }
    const double precision = col > 0 ? tp / col : 0.0;
    const double recall = row > 0 ? tp / row : 0.0;
    total += precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  }
  return total / static_cast<double>(labels.size());
}

/// Pooled precision and recall across classes.
inline double micro_f1(const Instance& in) {
  const auto m = confusion(in);
  double tp = 0, all_pred = 0, all_true = 0;
  for (const auto& [a, preds] : m)
    for (const auto& [p, count] : preds) {
      if (a == p) tp += count;
      all_pred += count;
      all_true += count;
    }
  const double precision = tp / all_pred, recall = tp / all_true;
  return precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
}

inline double rmse(const Instance& in) {
  long double ss = 0;
  for (std::size_t i = 0; i < in.predicted.size(); ++i) {
    const long double d = in.predicted[i] - in.actual[i];
    ss += d * d;
  }
  return static_cast<double>(std::sqrt(ss / in.predicted.size()));
}

/// Two-sided exact McNemar p from Pascal's triangle (exact integers).
inline double mcnemar_exact(std::int64_t b, std::int64_t c) {
  const auto n = static_cast<std::size_t>(b + c);
  if (n == 0) return 1.0;
  std::vector<std::vector<std::uint64_t>> pascal(n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    pascal[i].assign(i + 1, 1);
    for (std::size_t j = 1; j < i; ++j) pascal[i][j] = pascal[i - 1][j - 1] + pascal[i - 1][j];
  }
  std::uint64_t tail = 0;
  for (std::size_t k = 0; k <= static_cast<std::size_t>(std::min(b, c)); ++k) tail += pascal[n][k];
  const double p = 2.0 * static_cast<double>(tail) / std::ldexp(1.0, static_cast<int>(n));
  return std::min(1.0, p);
}

/// Per-cell accuracy by looping over every (ua, ba) cell and every sample.
inline std::map<std::pair<int, int>, std::pair<int, int>> matrix_cells(
    const std::vector<refsent::ReviewSample>& samples, const std::map<std::string, int>& predicted) {
  auto bucket = [](double avg) {
    int r = 1;
    for (int k = 1; k <= 5; ++k)
      if (avg >= k - 0.5) r = k;  // largest k with k - 0.5 <= avg
    return r;
  };
  std::map<std::pair<int, int>, std::pair<int, int>> cells;  // -> (n, correct)
  for (int ua = 1; ua <= 5; ++ua)
    for (int ba = 1; ba <= 5; ++ba)
      for (const auto& s : samples)
        if (bucket(s.user_average) == ua && bucket(s.business_average) == ba) {
          auto& cell = cells[{ua, ba}];
          ++cell.first;
          if (predicted.at(s.review_id) == s.stars) ++cell.second;
        }
  return cells;
}

}  // namespace oracle

// ---------------------------------------------------------------------------
// Handcrafted 25-sample error-matrix fixture: seven populated cells, mixed
// hits and misses, rounding boundaries at x.5 and x.49.

struct MatrixFixture {
  std::vector<refsent::ReviewSample> samples;
  std::map<std::string, int> predicted;
};

inline MatrixFixture matrix_fixture() {
  struct Row {
    const char* id;
    int stars;
    double ua, ba;
    int pred;
  };
  static const Row rows[] = {
      {"m01", 5, 4.80, 4.60, 5}, {"m02", 4, 4.50, 4.50, 5}, {"m03", 5, 5.00, 4.70, 5},
      {"m04", 4, 4.62, 4.51, 4}, {"m05", 3, 3.49, 3.50, 3}, {"m06", 4, 3.20, 3.90, 4},
      {"m07", 2, 3.10, 3.60, 4}, {"m08", 3, 2.90, 4.10, 3}, {"m09", 5, 3.00, 4.44, 4},
      {"m10", 4, 3.40, 3.55, 4}, {"m11", 1, 1.40, 2.20, 2}, {"m12", 2, 1.20, 1.50, 2},
      {"m13", 1, 1.00, 2.49, 1}, {"m14", 3, 2.50, 1.80, 2}, {"m15", 2, 2.20, 2.10, 2},
      {"m16", 1, 2.30, 1.90, 3}, {"m17", 5, 4.10, 2.40, 2}, {"m18", 4, 4.30, 1.60, 3},
      {"m19", 3, 3.80, 2.45, 3}, {"m20", 4, 4.00, 4.00, 4}, {"m21", 3, 3.50, 4.49, 4},
      {"m22", 5, 4.90, 3.10, 5}, {"m23", 2, 4.70, 2.90, 4}, {"m24", 5, 4.60, 3.40, 5},
      {"m25", 1, 1.10, 4.80, 5},
  };
  MatrixFixture f;
  for (const auto& r : rows) {
    f.samples.push_back(make_sample(r.id, r.stars, r.ua, r.ba));
    f.predicted[r.id] = r.pred;
  }
  return f;
}

inline std::vector<refsent::Prediction> predictions_from(const std::map<std::string, int>& ratings,
                                                         const std::string& variant = "JSON-UBO") {
  std::vector<refsent::Prediction> out;
  for (const auto& [id, r] : ratings) {
    refsent::Prediction p;
    p.review_id = id;
    p.variant = refsent::PromptVariant::parse(variant);
    p.rating = r;
    p.raw_text = std::to_string(r);
    p.attempts = 1;
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Local OpenAI-compatible completions endpoint for HTTP and smoke tests.

class StubCompletionServer {
 public:
  using Handler = std::function<void(const nlohmann::json& body, httplib::Response& res)>;

  explicit StubCompletionServer(Handler handler) : handler_(std::move(handler)) {
    server_.Post("/v1/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++requests_;
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (...) {
        res.status = 400;
        res.set_content("bad json", "text/plain");
        return;
      }
      last_authorization_ = req.get_header_value("Authorization");
      handler_(body, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubCompletionServer() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }
  StubCompletionServer(const StubCompletionServer&) = delete;
  StubCompletionServer& operator=(const StubCompletionServer&) = delete;

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
  int requests() const { return requests_.load(); }
  std::string last_authorization() const { return last_authorization_; }

  static void reply_text(httplib::Response& res, const std::string& text) {
    nlohmann::json payload = {{"object", "text_completion"},
                              {"choices", {{{"index", 0}, {"text", text}, {"finish_reason", "length"}}}}};
    res.set_content(payload.dump(), "application/json");
  }

 private:
  httplib::Server server_;
  Handler handler_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<int> requests_{0};
  std::string last_authorization_;
};

/// Stand-in for a small instruction model: reads the business average from
/// a supplementary block when present, otherwise guesses from review words.
/// Every 40th prompt first answers with junk to exercise the retry path.
inline std::string heuristic_model_reply(const std::string& prompt, int call_number) {
  if (call_number % 40 == 39) return " the";
  const auto target = prompt.rfind("Review: ");
  const std::string tail = target == std::string::npos ? prompt : prompt.substr(target);
  for (const char* key : {"\"business_average\": ", "across all reviewers is "}) {
    if (auto pos = tail.find(key); pos != std::string::npos) {
      const double v = std::stod(tail.substr(pos + std::strlen(key)));
      return " " + std::to_string(refsent::round_half_up_stars(v));
    }
  }
  for (const char* bad : {"cold", "waited", "not be", "bland"})
    if (tail.find(bad) != std::string::npos) return " 2";
  return " 4";
}

}  // namespace testing_support
