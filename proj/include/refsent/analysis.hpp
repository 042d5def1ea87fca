#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "refsent/corpus.hpp"
#include "refsent/metrics.hpp"
#include "refsent/rating.hpp"

namespace refsent {

// ---------------------------------------------------------------------------
// Expectation gaps

struct Gaps {
  double user = 0.0;
  double business = 0.0;
};

/// Rating minus the user's average, and rating minus the business average.
/// Positive values mean the experience beat the reference point.
inline Gaps compute_gaps(const ReviewSample& s) {
  return {static_cast<double>(s.stars) - s.user_average,
          static_cast<double>(s.stars) - s.business_average};
}

inline constexpr int kQuintiles = 5;

struct GapRecord {
  std::string review_id;
  double gap_user = 0.0;
  double gap_business = 0.0;
  int bin_user = -1;
  int bin_business = -1;
};

enum class GapKind { user, business };

inline const char* to_string(GapKind k) { return k == GapKind::user ? "user" : "business"; }

inline double gap_of(const GapRecord& r, GapKind kind) {
  return kind == GapKind::user ? r.gap_user : r.gap_business;
}

struct GapBin {
  int index = 0;
  double mean_gap = 0.0;
  std::vector<GapRecord> members;
};

/// Sorts by the chosen gap (ties by review_id) and cuts into `bins`
/// equal-frequency groups; with remainder r the first r bins get one extra.
inline std::vector<GapBin> bin_equal_frequency(std::vector<GapRecord> records, GapKind kind,
                                               int bins) {
  if (bins < 1) throw std::invalid_argument("bin count must be positive");
  if (records.size() < static_cast<std::size_t>(bins))
    throw std::invalid_argument("need at least " + std::to_string(bins) + " records to bin, got " +
                                std::to_string(records.size()));
  std::sort(records.begin(), records.end(), [kind](const GapRecord& a, const GapRecord& b) {
    const double ga = gap_of(a, kind), gb = gap_of(b, kind);
    if (ga != gb) return ga < gb;
    return a.review_id < b.review_id;
  });
  const std::size_t k = static_cast<std::size_t>(bins);
  const std::size_t base = records.size() / k;
  const std::size_t extra = records.size() % k;
  std::vector<GapBin> out(k);
  std::size_t pos = 0;
  for (std::size_t b = 0; b < k; ++b) {
    const std::size_t size = base + (b < extra ? 1 : 0);
    auto& bin = out[b];
    bin.index = static_cast<int>(b);
    double sum = 0.0;
    for (std::size_t i = 0; i < size; ++i, ++pos) {
      auto rec = records[pos];
      (kind == GapKind::user ? rec.bin_user : rec.bin_business) = static_cast<int>(b);
      sum += gap_of(rec, kind);
      bin.members.push_back(std::move(rec));
    }
    bin.mean_gap = sum / static_cast<double>(size);
  }
  return out;
}

inline std::vector<GapBin> bin_quintiles(std::vector<GapRecord> records, GapKind kind) {
  return bin_equal_frequency(std::move(records), kind, kQuintiles);
}

/// Gap records for every sample with both quintile assignments filled in.
inline std::vector<GapRecord> gap_records(std::span<const ReviewSample> samples) {
  std::vector<GapRecord> records;
  records.reserve(samples.size());
  for (const auto& s : samples) {
    const auto g = compute_gaps(s);
    records.push_back({s.review_id, g.user, g.business, -1, -1});
  }
  if (records.size() < static_cast<std::size_t>(kQuintiles)) return records;
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) index.emplace(records[i].review_id, i);
  for (GapKind kind : {GapKind::user, GapKind::business})
    for (const auto& bin : bin_quintiles(records, kind))
      for (const auto& m : bin.members) {
        auto& r = records[index.at(m.review_id)];
        (kind == GapKind::user ? r.bin_user : r.bin_business) = bin.index;
      }
  return records;
}

inline constexpr std::array<const char*, kQuintiles> kBinLabels = {
    "far below", "below", "met", "above", "far above"};

struct BinSummary {
  int index = 0;
  double mean_gap = 0.0;
  std::size_t n = 0;
  double micro_f1 = 0.0;
  double macro_f1 = 0.0;
  double rmse = 0.0;
};

using PredictionIndex = std::unordered_map<std::string, LabeledPrediction>;

inline PredictionIndex index_by_review(std::span<const LabeledPrediction> preds) {
  PredictionIndex idx;
  for (const auto& p : preds) idx.emplace(p.review_id, p);
  return idx;
}

inline std::vector<BinSummary> bin_metrics(std::span<const GapBin> bins,
                                           const PredictionIndex& predictions) {
  std::vector<BinSummary> out;
  for (const auto& bin : bins) {
    std::vector<LabeledPrediction> pairs;
    for (const auto& m : bin.members) {
      auto it = predictions.find(m.review_id);
      if (it == predictions.end())
        throw std::invalid_argument("no prediction for review " + m.review_id);
      pairs.push_back(it->second);
    }
    out.push_back({bin.index, bin.mean_gap, pairs.size(), micro_f1(pairs), macro_f1(pairs),
                   rmse(pairs)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// User-average x business-average matrix

struct MatrixCell {
  std::size_t n = 0;
  std::size_t correct = 0;
  std::optional<double> micro_f1;  // absent when n == 0
};

/// cells[ua - 1][ba - 1], axes are rounded-half-up averages in 1..5.
struct ErrorMatrix {
  std::array<std::array<MatrixCell, kMaxStars>, kMaxStars> cells{};

  const MatrixCell& at(int ua, int ba) const {
    return cells.at(static_cast<std::size_t>(ua - 1)).at(static_cast<std::size_t>(ba - 1));
  }
};

inline ErrorMatrix build_error_matrix(std::span<const ReviewSample> samples,
                                      const PredictionIndex& predictions) {
  ErrorMatrix m;
  for (const auto& s : samples) {
    auto it = predictions.find(s.review_id);
    if (it == predictions.end()) throw std::invalid_argument("no prediction for review " + s.review_id);
    auto& cell = m.cells[static_cast<std::size_t>(round_half_up_stars(s.user_average) - 1)]
                        [static_cast<std::size_t>(round_half_up_stars(s.business_average) - 1)];
    ++cell.n;
    if (it->second.predicted == s.stars) ++cell.correct;
  }
  for (auto& row : m.cells)
    for (auto& cell : row)
      if (cell.n > 0) cell.micro_f1 = static_cast<double>(cell.correct) / static_cast<double>(cell.n);
  return m;
}

// ---------------------------------------------------------------------------
// Alignment routing

enum class Route { local, escalate };

inline const char* to_string(Route r) { return r == Route::local ? "local" : "escalate"; }

struct RoutingDecision {
  std::string review_id;
  double alignment = 0.0;  // |user_average - business_average|, unrounded
  Route decision = Route::local;
  double threshold = 0.0;
};

inline constexpr double kDefaultRoutingThreshold = 0.5;

// Averages carry two decimals, so a difference like 4.2 - 3.7 must count as
// exactly 0.5; the slack is far below that resolution.
inline constexpr double kRoutingSlack = 1e-9;

inline RoutingDecision route(const ReviewSample& s, double threshold) {
  if (!(threshold >= 0.0)) throw std::invalid_argument("routing threshold must be >= 0");
  const double alignment = std::abs(s.user_average - s.business_average);
  return {s.review_id, alignment,
          alignment <= threshold + kRoutingSlack ? Route::local : Route::escalate, threshold};
}

}  // namespace refsent
