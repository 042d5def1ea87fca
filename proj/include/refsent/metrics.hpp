#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "refsent/rating.hpp"

namespace refsent {

struct LabeledPrediction {
  std::string review_id;
  int predicted = 0;
  int actual = 0;
  bool imputed = false;
};

namespace detail {

inline void require_nonempty(std::span<const LabeledPrediction> pairs, const char* what) {
  if (pairs.empty()) throw std::invalid_argument(std::string(what) + ": no predictions");
  for (const auto& p : pairs)
    if (!is_valid_stars(p.predicted) || !is_valid_stars(p.actual))
      throw std::invalid_argument(std::string(what) + ": rating outside 1..5 for " + p.review_id);
}

}  // namespace detail

/// Fraction of exact matches. For single-label multiclass data this is also
/// the micro-averaged F1.
inline double accuracy(std::span<const LabeledPrediction> pairs) {
  detail::require_nonempty(pairs, "accuracy");
  const auto hits = std::count_if(pairs.begin(), pairs.end(),
                                  [](const LabeledPrediction& p) { return p.predicted == p.actual; });
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

inline double micro_f1(std::span<const LabeledPrediction> pairs) { return accuracy(pairs); }

/// Unweighted mean of per-class F1 over the classes that occur in either the
/// labels or the predictions. A class that occurs but is never hit scores 0.
inline double macro_f1(std::span<const LabeledPrediction> pairs) {
  detail::require_nonempty(pairs, "macro_f1");
  std::array<std::int64_t, kMaxStars + 1> tp{}, fp{}, fn{};
  for (const auto& p : pairs) {
    if (p.predicted == p.actual) {
      ++tp[static_cast<std::size_t>(p.actual)];
    } else {
      ++fp[static_cast<std::size_t>(p.predicted)];
      ++fn[static_cast<std::size_t>(p.actual)];
    }
  }
  double sum = 0.0;
  int classes = 0;
  for (std::size_t k = kMinStars; k <= kMaxStars; ++k) {
    const auto denom = 2 * tp[k] + fp[k] + fn[k];
    if (denom == 0) continue;
    sum += 2.0 * static_cast<double>(tp[k]) / static_cast<double>(denom);
    ++classes;
  }
  return sum / classes;
}

inline double rmse(std::span<const LabeledPrediction> pairs) {
  detail::require_nonempty(pairs, "rmse");
  double ss = 0.0;
  for (const auto& p : pairs) {
    const double d = p.predicted - p.actual;
    ss += d * d;
  }
  return std::sqrt(ss / static_cast<double>(pairs.size()));
}

inline std::vector<LabeledPrediction> without_imputed(std::span<const LabeledPrediction> pairs) {
  std::vector<LabeledPrediction> out;
  std::copy_if(pairs.begin(), pairs.end(), std::back_inserter(out),
               [](const LabeledPrediction& p) { return !p.imputed; });
  return out;
}

// ---------------------------------------------------------------------------
// McNemar

enum class McNemarMethod { exact, chi_square_cc };

inline const char* to_string(McNemarMethod m) {
  return m == McNemarMethod::exact ? "exact" : "chi_square_cc";
}

struct McNemarResult {
  std::int64_t b = 0;  // A correct, B wrong
  std::int64_t c = 0;  // A wrong, B correct
  McNemarMethod method = McNemarMethod::exact;
  std::optional<double> statistic;
  double p_value = 1.0;
};

/// Discordant-pair count at or below which the exact binomial test is used.
inline constexpr std::int64_t kMcNemarExactLimit = 25;

/// Two-sided exact p: min(1, 2 * P(X <= min(b, c))), X ~ Binomial(b + c, 1/2).
inline double mcnemar_exact_p(std::int64_t b, std::int64_t c) {
  const std::int64_t n = b + c;
  if (n == 0) return 1.0;
  const std::int64_t k = std::min(b, c);
  // log C(n, i) - n log 2, summed in linear space.
  double tail = 0.0;
  const double log_half_n = static_cast<double>(n) * std::log(0.5);
  for (std::int64_t i = 0; i <= k; ++i) {
    const double log_choose = std::lgamma(static_cast<double>(n) + 1.0) -
                              std::lgamma(static_cast<double>(i) + 1.0) -
                              std::lgamma(static_cast<double>(n - i) + 1.0);
    tail += std::exp(log_choose + log_half_n);
  }
  return std::min(1.0, 2.0 * tail);
}

/// Upper tail of the chi-square distribution with one degree of freedom.
inline double chi_square_1df_sf(double x) {
  if (x <= 0.0) return 1.0;
  return std::erfc(std::sqrt(x / 2.0));
}

inline McNemarResult mcnemar_from_counts(std::int64_t b, std::int64_t c) {
  if (b < 0 || c < 0) throw std::invalid_argument("mcnemar: negative discordant count");
  McNemarResult r{b, c, McNemarMethod::exact, std::nullopt, 1.0};
  if (b + c <= kMcNemarExactLimit) {
    r.p_value = mcnemar_exact_p(b, c);
    return r;
  }
  // Clamped so b == c gives a zero statistic rather than 1 / (b + c).
  const double diff = std::max(0.0, std::abs(static_cast<double>(b - c)) - 1.0);
  const double stat = diff * diff / static_cast<double>(b + c);
  r.method = McNemarMethod::chi_square_cc;
  r.statistic = stat;
  r.p_value = std::clamp(chi_square_1df_sf(stat), 0.0, 1.0);
  return r;
}

/// Paired test on per-sample correctness of two prediction vectors aligned
/// with `actuals`.
inline McNemarResult mcnemar(std::span<const int> preds_a, std::span<const int> preds_b,
                             std::span<const int> actuals) {
  if (preds_a.size() != preds_b.size() || preds_a.size() != actuals.size())
    throw std::invalid_argument("mcnemar: prediction and label vectors differ in length");
  std::int64_t b = 0, c = 0;
  for (std::size_t i = 0; i < actuals.size(); ++i) {
    const bool a_ok = preds_a[i] == actuals[i];
    const bool b_ok = preds_b[i] == actuals[i];
    if (a_ok && !b_ok) ++b;
    if (!a_ok && b_ok) ++c;
  }
  return mcnemar_from_counts(b, c);
}

}  // namespace refsent
