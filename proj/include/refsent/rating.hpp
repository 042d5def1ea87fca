#pragma once

#include <algorithm>
#include <cmath>

namespace refsent {

inline constexpr int kMinStars = 1;
inline constexpr int kMaxStars = 5;

constexpr bool is_valid_stars(int stars) noexcept {
  return stars >= kMinStars && stars <= kMaxStars;
}

inline bool is_valid_average(double avg) noexcept {
  return std::isfinite(avg) && avg >= kMinStars && avg <= kMaxStars;
}

// 4.5 -> 5, 4.49 -> 4; results outside 1..5 are clamped.
inline int round_half_up_stars(double avg) noexcept {
  const double r = std::floor(avg + 0.5);
  return static_cast<int>(std::clamp(r, static_cast<double>(kMinStars),
                                     static_cast<double>(kMaxStars)));
}

}  // namespace refsent
