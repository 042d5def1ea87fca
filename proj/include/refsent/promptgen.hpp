#pragma once

#include <fmt/format.h>
#include <json.hpp>

#include <array>
#include <charconv>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "refsent/corpus.hpp"

namespace refsent {

/// Bumped whenever any template byte changes; recorded in every run manifest
/// and prediction cache key.
inline constexpr std::string_view kTemplateVersion = "refsent-prompt-v1";

enum class PromptFormat { none, nl, json };

/// Supplementary field groups: U (user average), B (business average),
/// O (name, open days, hours).
struct FieldSet {
  bool user = false;
  bool business = false;
  bool other = false;

  static constexpr FieldSet none() { return {}; }
  static constexpr FieldSet ubo() { return {true, true, true}; }
  static constexpr FieldSet ub() { return {true, true, false}; }
  static constexpr FieldSet o() { return {false, false, true}; }

  constexpr bool empty() const { return !user && !business && !other; }
  friend constexpr bool operator==(FieldSet, FieldSet) = default;

  std::string label() const {
    std::string s;
    if (user) s += 'U';
    if (business) s += 'B';
    if (other) s += 'O';
    return s;
  }
};

struct PromptVariant {
  PromptFormat format = PromptFormat::none;
  FieldSet fields;

  friend bool operator==(const PromptVariant&, const PromptVariant&) = default;

  bool valid() const {
    if (format == PromptFormat::none) return fields.empty();
    return fields == FieldSet::ubo() || fields == FieldSet::ub() || fields == FieldSet::o();
  }

  /// "None", "NL-UBO", "JSON-O", ...
  std::string name() const {
    switch (format) {
      case PromptFormat::none:
        return "None";
      case PromptFormat::nl:
        return "NL-" + fields.label();
      case PromptFormat::json:
        return "JSON-" + fields.label();
    }
    return "?";
  }

  static PromptVariant parse(std::string_view name) {
    name = trim(name);
    if (iequals(name, "None")) return {};
    const auto dash = name.find('-');
    if (dash == std::string_view::npos)
      throw std::invalid_argument("unknown prompt variant '" + std::string(name) + "'");
    PromptVariant v;
    const auto fmt_part = name.substr(0, dash);
    if (iequals(fmt_part, "NL"))
      v.format = PromptFormat::nl;
    else if (iequals(fmt_part, "JSON"))
      v.format = PromptFormat::json;
    else
      throw std::invalid_argument("unknown prompt format in '" + std::string(name) + "'");
    const auto fields = to_lower_ascii(name.substr(dash + 1));
    if (fields == "ubo")
      v.fields = FieldSet::ubo();
    else if (fields == "ub")
      v.fields = FieldSet::ub();
    else if (fields == "o")
      v.fields = FieldSet::o();
    else
      throw std::invalid_argument("unsupported field selection in '" + std::string(name) + "'");
    return v;
  }

  /// The seven studied variants, in report order.
  static std::array<PromptVariant, 7> all() {
    return {PromptVariant{PromptFormat::json, FieldSet::ubo()},
            PromptVariant{PromptFormat::json, FieldSet::ub()},
            PromptVariant{PromptFormat::json, FieldSet::o()},
            PromptVariant{PromptFormat::nl, FieldSet::ubo()},
            PromptVariant{PromptFormat::nl, FieldSet::ub()},
            PromptVariant{PromptFormat::nl, FieldSet::o()},
            PromptVariant{}};
  }
};

struct SupplementaryInfo {
  double user_average = 0.0;
  double business_average = 0.0;
  std::string business_name;
  int open_days_per_week = 0;
  HoursMap hours;

  static SupplementaryInfo from(const ReviewSample& s) {
    return {s.user_average, s.business_average, s.business_name, s.open_days_per_week, s.hours};
  }
};

// ---------------------------------------------------------------------------
// Formatting helpers

inline std::string format_rating(double value) { return fmt::format("{:.2f}", value); }

namespace detail {

inline std::optional<int> parse_small_int(std::string_view s) {
  s = trim(s);
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<std::string> normalize_clock(std::string_view hm) {
  const auto colon = hm.find(':');
  if (colon == std::string_view::npos) return std::nullopt;
  auto h = parse_small_int(hm.substr(0, colon));
  auto m = parse_small_int(hm.substr(colon + 1));
  if (!h || !m || *h < 0 || *h > 24 || *m < 0 || *m > 59) return std::nullopt;
  return fmt::format("{:02d}:{:02d}", *h, *m);
}

}  // namespace detail

/// "8:0-18:30" -> "08:00-18:30"; anything unparseable is passed through.
inline std::string normalize_hours_span(std::string_view span) {
  const auto dash = span.find('-');
  if (dash != std::string_view::npos) {
    auto open = detail::normalize_clock(span.substr(0, dash));
    auto close = detail::normalize_clock(span.substr(dash + 1));
    if (open && close) return *open + "-" + *close;
  }
  return std::string(trim(span));
}

/// (weekday, normalized span) pairs in Monday-first order; unrecognized keys
/// are dropped.
inline std::vector<std::pair<std::string, std::string>> ordered_hours(const HoursMap& hours) {
  std::array<std::optional<std::string>, 7> slots;
  for (const auto& [day, span] : hours)
    if (auto idx = weekday_index(day)) slots[static_cast<std::size_t>(*idx)] = normalize_hours_span(span);
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < slots.size(); ++i)
    if (slots[i]) out.emplace_back(std::string(kWeekdays[i]), *slots[i]);
  return out;
}

inline std::string json_string_literal(std::string_view s) {
  return nlohmann::json(std::string(s)).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

// ---------------------------------------------------------------------------
// Templates

inline constexpr std::string_view kInstruction =
    "Read the customer review and predict the star rating (1 to 5) the customer gave. "
    "Answer with a single digit.";

inline constexpr std::string_view kExampleReview =
    "The pasta was cooked perfectly, the staff were warm and attentive, and the tiramisu "
    "was the best I have had in years. I will definitely be back.";

inline constexpr std::string_view kExampleStars = "5";

/// Trailing answer slot completed by the model.
inline constexpr std::string_view kAnswerSlot = "Stars: ";

inline constexpr std::string_view kJsonExplanation =
    "The following JSON contains supplementary information about the user and the establishment.";

inline std::string render_supplementary_nl(const SupplementaryInfo& info, FieldSet fields) {
  std::vector<std::string> sentences;
  if (fields.user)
    sentences.push_back("This user's average rating across their past reviews is " +
                        format_rating(info.user_average) + ".");
  if (fields.business)
    sentences.push_back("This business's average rating across all reviewers is " +
                        format_rating(info.business_average) + ".");
  if (fields.other) {
    const auto hours = ordered_hours(info.hours);
    std::string sentence = "The business is named " + preprocess_text(info.business_name) +
                           ", is open " + std::to_string(info.open_days_per_week) +
                           (info.open_days_per_week == 1 ? " day" : " days") + " per week, and ";
    if (hours.empty()) {
      sentence += "has no listed operating hours.";
    } else {
      sentence += "has operating hours ";
      for (std::size_t i = 0; i < hours.size(); ++i) {
        if (i > 0) sentence += ", ";
        sentence += hours[i].first + " " + hours[i].second;
      }
      sentence += ".";
    }
    sentences.push_back(std::move(sentence));
  }
  std::string block;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (i > 0) block += '\n';
    block += sentences[i];
  }
  return block;
}

/// Single-line JSON object with fixed key order and two-decimal ratings.
inline std::string render_supplementary_object(const SupplementaryInfo& info, FieldSet fields) {
  std::vector<std::string> members;
  if (fields.user) members.push_back("\"user_average\": " + format_rating(info.user_average));
  if (fields.business)
    members.push_back("\"business_average\": " + format_rating(info.business_average));
  if (fields.other) {
    members.push_back("\"business_name\": " + json_string_literal(preprocess_text(info.business_name)));
    members.push_back("\"open_days_per_week\": " + std::to_string(info.open_days_per_week));
    std::string hours = "{";
    const auto ordered = ordered_hours(info.hours);
    for (std::size_t i = 0; i < ordered.size(); ++i) {
      if (i > 0) hours += ", ";
      hours += json_string_literal(ordered[i].first) + ": " + json_string_literal(ordered[i].second);
    }
    hours += "}";
    members.push_back("\"hours\": " + hours);
  }
  std::string obj = "{";
  for (std::size_t i = 0; i < members.size(); ++i) {
    if (i > 0) obj += ", ";
    obj += members[i];
  }
  obj += "}";
  return obj;
}

/// Explanation line followed by the JSON object; empty for an empty selection.
inline std::string render_supplementary_json(const SupplementaryInfo& info, FieldSet fields) {
  if (fields.empty()) return {};
  return std::string(kJsonExplanation) + "\n" + render_supplementary_object(info, fields);
}

namespace detail {

inline std::string assemble_prompt(std::string_view review_text, std::string_view block) {
  std::string p;
  p.reserve(kInstruction.size() + kExampleReview.size() + review_text.size() + block.size() + 64);
  p += kInstruction;
  p += "\n\nReview: ";
  p += kExampleReview;
  p += "\n";
  p += kAnswerSlot;
  p += kExampleStars;
  p += "\n\nReview: ";
  p += preprocess_text(review_text);
  p += "\n";
  if (!block.empty()) {
    p += block;
    p += "\n";
  }
  p += kAnswerSlot;
  return p;
}

}  // namespace detail

/// One-shot prompt: instruction, a fixed 5-star worked example, the target
/// review and a trailing "Stars: " answer slot.
inline std::string build_base_prompt(const ReviewSample& sample) {
  return detail::assemble_prompt(sample.text, {});
}

/// Base prompt with the variant's supplementary block placed between the
/// target review and the answer slot.
inline std::string build_prompt(const ReviewSample& sample, const PromptVariant& variant) {
  if (!variant.valid()) throw std::invalid_argument("invalid prompt variant " + variant.name());
  const auto info = SupplementaryInfo::from(sample);
  switch (variant.format) {
    case PromptFormat::none:
      return build_base_prompt(sample);
    case PromptFormat::nl:
      return detail::assemble_prompt(sample.text, render_supplementary_nl(info, variant.fields));
    case PromptFormat::json:
      return detail::assemble_prompt(sample.text, render_supplementary_json(info, variant.fields));
  }
  return build_base_prompt(sample);
}

}  // namespace refsent
