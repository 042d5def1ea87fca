#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "refsent/rating.hpp"
#include "refsent/text.hpp"

namespace refsent {

/// Weekday name -> "open-close" string, as found in the Yelp business table.
using HoursMap = std::map<std::string, std::string>;

struct RawBusiness {
  std::string business_id;
  std::string name;
  std::string address;
  double stars = 0.0;
  std::vector<std::string> categories;
  std::optional<HoursMap> hours;
};

struct RawUser {
  std::string user_id;
  double average_stars = 0.0;
};

struct RawReview {
  std::string review_id;
  std::string user_id;
  std::string business_id;
  int stars = 0;
  std::string text;
};

/// Category filter and sampling parameters for one curated dataset.
struct DatasetSpec {
  std::string name;
  std::vector<std::string> include_tags;
  std::vector<std::string> exclude_tags;
  bool require_fixed_address = true;
  std::size_t sample_size = 500;
  std::string language = "en";
  std::uint64_t seed = 0;

  void validate() const {
    if (include_tags.empty()) throw std::invalid_argument("dataset spec: include_tags is empty");
    if (sample_size == 0) throw std::invalid_argument("dataset spec: sample_size must be positive");
    for (const auto& inc : include_tags)
      for (const auto& exc : exclude_tags)
        if (iequals(trim(inc), trim(exc)))
          throw std::invalid_argument("dataset spec: tag '" + inc +
                                      "' is both included and excluded");
  }

  // Yelp uses plural tags ("Restaurants", "Bars", "Food Trucks"); both forms
  // are listed so hand-written category lists match too.
  static DatasetSpec restaurant() {
    return {"Restaurant",
            {"Restaurants", "Restaurant"},
            {"Fast Food", "Food Trucks", "Food Truck", "Bars", "Bar", "Nightlife"},
            true,
            500,
            "en",
            0};
  }

  static DatasetSpec nightlife() {
    return {"Nightlife",
            {"Bars", "Bar", "Nightlife"},
            {"Fast Food", "Food Trucks", "Food Truck"},
            true,
            500,
            "en",
            0};
  }

  static DatasetSpec named(std::string_view name) {
    if (iequals(name, "restaurant")) return restaurant();
    if (iequals(name, "nightlife")) return nightlife();
    throw std::invalid_argument("unknown dataset '" + std::string(name) +
                                "' (expected restaurant or nightlife)");
  }
};

/// One curated (user, business, review) triple.
struct ReviewSample {
  std::string review_id;
  std::string user_id;
  std::string business_id;
  std::string text;
  int stars = 0;
  double user_average = 0.0;
  double business_average = 0.0;
  std::string business_name;
  HoursMap hours;
  int open_days_per_week = 0;

  friend bool operator==(const ReviewSample&, const ReviewSample&) = default;
};

struct FieldStats {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  double min = 0.0;
  double max = 0.0;
};

struct SummaryStats {
  std::size_t n = 0;
  FieldStats stars;
  FieldStats chars;
  FieldStats tokens;
};

// ---------------------------------------------------------------------------
// Text preprocessing and heuristics

/// Replaces every run of CR/LF characters with a single space.
inline std::string preprocess_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool in_break = false;
  for (char c : text) {
    if (c == '\r' || c == '\n') {
      if (!in_break) out.push_back(' ');
      in_break = true;
    } else {
      out.push_back(c);
      in_break = false;
    }
  }
  return out;
}

/// Accepts text whose alphabetic characters are at least 90% ASCII letters
/// and which contains at least five ASCII words. Non-ASCII code points count
/// as alphabetic unless they fall in the Latin-1 symbol range, the general
/// punctuation / symbol blocks, variation selectors, or the emoji planes.
struct AsciiEnglishHeuristic {
  double min_ascii_letter_share = 0.9;
  std::size_t min_ascii_words = 5;

  static bool is_symbol_code_point(char32_t cp) noexcept {
    return (cp >= 0x80 && cp <= 0xBF) || cp == 0xD7 || cp == 0xF7 ||
           (cp >= 0x2000 && cp <= 0x2BFF) || (cp >= 0x3000 && cp <= 0x303F) ||
           (cp >= 0xFE00 && cp <= 0xFE0F) || (cp >= 0xFF00 && cp <= 0xFF20) ||
           (cp >= 0x1F000 && cp <= 0x1FAFF) || cp == 0xFFFD;
  }

  bool operator()(std::string_view text) const {
    std::size_t ascii_letters = 0;
    std::size_t other_letters = 0;
    std::size_t words = 0;
    bool in_word = false;
    std::size_t pos = 0;
    while (pos < text.size()) {
      const char32_t cp = next_code_point(text, pos);
      const bool ascii_letter = (cp >= U'a' && cp <= U'z') || (cp >= U'A' && cp <= U'Z');
      if (ascii_letter) {
        ++ascii_letters;
        if (!in_word) ++words;
        in_word = true;
        continue;
      }
      in_word = false;
      if (cp >= 0x80 && !is_symbol_code_point(cp)) ++other_letters;
    }
    const std::size_t letters = ascii_letters + other_letters;
    if (letters == 0 || words < min_ascii_words) return false;
    return static_cast<double>(ascii_letters) >=
           min_ascii_letter_share * static_cast<double>(letters);
  }
};

template <class D>
concept LanguageDetector = requires(const D& d, std::string_view text) {
  { d(text) } -> std::convertible_to<bool>;
};

/// Rough stand-in for a BPE tokenizer: floor(bytes / 4), at least 1.
struct ApproxBpeTokenizer {
  std::size_t count(std::string_view text) const noexcept {
    return std::max<std::size_t>(1, text.size() / 4);
  }
};

struct WhitespaceTokenizer {
  std::size_t count(std::string_view text) const noexcept {
    std::size_t n = 0;
    bool in_token = false;
    for (char c : text) {
      if (is_ascii_space(c)) {
        in_token = false;
      } else if (!in_token) {
        ++n;
        in_token = true;
      }
    }
    return n;
  }
};

template <class T>
concept Tokenizer = requires(const T& t, std::string_view text) {
  { t.count(text) } -> std::convertible_to<std::size_t>;
};

// ---------------------------------------------------------------------------
// Weekdays and hours

inline constexpr std::array<std::string_view, 7> kWeekdays = {
    "Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"};

/// Index 0..6 (Monday first) for a full or three-letter weekday name.
inline std::optional<int> weekday_index(std::string_view name) {
  name = trim(name);
  for (std::size_t i = 0; i < kWeekdays.size(); ++i) {
    if (iequals(name, kWeekdays[i]) || iequals(name, kWeekdays[i].substr(0, 3)))
      return static_cast<int>(i);
  }
  return std::nullopt;
}

inline int open_days_per_week(const HoursMap& hours) {
  std::array<bool, 7> seen{};
  for (const auto& [day, _] : hours)
    if (auto idx = weekday_index(day)) seen[static_cast<std::size_t>(*idx)] = true;
  return static_cast<int>(std::count(seen.begin(), seen.end(), true));
}

inline int open_days_per_week(const std::optional<HoursMap>& hours) {
  return hours ? open_days_per_week(*hours) : 0;
}

// ---------------------------------------------------------------------------
// Yelp JSON-lines parsing

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline const nlohmann::json& require_field(const nlohmann::json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) throw CorpusError(std::string("missing field '") + key + "'");
  return *it;
}

inline std::string require_string(const nlohmann::json& obj, const char* key) {
  const auto& v = require_field(obj, key);
  if (!v.is_string()) throw CorpusError(std::string("field '") + key + "' is not a string");
  return v.get<std::string>();
}

inline double require_number(const nlohmann::json& obj, const char* key) {
  const auto& v = require_field(obj, key);
  if (!v.is_number()) throw CorpusError(std::string("field '") + key + "' is not a number");
  return v.get<double>();
}

inline std::string optional_string(const nlohmann::json& obj, const char* key) {
  auto it = obj.find(key);
  return (it != obj.end() && it->is_string()) ? it->get<std::string>() : std::string{};
}

inline std::vector<std::string> split_categories(std::string_view s) {
  std::vector<std::string> out;
  while (!s.empty()) {
    const auto comma = s.find(',');
    const auto tag = trim(s.substr(0, comma));
    if (!tag.empty()) out.emplace_back(tag);
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

}  // namespace detail

template <class Record>
struct RecordParser;

template <>
struct RecordParser<RawBusiness> {
  static RawBusiness parse(const nlohmann::json& j) {
    RawBusiness b;
    b.business_id = detail::require_string(j, "business_id");
    if (b.business_id.empty()) throw CorpusError("empty business_id");
    b.name = detail::optional_string(j, "name");
    b.address = detail::optional_string(j, "address");
    b.stars = detail::require_number(j, "stars");
    if (!is_valid_average(b.stars) || std::fmod(b.stars * 2.0, 1.0) != 0.0)
      throw CorpusError("business stars out of range or not in 0.5 steps");
    if (auto it = j.find("categories"); it != j.end() && !it->is_null()) {
      if (it->is_string()) {
        b.categories = detail::split_categories(it->get<std::string>());
      } else if (it->is_array()) {
        for (const auto& tag : *it)
          if (tag.is_string()) b.categories.emplace_back(trim(tag.get<std::string>()));
      } else {
        throw CorpusError("categories is neither a string nor an array");
      }
    }
    if (auto it = j.find("hours"); it != j.end() && !it->is_null()) {
      if (!it->is_object()) throw CorpusError("hours is not an object");
      HoursMap hours;
      for (const auto& [day, span] : it->items())
        if (span.is_string()) hours.emplace(day, span.get<std::string>());
      b.hours = std::move(hours);
    }
    return b;
  }
};

template <>
struct RecordParser<RawUser> {
  static RawUser parse(const nlohmann::json& j) {
    RawUser u;
    u.user_id = detail::require_string(j, "user_id");
    if (u.user_id.empty()) throw CorpusError("empty user_id");
    u.average_stars = detail::require_number(j, "average_stars");
    if (!is_valid_average(u.average_stars)) throw CorpusError("average_stars outside [1,5]");
    return u;
  }
};

template <>
struct RecordParser<RawReview> {
  static RawReview parse(const nlohmann::json& j) {
    RawReview r;
    r.review_id = detail::require_string(j, "review_id");
    r.user_id = detail::require_string(j, "user_id");
    r.business_id = detail::require_string(j, "business_id");
    if (r.review_id.empty() || r.user_id.empty() || r.business_id.empty())
      throw CorpusError("empty id field");
    const double stars = detail::require_number(j, "stars");
    if (stars != std::floor(stars) || !is_valid_stars(static_cast<int>(stars)))
      throw CorpusError("review stars not an integer in 1..5");
    r.stars = static_cast<int>(stars);
    r.text = detail::require_string(j, "text");
    if (trim(preprocess_text(r.text)).empty()) throw CorpusError("empty review text");
    return r;
  }
};

template <class Record>
struct LoadResult {
  std::vector<Record> records;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;  // first few skip reasons, "line N: reason"
};

inline constexpr std::size_t kMaxLoadWarnings = 10;

/// Streams a JSON-lines table, invoking `sink` for every well-formed record.
/// Malformed or invariant-violating lines are skipped and counted. Blank
/// lines are ignored. Throws CorpusError if the file cannot be opened.
template <class Record, class Sink>
  requires std::invocable<Sink&, Record&&>
LoadResult<Record> stream_table(std::istream& in, Sink&& sink) {
  LoadResult<Record> result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object()) throw CorpusError("line is not a JSON object");
      sink(RecordParser<Record>::parse(j));
    } catch (const std::exception& e) {
      ++result.skipped;
      if (result.warnings.size() < kMaxLoadWarnings)
        result.warnings.push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return result;
}

template <class Record>
LoadResult<Record> load_table(std::istream& in) {
  std::vector<Record> records;
  auto result = stream_table<Record>(in, [&](Record&& r) { records.push_back(std::move(r)); });
  result.records = std::move(records);
  return result;
}

template <class Record>
LoadResult<Record> load_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open table " + path.string());
  return load_table<Record>(in);
}

// ---------------------------------------------------------------------------
// Filtering and sample assembly

inline bool has_tag(const std::vector<std::string>& categories,
                    const std::vector<std::string>& tags) {
  return std::any_of(categories.begin(), categories.end(), [&](const std::string& cat) {
    return std::any_of(tags.begin(), tags.end(),
                       [&](const std::string& tag) { return iequals(trim(cat), trim(tag)); });
  });
}

inline bool business_matches(const RawBusiness& b, const DatasetSpec& spec) {
  if (!has_tag(b.categories, spec.include_tags)) return false;
  if (has_tag(b.categories, spec.exclude_tags)) return false;
  if (spec.require_fixed_address && trim(b.address).empty()) return false;
  return true;
}

inline std::vector<RawBusiness> filter_businesses(std::span<const RawBusiness> businesses,
                                                  const DatasetSpec& spec) {
  spec.validate();
  std::vector<RawBusiness> out;
  std::copy_if(businesses.begin(), businesses.end(), std::back_inserter(out),
               [&](const RawBusiness& b) { return business_matches(b, spec); });
  return out;
}

namespace detail {

// Portable across standard libraries, unlike std::uniform_int_distribution.
inline std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % bound;
}

template <class T>
void seeded_shuffle(std::vector<T>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_below(rng, i));
    std::swap(v[i - 1], v[j]);
  }
}

inline void sort_by_review_id(std::vector<ReviewSample>& samples) {
  std::sort(samples.begin(), samples.end(),
            [](const ReviewSample& a, const ReviewSample& b) { return a.review_id < b.review_id; });
}

}  // namespace detail

/// Every review that resolves to a matching business and a known user and
/// whose preprocessed text passes the language detector, sorted by review_id.
template <LanguageDetector Detector = AsciiEnglishHeuristic>
std::vector<ReviewSample> build_candidates(std::span<const RawReview> reviews,
                                           std::span<const RawUser> users,
                                           std::span<const RawBusiness> businesses,
                                           const DatasetSpec& spec,
                                           const Detector& is_english = {}) {
  const auto kept = filter_businesses(businesses, spec);
  std::unordered_map<std::string_view, const RawBusiness*> business_by_id;
  for (const auto& b : kept) business_by_id.emplace(b.business_id, &b);
  std::unordered_map<std::string_view, const RawUser*> user_by_id;
  for (const auto& u : users) user_by_id.emplace(u.user_id, &u);

  std::vector<ReviewSample> out;
  std::unordered_set<std::string_view> seen_reviews;
  for (const auto& r : reviews) {
    auto b = business_by_id.find(r.business_id);
    if (b == business_by_id.end()) continue;
    auto u = user_by_id.find(r.user_id);
    if (u == user_by_id.end()) continue;
    if (!seen_reviews.insert(r.review_id).second) continue;
    std::string text = preprocess_text(r.text);
    if (trim(text).empty() || !is_english(std::string_view(text))) continue;

    ReviewSample s;
    s.review_id = r.review_id;
    s.user_id = r.user_id;
    s.business_id = r.business_id;
    s.text = std::move(text);
    s.stars = r.stars;
    s.user_average = u->second->average_stars;
    s.business_average = b->second->stars;
    s.business_name = preprocess_text(b->second->name);
    s.hours = b->second->hours.value_or(HoursMap{});
    s.open_days_per_week = open_days_per_week(s.hours);
    out.push_back(std::move(s));
  }
  detail::sort_by_review_id(out);
  return out;
}

/// Seeded random selection in which no user_id and no business_id repeats.
/// Throws CorpusError when fewer than `count` such samples exist in the pool.
inline std::vector<ReviewSample> select_unique(std::vector<ReviewSample> pool, std::size_t count,
                                               std::uint64_t seed) {
  detail::sort_by_review_id(pool);
  detail::seeded_shuffle(pool, seed);
  std::unordered_set<std::string> users, businesses;
  std::vector<ReviewSample> out;
  for (auto& s : pool) {
    if (out.size() == count) break;
    if (users.count(s.user_id) || businesses.count(s.business_id)) continue;
    users.insert(s.user_id);
    businesses.insert(s.business_id);
    out.push_back(std::move(s));
  }
  if (out.size() < count) {
    throw CorpusError("insufficient candidates: requested " + std::to_string(count) +
                      " unique-user/unique-business samples, pool of " +
                      std::to_string(pool.size()) + " candidates yields only " +
                      std::to_string(out.size()));
  }
  detail::sort_by_review_id(out);
  return out;
}

template <LanguageDetector Detector = AsciiEnglishHeuristic>
std::vector<ReviewSample> assemble_samples(std::span<const RawReview> reviews,
                                           std::span<const RawUser> users,
                                           std::span<const RawBusiness> businesses,
                                           const DatasetSpec& spec,
                                           const Detector& is_english = {}) {
  return select_unique(build_candidates(reviews, users, businesses, spec, is_english),
                       spec.sample_size, spec.seed);
}

struct DisjointSplit {
  std::vector<ReviewSample> train;
  std::vector<ReviewSample> test;
};

/// Draws the test set first, then a training set sharing no user_id or
/// business_id with it. Each side is internally unique as well.
inline DisjointSplit split_disjoint(std::vector<ReviewSample> pool, std::size_t n_train,
                                    std::size_t n_test, std::uint64_t seed) {
  detail::sort_by_review_id(pool);
  detail::seeded_shuffle(pool, seed);
  std::unordered_set<std::string> users, businesses;
  DisjointSplit split;
  std::vector<bool> taken(pool.size(), false);

  auto fill = [&](std::vector<ReviewSample>& dest, std::size_t want) {
    for (std::size_t i = 0; i < pool.size() && dest.size() < want; ++i) {
      if (taken[i]) continue;
      const auto& s = pool[i];
      if (users.count(s.user_id) || businesses.count(s.business_id)) continue;
      users.insert(s.user_id);
      businesses.insert(s.business_id);
      taken[i] = true;
      dest.push_back(s);
    }
  };
  fill(split.test, n_test);
  fill(split.train, n_train);

  if (split.test.size() < n_test || split.train.size() < n_train) {
    throw CorpusError("infeasible disjoint split: wanted train=" + std::to_string(n_train) +
                      " test=" + std::to_string(n_test) + ", achieved train=" +
                      std::to_string(split.train.size()) +
                      " test=" + std::to_string(split.test.size()));
  }
  detail::sort_by_review_id(split.train);
  detail::sort_by_review_id(split.test);
  return split;
}

// ---------------------------------------------------------------------------
// Summary statistics

namespace detail {

inline FieldStats field_stats(const std::vector<double>& xs) {
  FieldStats s;
  s.min = *std::min_element(xs.begin(), xs.end());
  s.max = *std::max_element(xs.begin(), xs.end());
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(xs.size()));
  // Guard against rounding pushing the mean outside [min, max] for constant data.
  s.mean = std::clamp(s.mean, s.min, s.max);
  return s;
}

}  // namespace detail

/// Mean, population std, min and max of stars, character counts (UTF-8 code
/// points) and token counts.
template <Tokenizer Tok = ApproxBpeTokenizer>
SummaryStats summary_stats(std::span<const ReviewSample> samples, const Tok& tokenizer = {}) {
  if (samples.empty()) throw std::invalid_argument("summary_stats: no samples");
  std::vector<double> stars, chars, tokens;
  for (const auto& s : samples) {
    stars.push_back(s.stars);
    chars.push_back(static_cast<double>(utf8_length(s.text)));
    tokens.push_back(static_cast<double>(tokenizer.count(s.text)));
  }
  return {samples.size(), detail::field_stats(stars), detail::field_stats(chars),
          detail::field_stats(tokens)};
}

// ---------------------------------------------------------------------------
// Curated sample files

inline nlohmann::ordered_json to_json(const ReviewSample& s) {
  nlohmann::ordered_json j;
  j["review_id"] = s.review_id;
  j["user_id"] = s.user_id;
  j["business_id"] = s.business_id;
  j["text"] = s.text;
  j["stars"] = s.stars;
  j["user_average"] = s.user_average;
  j["business_average"] = s.business_average;
  j["business_name"] = s.business_name;
  j["hours"] = s.hours;
  j["open_days_per_week"] = s.open_days_per_week;
  return j;
}

inline ReviewSample sample_from_json(const nlohmann::json& j) {
  ReviewSample s;
  s.review_id = j.at("review_id").get<std::string>();
  s.user_id = j.at("user_id").get<std::string>();
  s.business_id = j.at("business_id").get<std::string>();
  s.text = j.at("text").get<std::string>();
  s.stars = j.at("stars").get<int>();
  s.user_average = j.at("user_average").get<double>();
  s.business_average = j.at("business_average").get<double>();
  s.business_name = j.at("business_name").get<std::string>();
  if (const auto& h = j.at("hours"); !h.is_null()) s.hours = h.get<HoursMap>();
  s.open_days_per_week = j.at("open_days_per_week").get<int>();
  if (!is_valid_stars(s.stars) || !is_valid_average(s.user_average) ||
      !is_valid_average(s.business_average))
    throw CorpusError("sample " + s.review_id + ": rating field out of bounds");
  if (s.text.find_first_of("\r\n") != std::string::npos)
    throw CorpusError("sample " + s.review_id + ": text contains a line break");
  return s;
}

inline constexpr auto kJsonDumpReplace = nlohmann::json::error_handler_t::replace;

/// One sample per line, sorted by review_id.
inline std::string samples_to_jsonl(std::vector<ReviewSample> samples) {
  detail::sort_by_review_id(samples);
  std::string out;
  for (const auto& s : samples) {
    out += to_json(s).dump(-1, ' ', false, kJsonDumpReplace);
    out += '\n';
  }
  return out;
}

inline void write_samples(const std::filesystem::path& path,
                          const std::vector<ReviewSample>& samples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CorpusError("cannot write " + path.string());
  out << samples_to_jsonl(samples);
  if (!out) throw CorpusError("write failed for " + path.string());
}

inline std::vector<ReviewSample> read_samples(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open curated corpus " + path.string());
  std::vector<ReviewSample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw CorpusError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace refsent
