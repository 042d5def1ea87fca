#pragma once

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <json.hpp>

#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "refsent/analysis.hpp"
#include "refsent/corpus.hpp"
#include "refsent/http_backend.hpp"
#include "refsent/inference.hpp"
#include "refsent/metrics.hpp"
#include "refsent/promptgen.hpp"
#include "refsent/reference.hpp"
#include "refsent/report.hpp"

namespace refsent {

class HarnessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration

struct BackendConfig {
  std::string kind = "mock";  // "mock" or "http"
  std::string mock_policy = "round_business_average";
  std::string url;
  std::string model = "default";
  std::string api_key;
  int timeout_s = 60;
  int max_attempts = 4;
  int retry_base_ms = 250;
};

struct YelpPaths {
  std::filesystem::path business;
  std::filesystem::path user;
  std::filesystem::path review;
};

inline std::vector<PromptVariant> all_variants() {
  const auto all = PromptVariant::all();
  return {all.begin(), all.end()};
}

struct RunConfig {
  std::string dataset = "restaurant";
  YelpPaths yelp;
  std::size_t sample_size = 500;
  std::uint64_t seed = 42;
  std::vector<PromptVariant> variants = all_variants();
  BackendConfig backend;
  DecodingParams decoding;
  std::size_t concurrency = 4;
  double threshold = kDefaultRoutingThreshold;
  PromptVariant study_variant{PromptFormat::json, FieldSet::ubo()};
  std::filesystem::path out = "runs/default";
  std::string template_version = std::string(kTemplateVersion);
  ReportFormat format = ReportFormat::markdown;
  std::filesystem::path reference;  // empty: no published-value deltas

  void validate() const {
    (void)DatasetSpec::named(dataset);
    if (variants.empty()) throw HarnessError("config: at least one variant is required");
    std::unordered_set<std::string> seen;
    for (const auto& v : variants) {
      if (!v.valid()) throw HarnessError("config: invalid variant " + v.name());
      if (!seen.insert(v.name()).second) throw HarnessError("config: duplicate variant " + v.name());
    }
    if (!study_variant.valid()) throw HarnessError("config: invalid study_variant");
    if (sample_size == 0) throw HarnessError("config: sample_size must be positive");
    if (concurrency < 1) throw HarnessError("config: concurrency must be at least 1");
    if (!(threshold >= 0.0)) throw HarnessError("config: threshold must be >= 0");
    if (decoding.max_tokens != 1)
      throw HarnessError("config: max_tokens must be 1 (single-token answers)");
    if (template_version != kTemplateVersion)
      throw HarnessError("config pins template " + template_version + " but this build renders " +
                         std::string(kTemplateVersion));
    if (backend.kind != "mock" && backend.kind != "http")
      throw HarnessError("config: backend.kind must be mock or http");
    if (backend.kind == "http" && backend.url.empty())
      throw HarnessError("config: http backend needs a url (or " + std::string(kBackendUrlEnv) + ")");
  }

  DatasetSpec dataset_spec() const {
    auto spec = DatasetSpec::named(dataset);
    spec.sample_size = sample_size;
    spec.seed = seed;
    return spec;
  }

  /// Reads a JSON config. Relative paths resolve against `base_dir`.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    RunConfig c;
    auto resolve = [&](const std::string& p) -> std::filesystem::path {
      std::filesystem::path path(p);
      return (path.is_relative() && !base_dir.empty()) ? base_dir / path : path;
    };
    c.dataset = to_lower_ascii(j.value("dataset", c.dataset));
    if (auto it = j.find("yelp"); it != j.end()) {
      if (it->contains("business")) c.yelp.business = resolve(it->at("business").get<std::string>());
      if (it->contains("user")) c.yelp.user = resolve(it->at("user").get<std::string>());
      if (it->contains("review")) c.yelp.review = resolve(it->at("review").get<std::string>());
    }
    c.sample_size = j.value("sample_size", c.sample_size);
    c.seed = j.value("seed", c.seed);
    if (auto it = j.find("variants"); it != j.end()) {
      c.variants.clear();
      for (const auto& v : *it) c.variants.push_back(PromptVariant::parse(v.get<std::string>()));
    }
    if (auto it = j.find("backend"); it != j.end()) {
      auto& b = c.backend;
      b.kind = it->value("kind", b.kind);
      b.mock_policy = it->value("policy", b.mock_policy);
      b.url = it->value("url", b.url);
      b.model = it->value("model", b.model);
      b.timeout_s = it->value("timeout_s", b.timeout_s);
      b.max_attempts = it->value("max_attempts", b.max_attempts);
      b.retry_base_ms = it->value("retry_base_ms", b.retry_base_ms);
    }
    if (auto it = j.find("decoding"); it != j.end()) {
      c.decoding.temperature = it->value("temperature", c.decoding.temperature);
      c.decoding.max_tokens = it->value("max_tokens", c.decoding.max_tokens);
      if (auto s = it->find("seed"); s != it->end() && !s->is_null())
        c.decoding.seed = s->get<std::int64_t>();
    }
    c.concurrency = j.value("concurrency", c.concurrency);
    c.threshold = j.value("threshold", c.threshold);
    if (j.contains("study_variant"))
      c.study_variant = PromptVariant::parse(j.at("study_variant").get<std::string>());
    if (j.contains("out")) c.out = resolve(j.at("out").get<std::string>());
    c.template_version = j.value("template_version", c.template_version);
    if (j.contains("format")) c.format = parse_report_format(j.at("format").get<std::string>());
    if (j.contains("reference")) c.reference = resolve(j.at("reference").get<std::string>());
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw HarnessError("cannot open config " + path.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const std::exception& e) {
      throw HarnessError("config " + path.string() + ": " + e.what());
    }
    return from_json(j, path.parent_path());
  }

  /// Full snapshot for the manifest. The API key is never written.
  nlohmann::ordered_json snapshot() const {
    nlohmann::ordered_json j;
    j["dataset"] = dataset;
    j["yelp"] = {{"business", yelp.business.string()},
                 {"user", yelp.user.string()},
                 {"review", yelp.review.string()}};
    j["sample_size"] = sample_size;
    j["seed"] = seed;
    j["variants"] = variant_names();
    j["backend"] = {{"kind", backend.kind},
                    {"policy", backend.mock_policy},
                    {"url", backend.url},
                    {"model", backend.model},
                    {"timeout_s", backend.timeout_s},
                    {"max_attempts", backend.max_attempts},
                    {"retry_base_ms", backend.retry_base_ms}};
    j["decoding"] = {{"temperature", decoding.temperature},
                     {"max_tokens", decoding.max_tokens},
                     {"seed", decoding.seed ? nlohmann::ordered_json(*decoding.seed)
                                            : nlohmann::ordered_json(nullptr)}};
    j["concurrency"] = concurrency;
    j["threshold"] = threshold;
    j["study_variant"] = study_variant.name();
    j["out"] = out.string();
    j["template_version"] = template_version;
    j["format"] = format == ReportFormat::markdown ? "markdown" : "csv";
    j["reference"] = reference.string();
    return j;
  }

  std::vector<std::string> variant_names() const {
    std::vector<std::string> names;
    for (const auto& v : variants) names.push_back(v.name());
    return names;
  }
};

inline std::unique_ptr<CompletionBackend> make_backend(const BackendConfig& b) {
  if (b.kind == "mock") return mock_backend(parse_mock_policy(b.mock_policy));
  if (b.kind == "http")
    return std::make_unique<HttpCompletionBackend>(
        HttpBackendConfig{b.url, b.model, b.api_key, std::chrono::seconds(b.timeout_s)});
  throw HarnessError("unknown backend kind '" + b.kind + "'");
}

/// Model identifier without constructing a backend (no network, no files).
inline std::string backend_model_id(const BackendConfig& b) {
  if (b.kind == "mock") {
    if (b.mock_policy.rfind("scripted:", 0) == 0) return "mock/scripted";
    return "mock/" + b.mock_policy;
  }
  return b.model;
}

inline RetryPolicy retry_policy(const BackendConfig& b) {
  RetryPolicy r;
  r.max_attempts = b.max_attempts;
  r.base_delay = std::chrono::milliseconds(b.retry_base_ms);
  return r;
}

// ---------------------------------------------------------------------------
// Output layout and manifests

struct RunLayout {
  std::filesystem::path out;

  std::filesystem::path samples() const { return out / "samples.jsonl"; }
  std::filesystem::path corpus_summary() const { return out / "corpus_summary.md"; }
  std::filesystem::path predictions_dir() const { return out / "predictions"; }
  std::filesystem::path cache(const PromptVariant& v) const {
    return predictions_dir() / (v.name() + ".jsonl");
  }
  std::filesystem::path manifests() const { return out / "manifests"; }
  std::filesystem::path manifest(const std::string& fingerprint) const {
    return manifests() / (fingerprint + ".json");
  }
  std::filesystem::path reports() const { return out / "reports"; }
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw HarnessError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string utc_timestamp() {
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::time(nullptr)));
}

/// Fingerprint over everything that determines report contents: corpus
/// bytes, model, template, decoding, variants and analysis settings. Paths,
/// timestamps and concurrency are excluded so relocated reruns agree.
inline std::string run_fingerprint(const RunConfig& c, const std::string& corpus_hash,
                                   const std::string& model_id) {
  nlohmann::ordered_json j;
  j["corpus_hash"] = corpus_hash;
  j["dataset"] = c.dataset;
  j["sample_size"] = c.sample_size;
  j["seed"] = c.seed;
  j["variants"] = c.variant_names();
  j["model"] = model_id;
  j["decoding"] = c.decoding.cache_key();
  j["template_version"] = c.template_version;
  j["threshold"] = fmt::format("{:.6f}", c.threshold);
  j["study_variant"] = c.study_variant.name();
  return hex64(fnv1a64(j.dump()));
}

struct RunManifest {
  nlohmann::ordered_json config;
  std::string fingerprint;
  std::string corpus_hash;
  std::string template_version;
  std::string model_id;
  std::string started_at;
  std::string finished_at;
  std::map<std::string, std::string> prediction_caches;  // variant -> path relative to out

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["fingerprint"] = fingerprint;
    j["corpus_hash"] = corpus_hash;
    j["template_version"] = template_version;
    j["model"] = model_id;
    j["started_at"] = started_at;
    j["finished_at"] = finished_at;
    j["prediction_caches"] = prediction_caches;
    j["config"] = config;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Corpus preparation

struct PrepareResult {
  std::vector<ReviewSample> samples;
  SummaryStats stats;
  std::size_t candidates = 0;
  std::size_t skipped_business = 0;
  std::size_t skipped_user = 0;
  std::size_t skipped_review = 0;
  std::vector<std::string> warnings;
};

inline std::string render_corpus_summary(const RunConfig& c, const PrepareResult& r) {
  std::string out = "# Corpus summary: " + c.dataset + "\n\n";
  out += fmt::format("- Samples: {}\n- Candidates: {}\n- Seed: {}\n", r.samples.size(), r.candidates,
                     c.seed);
  out += fmt::format("- Skipped lines: business={}, user={}, review={}\n", r.skipped_business,
                     r.skipped_user, r.skipped_review);
  out += "- Tokens: approximate count, floor(bytes / 4) with a minimum of 1\n";
  out += "- Std: population standard deviation\n\n";
  out += "| Field | Mean | Std | Min | Max |\n| --- | ---: | ---: | ---: | ---: |\n";
  auto row = [&](const char* name, const FieldStats& f) {
    out += fmt::format("| {} | {:.3f} | {:.3f} | {:.0f} | {:.0f} |\n", name, f.mean, f.std, f.min, f.max);
  };
  row("Stars", r.stats.stars);
  row("Chars", r.stats.chars);
  row("Tokens", r.stats.tokens);
  return out;
}

/// Loads the Yelp tables, curates the sample and writes samples.jsonl and
/// corpus_summary.md under the output directory.
inline PrepareResult prepare_corpus(const RunConfig& c) {
  const auto spec = c.dataset_spec();
  spec.validate();
  for (const auto* p : {&c.yelp.business, &c.yelp.user, &c.yelp.review})
    if (p->empty()) throw HarnessError("prepare: business, user and review table paths are required");

  PrepareResult result;
  auto note = [&](const char* table, const std::vector<std::string>& warnings) {
    for (const auto& w : warnings) result.warnings.push_back(std::string(table) + " " + w);
  };

  auto businesses = load_table<RawBusiness>(c.yelp.business);
  result.skipped_business = businesses.skipped;
  note("business", businesses.warnings);
  auto kept = filter_businesses(businesses.records, spec);
  std::unordered_set<std::string> kept_ids;
  for (const auto& b : kept) kept_ids.insert(b.business_id);

  // The review table is large; keep only reviews of matching businesses.
  std::vector<RawReview> reviews;
  std::unordered_set<std::string> wanted_users;
  {
    std::ifstream in(c.yelp.review, std::ios::binary);
    if (!in) throw CorpusError("cannot open table " + c.yelp.review.string());
    auto r = stream_table<RawReview>(in, [&](RawReview&& rv) {
      if (!kept_ids.count(rv.business_id)) return;
      wanted_users.insert(rv.user_id);
      reviews.push_back(std::move(rv));
    });
    result.skipped_review = r.skipped;
    note("review", r.warnings);
  }
  std::vector<RawUser> users;
  {
    std::ifstream in(c.yelp.user, std::ios::binary);
    if (!in) throw CorpusError("cannot open table " + c.yelp.user.string());
    auto r = stream_table<RawUser>(in, [&](RawUser&& u) {
      if (wanted_users.count(u.user_id)) users.push_back(std::move(u));
    });
    result.skipped_user = r.skipped;
    note("user", r.warnings);
  }

  auto candidates = build_candidates(reviews, users, kept, spec);
  result.candidates = candidates.size();
  result.samples = select_unique(std::move(candidates), spec.sample_size, spec.seed);
  result.stats = summary_stats(result.samples);

  const RunLayout layout{c.out};
  std::filesystem::create_directories(layout.out);
  write_samples(layout.samples(), result.samples);
  write_file(layout.corpus_summary(), render_corpus_summary(c, result));
  return result;
}

// ---------------------------------------------------------------------------
// Run context

struct RunContext {
  RunConfig config;
  RunLayout layout;
  std::vector<ReviewSample> samples;
  std::string corpus_hash;
  std::string model_id;
  std::string fingerprint;
  std::optional<ReferenceTable> reference;

  const ReferenceDataset* reference_dataset() const {
    return reference ? reference->find(config.dataset) : nullptr;
  }
};

inline RunContext open_run(const RunConfig& config, std::string model_id) {
  config.validate();
  RunContext ctx;
  ctx.config = config;
  ctx.layout = RunLayout{config.out};
  if (!std::filesystem::exists(ctx.layout.samples()))
    throw HarnessError("curated corpus not found at " + ctx.layout.samples().string() +
                       " (run prepare first)");
  const auto bytes = read_file(ctx.layout.samples());
  ctx.corpus_hash = hex64(fnv1a64(bytes));
  ctx.samples = read_samples(ctx.layout.samples());
  if (ctx.samples.empty()) throw HarnessError("curated corpus is empty");
  ctx.model_id = std::move(model_id);
  ctx.fingerprint = run_fingerprint(config, ctx.corpus_hash, ctx.model_id);
  if (!config.reference.empty()) ctx.reference = ReferenceTable::load(config.reference);
  return ctx;
}

// ---------------------------------------------------------------------------
// Predictions

struct VariantRun {
  PromptVariant variant;
  std::vector<Prediction> predictions;
  std::size_t backend_errors = 0;
};

/// Writes the manifest for this fingerprint unless one already exists.
inline void write_manifest_once(const RunContext& ctx, const std::string& started_at) {
  const auto path = ctx.layout.manifest(ctx.fingerprint);
  if (std::filesystem::exists(path)) return;
  RunManifest m;
  m.config = ctx.config.snapshot();
  m.fingerprint = ctx.fingerprint;
  m.corpus_hash = ctx.corpus_hash;
  m.template_version = ctx.config.template_version;
  m.model_id = ctx.model_id;
  m.started_at = started_at;
  m.finished_at = utc_timestamp();
  for (const auto& v : ctx.config.variants)
    m.prediction_caches[v.name()] =
        std::filesystem::relative(ctx.layout.cache(v), ctx.layout.out).generic_string();
  write_file(path, m.to_json().dump(2) + "\n");
}

/// Runs (or resumes from cache) every configured variant.
inline std::vector<VariantRun> run_predictions(const RunContext& ctx, CompletionBackend& backend,
                                               const RetryPolicy& retry = {}) {
  if (backend.model_id() != ctx.model_id)
    throw HarnessError("backend model '" + backend.model_id() + "' does not match run model '" +
                       ctx.model_id + "'");
  const auto started_at = utc_timestamp();
  std::vector<VariantRun> runs;
  for (const auto& v : ctx.config.variants) {
    PredictionCache cache(ctx.layout.cache(v));
    BatchOptions opts;
    opts.concurrency = ctx.config.concurrency;
    opts.retry = retry;
    opts.cache = &cache;
    opts.template_version = ctx.config.template_version;
    VariantRun run{v, predict_batch(ctx.samples, v, backend, ctx.config.decoding, opts), 0};
    for (const auto& p : run.predictions)
      if (!p.error.empty()) ++run.backend_errors;
    runs.push_back(std::move(run));
  }
  write_manifest_once(ctx, started_at);
  return runs;
}

/// Loads one variant's predictions from its cache only; throws naming the
/// variant when any sample is missing.
inline VariantRun cached_run(const RunContext& ctx, const PromptVariant& variant) {
  const auto path = ctx.layout.cache(variant);
  PredictionCache cache(path);
  VariantRun run{variant, {}, 0};
  std::size_t missing = 0;
  for (const auto& s : ctx.samples) {
    auto hit = cache.find({s.review_id, variant.name(), ctx.model_id, ctx.config.template_version,
                           ctx.config.decoding.cache_key()});
    if (!hit) {
      ++missing;
      continue;
    }
    run.predictions.push_back(std::move(*hit));
  }
  if (missing > 0)
    throw HarnessError(fmt::format(
        "missing predictions for variant {}: {} of {} samples have no cached prediction for model "
        "'{}' in {} (run predict first)",
        variant.name(), missing, ctx.samples.size(), ctx.model_id, path.string()));
  return run;
}

inline std::vector<LabeledPrediction> label(std::span<const ReviewSample> samples,
                                            std::span<const Prediction> predictions) {
  std::unordered_map<std::string, const Prediction*> by_id;
  for (const auto& p : predictions) by_id.emplace(p.review_id, &p);
  std::vector<LabeledPrediction> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    auto it = by_id.find(s.review_id);
    if (it == by_id.end() || !it->second->rating)
      throw HarnessError("no usable prediction for review " + s.review_id);
    out.push_back({s.review_id, *it->second->rating, s.stars, it->second->imputed});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report scaffolding

inline std::vector<std::string> report_caveats() {
  return {
      "Gap bins are equal-frequency quintiles of the sorted gaps (ties broken by review_id); "
      "bin sizes differ by at most one.",
      "Matrix axes round user and business averages half-up and clamp them to 1..5; routing uses "
      "the unrounded averages.",
      "Macro-F1 averages per-class F1 over classes present in the labels or the predictions; "
      "classes absent from both are skipped.",
      "Unparseable generations are retried once, then imputed as 3 stars and flagged; metrics "
      "are shown with and without imputed rows.",
      "Micro-F1 equals accuracy for single-label predictions.",
      "McNemar uses the exact binomial test when b + c <= 25 and the continuity-corrected "
      "chi-square test otherwise.",
  };
}

inline std::string describe_decoding(const DecodingParams& d) {
  return fmt::format("temperature {:.2f}, max_tokens {}, seed {}", d.temperature, d.max_tokens,
                     d.seed ? std::to_string(*d.seed) : std::string("none"));
}

inline StudyReport report_skeleton(const RunContext& ctx, int study, std::string title) {
  StudyReport r;
  r.study = study;
  r.title = std::move(title);
  r.manifest_fingerprint = ctx.fingerprint;
  r.meta = {{"Dataset", ctx.config.dataset},
            {"Samples", std::to_string(ctx.samples.size())},
            {"Template", ctx.config.template_version},
            {"Model", ctx.model_id},
            {"Decoding", describe_decoding(ctx.config.decoding)}};
  r.caveats = report_caveats();
  return r;
}

inline Table delta_table(std::string id, std::string title, const DeltaTable& deltas,
                         const std::string& source) {
  Table t{std::move(id), std::move(title),
          {"Cell", "Reference cell", "Report", "Published", "Delta", "Relative"}, {}, {}};
  for (const auto& row : deltas.rows)
    t.rows.push_back({Cell::text(row.cell), Cell::text(row.baseline), Cell::number(row.value),
                      Cell::number(row.baseline_value), Cell::delta(row.abs_delta),
                      row.rel_delta_pct ? Cell::percent(*row.rel_delta_pct) : Cell::absent()});
  if (!source.empty()) t.notes.push_back("Published values: " + source + ".");
  if (!deltas.unmatched.empty()) {
    std::string note = "No published counterpart: ";
    for (std::size_t i = 0; i < deltas.unmatched.size(); ++i)
      note += (i ? ", " : "") + deltas.unmatched[i];
    t.notes.push_back(note);
  }
  return t;
}

inline std::string source_of(const ReferenceDataset& ref, const std::string& study) {
  auto it = ref.sources.find(study);
  return it == ref.sources.end() ? std::string() : it->second;
}

inline Table missing_reference_table(std::string id, std::string title, const RunContext& ctx) {
  Table t{std::move(id), std::move(title), {"Cell"}, {}, {}};
  t.notes.push_back(ctx.reference ? "No published values for dataset " + ctx.config.dataset + "."
                                  : "Published reference table not loaded.");
  return t;
}

// ---------------------------------------------------------------------------
// Study 1: variant comparison

struct Study1Row {
  PromptVariant variant;
  std::size_t n = 0;
  double macro_f1 = 0.0;
  double rmse = 0.0;
  std::optional<double> macro_f1_excl_imputed;
  std::optional<double> rmse_excl_imputed;
  std::size_t imputed = 0;
  std::size_t backend_errors = 0;
  std::optional<McNemarResult> vs_none;
};

inline std::vector<Study1Row> evaluate_study1(std::span<const ReviewSample> samples,
                                              std::span<const VariantRun> runs) {
  const VariantRun* none = nullptr;
  for (const auto& r : runs)
    if (r.variant.format == PromptFormat::none) none = &r;
  std::vector<int> none_preds;
  std::vector<int> actuals;
  for (const auto& s : samples) actuals.push_back(s.stars);
  if (none)
    for (const auto& lp : label(samples, none->predictions)) none_preds.push_back(lp.predicted);

  std::vector<Study1Row> rows;
  for (const auto& run : runs) {
    const auto pairs = label(samples, run.predictions);
    Study1Row row;
    row.variant = run.variant;
    row.n = pairs.size();
    row.macro_f1 = macro_f1(pairs);
    row.rmse = rmse(pairs);
    const auto clean = without_imputed(pairs);
    row.imputed = pairs.size() - clean.size();
    if (!clean.empty()) {
      row.macro_f1_excl_imputed = macro_f1(clean);
      row.rmse_excl_imputed = rmse(clean);
    }
    row.backend_errors = run.backend_errors;
    if (none && run.variant.format != PromptFormat::none) {
      std::vector<int> preds;
      for (const auto& lp : pairs) preds.push_back(lp.predicted);
      row.vs_none = mcnemar(preds, none_preds, actuals);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline StudyReport build_study1_report(const RunContext& ctx, std::span<const Study1Row> rows) {
  auto r = report_skeleton(ctx, 1, "Study 1: prompt variant comparison");
  r.meta.emplace_back("Variants", std::to_string(rows.size()));

  Table metrics{"metrics",
                "Metrics by variant",
                {"Variant", "n", "Macro-F1", "RMSE", "Macro-F1 (excl. imputed)",
                 "RMSE (excl. imputed)", "Imputed", "Status"},
                {},
                {}};
  auto opt = [](const std::optional<double>& v) { return v ? Cell::number(*v) : Cell::absent(); };
  for (const auto& row : rows) {
    metrics.rows.push_back(
        {Cell::text(row.variant.name()), Cell::integer(static_cast<std::int64_t>(row.n)),
         Cell::number(row.macro_f1), Cell::number(row.rmse), opt(row.macro_f1_excl_imputed),
         opt(row.rmse_excl_imputed), Cell::integer(static_cast<std::int64_t>(row.imputed)),
         Cell::text(row.backend_errors == 0
                        ? "complete"
                        : fmt::format("incomplete ({} backend errors)", row.backend_errors))});
  }
  r.tables.push_back(std::move(metrics));

  const bool any_test = std::any_of(rows.begin(), rows.end(),
                                    [](const Study1Row& x) { return x.vs_none.has_value(); });
  if (any_test) {
    Table sig{"mcnemar",
              "McNemar test against None (two-sided)",
              {"Variant", "b (variant only correct)", "c (None only correct)", "Method", "Statistic",
               "p", "p < .05"},
              {},
              {}};
    for (const auto& row : rows) {
      if (!row.vs_none) continue;
      const auto& m = *row.vs_none;
      sig.rows.push_back({Cell::text(row.variant.name()), Cell::integer(m.b), Cell::integer(m.c),
                          Cell::text(to_string(m.method)),
                          m.statistic ? Cell::number(*m.statistic, 4) : Cell::absent(),
                          Cell::number(m.p_value, 4), Cell::text(m.p_value < 0.05 ? "yes" : "no")});
    }
    r.tables.push_back(std::move(sig));
  }

  if (const auto* ref = ctx.reference_dataset(); ref && !ref->study1.empty()) {
    std::vector<MetricCell> cells;
    for (const auto& row : rows) {
      cells.push_back({"macro_f1/" + row.variant.name(), row.macro_f1});
      cells.push_back({"rmse/" + row.variant.name(), row.rmse});
    }
    r.tables.push_back(delta_table("reference_deltas", "Deltas against published values",
                                   compare_to_reference(cells, ref->study1),
                                   source_of(*ref, "study1")));

    Table pub{"published_comparisons",
              "Published relative changes (JSON-UBO against its baselines)",
              {"Cell", "Value", "Baseline", "Baseline value", "Relative"},
              {},
              {}};
    for (const auto& d : published_comparisons(*ref))
      pub.rows.push_back({Cell::text(d.cell), Cell::number(d.value), Cell::text(d.baseline),
                          Cell::number(d.baseline_value),
                          d.rel_delta_pct ? Cell::percent(*d.rel_delta_pct) : Cell::absent()});
    r.tables.push_back(std::move(pub));
  } else {
    r.tables.push_back(
        missing_reference_table("reference_deltas", "Deltas against published values", ctx));
  }
  return r;
}

inline StudyReport run_study1(const RunContext& ctx, CompletionBackend& backend,
                              const RetryPolicy& retry = {}) {
  const auto runs = run_predictions(ctx, backend, retry);
  return build_study1_report(ctx, evaluate_study1(ctx.samples, runs));
}

inline StudyReport run_study1(const RunConfig& config) {
  auto backend = make_backend(config.backend);
  const auto ctx = open_run(config, backend->model_id());
  return run_study1(ctx, *backend, retry_policy(config.backend));
}

// ---------------------------------------------------------------------------
// Study 2: expectation gaps

struct Study2Result {
  std::vector<BinSummary> user;
  std::vector<BinSummary> business;
};

inline Study2Result evaluate_study2(std::span<const ReviewSample> samples,
                                    std::span<const Prediction> predictions) {
  const auto pairs = label(samples, predictions);
  const auto index = index_by_review(pairs);
  const auto records = gap_records(samples);
  Study2Result r;
  r.user = bin_metrics(bin_quintiles(records, GapKind::user), index);
  r.business = bin_metrics(bin_quintiles(records, GapKind::business), index);
  return r;
}

inline StudyReport build_study2_report(const RunContext& ctx, const PromptVariant& variant,
                                       const Study2Result& result) {
  auto r = report_skeleton(ctx, 2, "Study 2: expectation gap analysis");
  r.meta.emplace_back("Variant", variant.name());

  auto bins_table = [](std::string id, std::string title, std::span<const BinSummary> bins) {
    Table t{std::move(id), std::move(title), {"Metric"}, {}, {}};
    for (const auto& b : bins) t.columns.push_back(kBinLabels.at(static_cast<std::size_t>(b.index)));
    std::vector<Cell> gap{Cell::text("Mean gap")}, n{Cell::text("n")}, micro{Cell::text("Micro-F1")},
        macro{Cell::text("Macro-F1")}, err{Cell::text("RMSE")};
    for (const auto& b : bins) {
      gap.push_back(Cell::number(b.mean_gap));
      n.push_back(Cell::integer(static_cast<std::int64_t>(b.n)));
      micro.push_back(Cell::number(b.micro_f1));
      macro.push_back(Cell::number(b.macro_f1));
      err.push_back(Cell::number(b.rmse));
    }
    t.rows = {gap, n, micro, macro, err};
    return t;
  };
  r.tables.push_back(bins_table("user_bins", "User-average gap bins", result.user));
  r.tables.push_back(bins_table("business_bins", "Business-average gap bins", result.business));

  if (const auto* ref = ctx.reference_dataset(); ref && !ref->study2.empty()) {
    std::vector<MetricCell> cells;
    for (const auto& [kind, bins] : {std::pair{"user", &result.user}, std::pair{"business", &result.business}})
      for (const auto& b : *bins) {
        const auto suffix = "/bin" + std::to_string(b.index);
        cells.push_back({std::string(kind) + "/mean_gap" + suffix, b.mean_gap});
        cells.push_back({std::string(kind) + "/micro_f1" + suffix, b.micro_f1});
        cells.push_back({std::string(kind) + "/rmse" + suffix, b.rmse});
      }
    r.tables.push_back(delta_table("reference_deltas", "Deltas against published values",
                                   compare_to_reference(cells, ref->study2),
                                   source_of(*ref, "study2")));
  } else {
    r.tables.push_back(
        missing_reference_table("reference_deltas", "Deltas against published values", ctx));
  }
  return r;
}

inline StudyReport run_study2(const RunContext& ctx, const VariantRun& run) {
  return build_study2_report(ctx, run.variant, evaluate_study2(ctx.samples, run.predictions));
}

inline StudyReport run_study2(const RunConfig& config) {
  const auto ctx = open_run(config, backend_model_id(config.backend));
  return run_study2(ctx, cached_run(ctx, config.study_variant));
}

// ---------------------------------------------------------------------------
// Study 3: reference alignment

struct RouteSummary {
  Route route = Route::local;
  std::size_t n = 0;
  std::optional<double> micro_f1;
  std::optional<double> rmse;
};

struct Study3Result {
  ErrorMatrix matrix;
  std::vector<RoutingDecision> decisions;
  std::array<RouteSummary, 2> routes{};
};

inline Study3Result evaluate_study3(std::span<const ReviewSample> samples,
                                    std::span<const Prediction> predictions, double threshold) {
  const auto pairs = label(samples, predictions);
  const auto index = index_by_review(pairs);
  Study3Result r;
  r.matrix = build_error_matrix(samples, index);
  std::array<std::vector<LabeledPrediction>, 2> by_route;
  for (const auto& s : samples) {
    auto d = route(s, threshold);
    by_route[d.decision == Route::local ? 0 : 1].push_back(index.at(s.review_id));
    r.decisions.push_back(std::move(d));
  }
  for (std::size_t i = 0; i < 2; ++i) {
    auto& summary = r.routes[i];
    summary.route = i == 0 ? Route::local : Route::escalate;
    summary.n = by_route[i].size();
    if (!by_route[i].empty()) {
      summary.micro_f1 = micro_f1(by_route[i]);
      summary.rmse = rmse(by_route[i]);
    }
  }
  return r;
}

inline StudyReport build_study3_report(const RunContext& ctx, const PromptVariant& variant,
                                       const Study3Result& result) {
  auto r = report_skeleton(ctx, 3, "Study 3: reference alignment");
  r.meta.emplace_back("Variant", variant.name());
  r.meta.emplace_back("Routing threshold", fmt::format("{:.2f}", ctx.config.threshold));

  Table micro{"matrix", "Micro-F1 by user average (UA, rows) and business average (BA, columns)",
              {"UA \\ BA", "1", "2", "3", "4", "5"}, {}, {}};
  Table counts{"matrix_n", "Samples per cell", {"UA \\ BA", "1", "2", "3", "4", "5"}, {}, {}};
  for (int ua = 1; ua <= kMaxStars; ++ua) {
    std::vector<Cell> mrow{Cell::text(std::to_string(ua))}, nrow{Cell::text(std::to_string(ua))};
    for (int ba = 1; ba <= kMaxStars; ++ba) {
      const auto& cell = result.matrix.at(ua, ba);
      mrow.push_back(cell.micro_f1 ? Cell::number(*cell.micro_f1) : Cell::absent());
      nrow.push_back(Cell::integer(static_cast<std::int64_t>(cell.n)));
    }
    micro.rows.push_back(std::move(mrow));
    counts.rows.push_back(std::move(nrow));
  }
  r.tables.push_back(std::move(micro));
  r.tables.push_back(std::move(counts));

  Table routing{"routing",
                "Alignment routing (local when |user average - business average| <= threshold)",
                {"Route", "n", "Share", "Micro-F1", "RMSE"},
                {},
                {}};
  const auto total = static_cast<double>(result.decisions.size());
  for (const auto& s : result.routes)
    routing.rows.push_back({Cell::text(to_string(s.route)), Cell::integer(static_cast<std::int64_t>(s.n)),
                            Cell::number(total > 0 ? static_cast<double>(s.n) / total : 0.0),
                            s.micro_f1 ? Cell::number(*s.micro_f1) : Cell::absent(),
                            s.rmse ? Cell::number(*s.rmse) : Cell::absent()});
  r.tables.push_back(std::move(routing));

  if (const auto* ref = ctx.reference_dataset(); ref && !ref->study3.empty()) {
    std::vector<MetricCell> cells;
    for (int ua = 1; ua <= kMaxStars; ++ua)
      for (int ba = 1; ba <= kMaxStars; ++ba)
        if (const auto& cell = result.matrix.at(ua, ba); cell.micro_f1)
          cells.push_back({fmt::format("micro_f1/ua{}/ba{}", ua, ba), *cell.micro_f1});
    r.tables.push_back(delta_table("reference_deltas", "Deltas against published values",
                                   compare_to_reference(cells, ref->study3),
                                   source_of(*ref, "study3")));
  } else {
    r.tables.push_back(
        missing_reference_table("reference_deltas", "Deltas against published values", ctx));
  }
  return r;
}

inline StudyReport run_study3(const RunContext& ctx, const VariantRun& run) {
  return build_study3_report(ctx, run.variant,
                             evaluate_study3(ctx.samples, run.predictions, ctx.config.threshold));
}

inline StudyReport run_study3(const RunConfig& config) {
  const auto ctx = open_run(config, backend_model_id(config.backend));
  return run_study3(ctx, cached_run(ctx, config.study_variant));
}

// ---------------------------------------------------------------------------
// Combined report

/// All three studies from cached predictions only; never calls a backend.
inline std::vector<StudyReport> build_all_reports(const RunConfig& config) {
  const auto ctx = open_run(config, backend_model_id(config.backend));
  std::vector<VariantRun> runs;
  for (const auto& v : config.variants) runs.push_back(cached_run(ctx, v));
  const auto study_run = cached_run(ctx, config.study_variant);
  return {build_study1_report(ctx, evaluate_study1(ctx.samples, runs)), run_study2(ctx, study_run),
          run_study3(ctx, study_run)};
}

inline std::string render_combined(std::span<const StudyReport> reports, ReportFormat f) {
  std::string out;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    if (f == ReportFormat::markdown) {
      if (i > 0) out += "\n";
      out += render_markdown(reports[i]);
      continue;
    }
    // CSV: one header, table ids prefixed with the study number.
    const auto rows = parse_csv(render_csv(reports[i]));
    if (i == 0) out += "table,row,column,value\n";
    for (std::size_t k = 1; k < rows.size(); ++k) {
      const auto& row = rows[k];
      out += detail::csv_field("study" + std::to_string(reports[i].study) + "." + row.at(0));
      for (std::size_t c = 1; c < row.size(); ++c) out += "," + detail::csv_field(row[c]);
      out += "\n";
    }
  }
  return out;
}

}  // namespace refsent
