// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any fails.
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>

#include "support.hpp"

using namespace refsent;
namespace ts = testing_support;
namespace oracle = testing_support::oracle;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;
};

#define CHECK_OR_FAIL(cond, msg)                      \
  do {                                                \
    if (!(cond)) return Outcome{false, (msg)};        \
  } while (0)

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

Outcome metric_oracle() {
  std::mt19937_64 rng(99);
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (int i = 0; i < 500; ++i) {
    const auto in = oracle::random_instance(rng, 20);
    const auto lp = oracle::labeled(in);
    worst = std::max({worst, std::abs(macro_f1(lp) - oracle::macro_f1(in)),
                      std::abs(micro_f1(lp) - oracle::micro_f1(in)), std::abs(rmse(lp) - oracle::rmse(in))});
  }
  const double took = seconds_since(t0);
  CHECK_OR_FAIL(worst <= 1e-9, fmt::format("max deviation {:.3g}", worst));
  CHECK_OR_FAIL(took < 5.0, fmt::format("took {:.2f}s", took));
  return {true, fmt::format("500 instances, max deviation {:.3g}, {:.3f}s", worst, took)};
}

Outcome micro_equals_accuracy() {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 1000; ++i) {
    const auto lp = oracle::labeled(oracle::random_instance(rng, 30));
    CHECK_OR_FAIL(micro_f1(lp) == accuracy(lp), fmt::format("instance {}", i));
  }
  return {true, "1000 instances, bitwise equal"};
}

Outcome mcnemar_exact() {
  for (std::int64_t n = 0; n <= kMcNemarExactLimit; ++n)
    for (std::int64_t b = 0; b <= n; ++b) {
      const auto r = mcnemar_from_counts(b, n - b);
      CHECK_OR_FAIL(r.method == McNemarMethod::exact, fmt::format("b={} c={} not exact", b, n - b));
      CHECK_OR_FAIL(std::abs(r.p_value - oracle::mcnemar_exact(b, n - b)) <= 1e-9,
                    fmt::format("b={} c={} p={}", b, n - b, r.p_value));
    }
  const double p010 = mcnemar_from_counts(0, 10).p_value;
  CHECK_OR_FAIL(std::abs(p010 - 0.001953) < 5e-7, fmt::format("b=0,c=10 gives {}", p010));
  for (std::int64_t k = 0; k <= 30; ++k)
    CHECK_OR_FAIL(mcnemar_from_counts(k, k).p_value == 1.0, fmt::format("b=c={} not 1", k));
  return {true, fmt::format("b+c<={} matches oracle; b=0,c=10 p={:.6f}", kMcNemarExactLimit, p010)};
}

Outcome prompt_goldens() {
  std::size_t files = 0;
  for (const auto& s : ts::canonical_samples()) {
    CHECK_OR_FAIL(build_prompt(s, PromptVariant{}) == build_base_prompt(s), "None differs from base");
    for (const auto& v : PromptVariant::all()) {
      const auto path = ts::kGolden / (s.review_id + "__" + v.name() + ".txt");
      CHECK_OR_FAIL(std::filesystem::exists(path), "missing " + path.filename().string());
      CHECK_OR_FAIL(ts::slurp(path) == build_prompt(s, v), "mismatch " + path.filename().string());
      ++files;
      if (v.format != PromptFormat::json) continue;
      const auto prompt = build_prompt(s, v);
      const auto at = prompt.find(std::string(kJsonExplanation) + "\n");
      CHECK_OR_FAIL(at != std::string::npos, "no JSON block in " + v.name());
      const auto start = at + kJsonExplanation.size() + 1;
      const auto obj = nlohmann::json::parse(prompt.substr(start, prompt.find('\n', start) - start));
      std::set<std::string> want;
      if (v.fields.user) want.insert("user_average");
      if (v.fields.business) want.insert("business_average");
      if (v.fields.other) want.insert({"business_name", "open_days_per_week", "hours"});
      std::set<std::string> got;
      for (const auto& [k, _] : obj.items()) got.insert(k);
      CHECK_OR_FAIL(got == want, "JSON keys differ for " + v.name());
    }
  }
  CHECK_OR_FAIL(files == 21, fmt::format("{} goldens", files));
  return {true, "21 goldens byte-equal; None == base; JSON keys exact"};
}

Outcome gaps_and_binning() {
  for (int s = 1; s <= 5; ++s) {
    const auto g = compute_gaps(ts::make_sample("z", s, s, s));
    CHECK_OR_FAIL(g.user == 0.0 && g.business == 0.0, "nonzero gap at equality");
  }
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> avg(1.0, 5.0);
  std::uniform_int_distribution<int> star(1, 5);
  for (std::size_t n : {5u, 17u, 50u, 503u}) {
    std::vector<ReviewSample> ss;
    for (std::size_t i = 0; i < n; ++i)
      ss.push_back(ts::make_sample(fmt::format("q{:04d}", i), star(rng), avg(rng), avg(rng)));
    for (auto kind : {GapKind::user, GapKind::business}) {
      const auto bins = bin_quintiles(gap_records(ss), kind);
      std::size_t lo = n, hi = 0, total = 0;
      for (std::size_t b = 0; b < bins.size(); ++b) {
        lo = std::min(lo, bins[b].members.size());
        hi = std::max(hi, bins[b].members.size());
        total += bins[b].members.size();
        if (b > 0) CHECK_OR_FAIL(bins[b - 1].mean_gap <= bins[b].mean_gap, "mean gaps decrease");
      }
      CHECK_OR_FAIL(total == n && hi - lo <= 1, fmt::format("n={} sizes uneven", n));
      if (n == 503) {
        std::vector<std::size_t> sizes;
        for (const auto& b : bins) sizes.push_back(b.members.size());
        CHECK_OR_FAIL(sizes == (std::vector<std::size_t>{101, 101, 101, 100, 100}), "503 split");
      }
    }
  }
  return {true, "zero gaps at equality; sizes within 1; means non-decreasing; 503 -> 101x3,100x2"};
}

Outcome error_matrix() {
  const auto fx = ts::matrix_fixture();
  std::vector<LabeledPrediction> lp;
  for (const auto& s : fx.samples) lp.push_back({s.review_id, fx.predicted.at(s.review_id), s.stars, false});
  const auto m = build_error_matrix(fx.samples, index_by_review(lp));
  const auto want = oracle::matrix_cells(fx.samples, fx.predicted);
  std::size_t empty = 0;
  for (int ua = 1; ua <= 5; ++ua)
    for (int ba = 1; ba <= 5; ++ba) {
      const auto& cell = m.at(ua, ba);
      auto it = want.find({ua, ba});
      if (it == want.end()) {
        CHECK_OR_FAIL(cell.n == 0 && !cell.micro_f1, fmt::format("cell {},{} should be empty", ua, ba));
        ++empty;
        continue;
      }
      CHECK_OR_FAIL(cell.n == static_cast<std::size_t>(it->second.first) && cell.micro_f1 &&
                        *cell.micro_f1 == static_cast<double>(it->second.second) / it->second.first,
                    fmt::format("cell {},{}", ua, ba));
    }

  // Rendered grid shows "-" for every empty cell.
  ts::TempDir dir("accept-matrix");
  nlohmann::json script;
  for (const auto& [id, r] : fx.predicted) script[id] = std::to_string(r);
  std::ofstream(dir.path() / "script.json") << script.dump();
  RunConfig c;
  c.out = dir.path() / "run";
  c.backend.mock_policy = "scripted:" + (dir.path() / "script.json").string();
  c.variants = {PromptVariant::parse("JSON-UBO")};
  c.reference.clear();
  std::filesystem::create_directories(c.out);
  write_samples(RunLayout{c.out}.samples(), fx.samples);
  run_study1(c);
  const auto report = run_study3(c);
  std::size_t dashes = 0;
  for (const auto& t : report.tables)
    if (t.id == "matrix")
      for (const auto& row : t.rows)
        for (std::size_t i = 1; i < row.size(); ++i) dashes += detail::display(row[i]) == "-";
  CHECK_OR_FAIL(dashes == empty, fmt::format("{} dashes for {} empty cells", dashes, empty));
  return {true, fmt::format("25 samples match oracle; {} empty cells render '-'", empty)};
}

std::string run_pipeline(const std::filesystem::path& out) {
  auto c = RunConfig::load(ts::kFixtures / "e2e_config.json");
  c.out = out;
  prepare_corpus(c);
  auto backend = make_backend(c.backend);
  RetryPolicy quiet = retry_policy(c.backend);
  quiet.log = nullptr;
  const auto ctx = open_run(c, backend->model_id());
  run_predictions(ctx, *backend, quiet);
  run_study1(c);
  run_study2(c);
  run_study3(c);
  return render_combined(build_all_reports(c), ReportFormat::markdown);
}

Outcome deterministic_e2e() {
  const auto expected_path = ts::kFixtures / "expected" / "report.md";
  ts::TempDir a("accept-e2e"), b("accept-e2e");
  const auto t0 = Clock::now();
  const auto first = run_pipeline(a.path() / "run");
  const double took = seconds_since(t0);
  const auto second = run_pipeline(b.path() / "run");
  if (ts::update_golden()) write_file(expected_path, first);
  CHECK_OR_FAIL(first == second, "two runs differ");
  CHECK_OR_FAIL(std::filesystem::exists(expected_path), "missing expected report");
  CHECK_OR_FAIL(ts::slurp(expected_path) == first, "report differs from checked-in copy");
  CHECK_OR_FAIL(took < 10.0, fmt::format("took {:.2f}s", took));
  return {true, fmt::format("50 samples, byte-exact, {:.3f}s", took)};
}

Outcome paper_delta() {
  const auto ref = ReferenceTable::load(ts::kReference);
  auto rel = [&](const char* dataset, const char* cell, const char* base) {
    for (const auto& r : published_comparisons(*ref.find(dataset)))
      if (r.cell == cell && r.baseline == base && r.rel_delta_pct) return *r.rel_delta_pct;
    throw std::runtime_error(fmt::format("{} {} vs {} not found", dataset, cell, base));
  };
  struct Want {
    const char *dataset, *cell, *base;
    double pct;
  };
  const Want wants[] = {{"restaurant", "macro_f1/JSON-UBO", "macro_f1/None", 4.3},
                        {"restaurant", "rmse/JSON-UBO", "rmse/None", -16.4},
                        {"nightlife", "macro_f1/JSON-UBO", "macro_f1/RoBERTa", 1.6},
                        {"nightlife", "rmse/JSON-UBO", "rmse/RoBERTa", -9.1}};
  std::string got;
  for (const auto& w : wants) {
    const double v = rel(w.dataset, w.cell, w.base);
    CHECK_OR_FAIL(std::abs(v - w.pct) <= 0.05, fmt::format("{} {}: {:+.3f}% vs {:+.1f}%", w.dataset, w.cell, v, w.pct));
    got += fmt::format("{}{:+.2f}%", got.empty() ? "" : ", ", v);
  }
  return {true, got};
}

Outcome smoke() {
  std::optional<ts::StubCompletionServer> stub;
  std::atomic<int> calls{0};
  BackendConfig backend;
  backend.kind = "http";
  backend.max_attempts = 3;
  backend.retry_base_ms = 10;
  std::string where;
  if (const char* url = std::getenv("REFSENT_BACKEND_URL"); url && *url) {
    backend.url = url;
    if (const char* m = std::getenv("REFSENT_BACKEND_MODEL")) backend.model = m;
    if (const char* t = std::getenv("REFSENT_BACKEND_TOKEN")) backend.api_key = t;
    where = backend.url;
  } else {
    stub.emplace([&](const nlohmann::json& body, httplib::Response& res) {
      ts::StubCompletionServer::reply_text(res, ts::heuristic_model_reply(body["prompt"], calls++));
    });
    backend.url = stub->url();
    where = "local stub";
  }

  ts::TempDir dir("accept-smoke");
  auto c = RunConfig::load(ts::kFixtures / "e2e_config.json");
  c.out = dir.path() / "run";
  c.backend = backend;
  c.decoding = DecodingParams::greedy();
  prepare_corpus(c);
  auto http = make_backend(c.backend);
  auto retry = retry_policy(c.backend);
  retry.log = nullptr;
  const auto ctx = open_run(c, http->model_id());
  const auto runs = run_predictions(ctx, *http, retry);
  std::size_t total = 0, parsed = 0;
  for (const auto& r : runs)
    for (const auto& p : r.predictions) {
      ++total;
      parsed += !p.imputed;
    }
  const auto report = build_study1_report(ctx, evaluate_study1(ctx.samples, runs));
  const double share = static_cast<double>(parsed) / static_cast<double>(total);
  CHECK_OR_FAIL(share >= 0.95, fmt::format("parse success {:.1f}%", 100 * share));
  const auto md = render_markdown(report);
  CHECK_OR_FAIL(md.find("incomplete") == std::string::npos, "Study-1 report incomplete");
  std::size_t rows = 0;
  for (const auto& t : report.tables)
    if (t.id == "metrics") rows = t.rows.size();
  CHECK_OR_FAIL(rows == c.variants.size(), "metrics rows missing");
  return {true, fmt::format("{}: {}/{} parsed ({:.1f}%), {} variants complete", where, parsed, total,
                            100 * share, rows)};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"metric-oracle", metric_oracle},   {"micro-f1-equals-accuracy", micro_equals_accuracy},
      {"mcnemar-exact", mcnemar_exact},   {"prompt-goldens", prompt_goldens},
      {"gaps-and-binning", gaps_and_binning}, {"error-matrix", error_matrix},
      {"deterministic-e2e", deterministic_e2e}, {"published-deltas", paper_delta},
      {"smoke-live-endpoint", smoke},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.ok;
    std::cout << (o.ok ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
