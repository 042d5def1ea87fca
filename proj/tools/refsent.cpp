// refsent: curate, predict, analyse and report.
//
//   refsent prepare --config run.json
//   refsent predict --config run.json --variant JSON-UBO,None
//   refsent study1 | study2 | study3 | report --config run.json
//
// Settings resolve as: command-line flag, then environment, then config
// file, then built-in default.

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "refsent/refsent.hpp"

namespace {

using refsent::RunConfig;

struct Overrides {
  std::string config;
  std::string dataset;
  std::vector<std::string> variants;
  std::string study_variant;
  std::string backend_url;
  std::string model;
  std::string mock;
  std::optional<double> threshold;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> sample_size;
  std::optional<std::size_t> concurrency;
  std::string out;
  std::string format;
  std::string business, user, review;
  std::string reference;
  bool no_reference = false;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--dataset", o.dataset, "restaurant or nightlife")
      ->check(CLI::IsMember({"restaurant", "nightlife"}, CLI::ignore_case));
  cmd->add_option("--variant", o.variants, "Comma-separated prompt variants")->delimiter(',');
  cmd->add_option("--study-variant", o.study_variant, "Variant analysed by studies 2 and 3");
  cmd->add_option("--backend-url", o.backend_url, "OpenAI-compatible completions endpoint");
  cmd->add_option("--model", o.model, "Model name sent to the endpoint");
  cmd->add_option("--mock", o.mock,
                  "Use a mock backend: fixed:<token>, round_business_average, scripted:<file>");
  cmd->add_option("--threshold", o.threshold, "Routing threshold on |UA - BA|");
  cmd->add_option("--seed", o.seed, "Sampling seed");
  cmd->add_option("--sample-size", o.sample_size, "Number of curated samples");
  cmd->add_option("--concurrency", o.concurrency, "Requests in flight");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--format", o.format, "markdown or csv")->check(CLI::IsMember({"markdown", "md", "csv"}));
  cmd->add_option("--business", o.business, "Yelp business table (JSON lines)");
  cmd->add_option("--user", o.user, "Yelp user table (JSON lines)");
  cmd->add_option("--review", o.review, "Yelp review table (JSON lines)");
  cmd->add_option("--reference", o.reference, "Published reference values (JSON)");
  cmd->add_flag("--no-reference", o.no_reference, "Skip comparison with published values");
}

RunConfig resolve(const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  if (c.reference.empty()) c.reference = REFSENT_REFERENCE_PATH;

  if (auto url = refsent::env_value(refsent::kBackendUrlEnv)) c.backend.url = *url;
  if (auto token = refsent::env_value(refsent::kBackendTokenEnv)) c.backend.api_key = *token;

  if (!o.dataset.empty()) c.dataset = refsent::to_lower_ascii(o.dataset);
  if (!o.variants.empty()) {
    c.variants.clear();
    for (const auto& v : o.variants) c.variants.push_back(refsent::PromptVariant::parse(v));
  }
  if (!o.study_variant.empty()) c.study_variant = refsent::PromptVariant::parse(o.study_variant);
  if (!o.backend_url.empty()) {
    c.backend.kind = "http";
    c.backend.url = o.backend_url;
  }
  if (!o.model.empty()) c.backend.model = o.model;
  if (!o.mock.empty()) {
    c.backend.kind = "mock";
    c.backend.mock_policy = o.mock;
  }
  if (o.threshold) c.threshold = *o.threshold;
  if (o.seed) c.seed = *o.seed;
  if (o.sample_size) c.sample_size = *o.sample_size;
  if (o.concurrency) c.concurrency = *o.concurrency;
  if (!o.out.empty()) c.out = o.out;
  if (!o.format.empty()) c.format = refsent::parse_report_format(o.format);
  if (!o.business.empty()) c.yelp.business = o.business;
  if (!o.user.empty()) c.yelp.user = o.user;
  if (!o.review.empty()) c.yelp.review = o.review;
  if (!o.reference.empty()) c.reference = o.reference;
  if (o.no_reference) c.reference.clear();
  c.validate();
  return c;
}

void write_report(const RunConfig& c, const refsent::StudyReport& r) {
  const auto path = refsent::emit_report(r, c.format, refsent::RunLayout{c.out}.reports());
  fmt::print("{}\n", path.string());
}

int cmd_prepare(const RunConfig& c) {
  const auto r = refsent::prepare_corpus(c);
  for (const auto& w : r.warnings) fmt::print(stderr, "warning: {}\n", w);
  fmt::print("{} samples from {} candidates (skipped lines: business {}, user {}, review {})\n",
             r.samples.size(), r.candidates, r.skipped_business, r.skipped_user, r.skipped_review);
  fmt::print("{}\n", refsent::RunLayout{c.out}.samples().string());
  return 0;
}

int cmd_predict(const RunConfig& c) {
  auto backend = refsent::make_backend(c.backend);
  const auto ctx = refsent::open_run(c, backend->model_id());
  const auto runs = refsent::run_predictions(ctx, *backend, refsent::retry_policy(c.backend));
  for (const auto& run : runs) {
    std::size_t failed = 0, imputed = 0;
    for (const auto& p : run.predictions) {
      failed += p.parse_failed;
      imputed += p.imputed;
    }
    fmt::print("{}: {} predictions, {} parse failures, {} imputed, {} backend errors\n",
               run.variant.name(), run.predictions.size(), failed, imputed, run.backend_errors);
    if (run.backend_errors > 0)
      fmt::print(stderr, "warning: variant {} is incomplete; rerun predict to retry\n",
                 run.variant.name());
  }
  return 0;
}

int cmd_study1(const RunConfig& c) {
  write_report(c, refsent::run_study1(c));
  return 0;
}

int cmd_report(const RunConfig& c) {
  const auto reports = refsent::build_all_reports(c);
  const refsent::RunLayout layout{c.out};
  for (const auto& r : reports) refsent::emit_report(r, c.format, layout.reports());
  const auto path = layout.out / ("report" + std::string(refsent::extension(c.format)));
  refsent::write_file(path, refsent::render_combined(reports, c.format));
  fmt::print("{}\n", path.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reference-point sentiment evaluation harness"};
  app.require_subcommand(1);

  Overrides o;
  auto* prepare = app.add_subcommand("prepare", "Curate the review sample");
  auto* predict = app.add_subcommand("predict", "Run (or resume) predictions per variant");
  auto* study1 = app.add_subcommand("study1", "Variant comparison (runs missing predictions)");
  auto* study2 = app.add_subcommand("study2", "Expectation gap bins (cached predictions only)");
  auto* study3 = app.add_subcommand("study3", "UA x BA matrix and routing (cached predictions only)");
  auto* report = app.add_subcommand("report", "All studies from cached predictions");
  for (auto* cmd : {prepare, predict, study1, study2, study3, report}) add_common(cmd, o);

  CLI11_PARSE(app, argc, argv);

  try {
    const auto config = resolve(o);
    if (prepare->parsed()) return cmd_prepare(config);
    if (predict->parsed()) return cmd_predict(config);
    if (study1->parsed()) return cmd_study1(config);
    if (study2->parsed()) {
      write_report(config, refsent::run_study2(config));
      return 0;
    }
    if (study3->parsed()) {
      write_report(config, refsent::run_study3(config));
      return 0;
    }
    if (report->parsed()) return cmd_report(config);
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 2;
}
