#pragma once

#include <json.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "refsent/text.hpp"

namespace refsent {

/// Published metric values for one dataset, flattened to "cell" keys:
///   study1: "macro_f1/<model>", "rmse/<model>"
///   study2: "<user|business>/<mean_gap|micro_f1|rmse>/bin<k>"
///   study3: "micro_f1/ua<i>/ba<j>"
struct ReferenceDataset {
  std::string name;
  std::map<std::string, std::string> sources;  // study id -> provenance note
  std::map<std::string, double> study1;
  std::map<std::string, double> study2;
  std::map<std::string, double> study3;

  const std::map<std::string, double>& cells(int study) const {
    switch (study) {
      case 1:
        return study1;
      case 2:
        return study2;
      case 3:
        return study3;
    }
    throw std::invalid_argument("unknown study id " + std::to_string(study));
  }
};

/// Models the published comparisons are made against (no supplementary info,
/// or fine-tuned encoders).
inline const std::vector<std::string>& reference_baselines() {
  static const std::vector<std::string> names = {"None", "DeBERTa", "RoBERTa", "BERT", "DistilBERT"};
  return names;
}

class ReferenceTable {
 public:
  static ReferenceTable from_json(const nlohmann::json& j) {
    ReferenceTable t;
    for (const auto& [name, ds] : j.at("datasets").items()) {
      ReferenceDataset d;
      d.name = name;
      if (auto it = ds.find("study1"); it != ds.end()) {
        d.sources["study1"] = it->value("source", "");
        for (const char* metric : {"macro_f1", "rmse"})
          for (const auto& [model, v] : it->at(metric).items())
            d.study1[std::string(metric) + "/" + model] = v.get<double>();
      }
      if (auto it = ds.find("study2"); it != ds.end()) {
        d.sources["study2"] = it->value("source", "");
        for (const char* kind : {"user", "business"})
          for (const char* metric : {"mean_gap", "micro_f1", "rmse"}) {
            const auto& values = it->at(kind).at(metric);
            for (std::size_t k = 0; k < values.size(); ++k)
              d.study2[std::string(kind) + "/" + metric + "/bin" + std::to_string(k)] =
                  values.at(k).get<double>();
          }
      }
      if (auto it = ds.find("study3"); it != ds.end()) {
        d.sources["study3"] = it->value("source", "");
        const auto& rows = it->at("micro_f1");
        for (std::size_t ua = 0; ua < rows.size(); ++ua)
          for (std::size_t ba = 0; ba < rows.at(ua).size(); ++ba)
            if (const auto& v = rows.at(ua).at(ba); !v.is_null())
              d.study3["micro_f1/ua" + std::to_string(ua + 1) + "/ba" + std::to_string(ba + 1)] =
                  v.get<double>();
      }
      t.datasets_.emplace(to_lower_ascii(name), std::move(d));
    }
    return t;
  }

  static ReferenceTable load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open reference table " + path.string());
    return from_json(nlohmann::json::parse(in));
  }

  const ReferenceDataset* find(std::string_view dataset) const {
    auto it = datasets_.find(to_lower_ascii(dataset));
    return it == datasets_.end() ? nullptr : &it->second;
  }

 private:
  std::map<std::string, ReferenceDataset> datasets_;
};

/// (value - baseline) / baseline, in percent.
inline double relative_change_percent(double value, double baseline) {
  if (baseline == 0.0) throw std::invalid_argument("relative change against a zero baseline");
  return (value - baseline) / baseline * 100.0;
}

struct MetricCell {
  std::string key;
  double value = 0.0;
};

struct DeltaRow {
  std::string cell;            // key of the compared cell
  double value = 0.0;          // value under comparison
  std::string baseline;        // names the reference cell
  double baseline_value = 0.0;
  double abs_delta = 0.0;
  std::optional<double> rel_delta_pct;  // absent when the baseline is zero
};

struct DeltaTable {
  std::vector<DeltaRow> rows;
  std::vector<std::string> unmatched;  // report cells with no published counterpart
};

/// Pairs each report cell with the published cell of the same key.
inline DeltaTable compare_to_reference(std::span<const MetricCell> report,
                                       const std::map<std::string, double>& reference,
                                       std::string_view baseline_prefix = "published ") {
  DeltaTable t;
  for (const auto& cell : report) {
    auto it = reference.find(cell.key);
    if (it == reference.end()) {
      t.unmatched.push_back(cell.key);
      continue;
    }
    DeltaRow row{cell.key, cell.value, std::string(baseline_prefix) + cell.key, it->second,
                 cell.value - it->second, std::nullopt};
    if (it->second != 0.0) row.rel_delta_pct = relative_change_percent(cell.value, it->second);
    t.rows.push_back(std::move(row));
  }
  return t;
}

/// The published headline arithmetic: `subject` against the no-context LLM
/// and, where it differs, against the best baseline per metric (highest
/// Macro-F1, lowest RMSE). Each row names its baseline.
inline std::vector<DeltaRow> published_comparisons(const ReferenceDataset& ds,
                                                   std::string_view subject = "JSON-UBO") {
  std::vector<DeltaRow> rows;
  for (const std::string metric : {"macro_f1", "rmse"}) {
    auto subject_it = ds.study1.find(metric + "/" + std::string(subject));
    if (subject_it == ds.study1.end()) continue;
    const bool higher_is_better = metric == "macro_f1";

    std::optional<std::pair<std::string, double>> best;
    for (const auto& name : reference_baselines()) {
      auto it = ds.study1.find(metric + "/" + name);
      if (it == ds.study1.end()) continue;
      if (!best || (higher_is_better ? it->second > best->second : it->second < best->second))
        best = {name, it->second};
    }
    std::vector<std::string> baselines;
    if (ds.study1.count(metric + "/None")) baselines.push_back("None");
    if (best && best->first != "None") baselines.push_back(best->first);

    for (const auto& b : baselines) {
      const double base = ds.study1.at(metric + "/" + b);
      rows.push_back({metric + "/" + std::string(subject), subject_it->second, metric + "/" + b, base,
                      subject_it->second - base, relative_change_percent(subject_it->second, base)});
    }
  }
  return rows;
}

}  // namespace refsent
