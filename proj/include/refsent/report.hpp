#pragma once

#include <fmt/format.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace refsent {

/// One table cell. Absent cells render as "-".
struct Cell {
  std::variant<std::monostate, double, std::int64_t, std::string> value;
  int precision = 3;
  bool signed_display = false;
  std::string suffix;

  static Cell absent() { return {}; }
  static Cell number(double v, int precision = 3) { return {v, precision, false, {}}; }
  static Cell integer(std::int64_t v) { return {v, 0, false, {}}; }
  static Cell text(std::string s) { return {std::move(s), 0, false, {}}; }
  static Cell percent(double v) { return {v, 1, true, "%"}; }
  static Cell delta(double v, int precision = 3) { return {v, precision, true, {}}; }

  bool is_absent() const { return std::holds_alternative<std::monostate>(value); }
};

struct Table {
  std::string id;
  std::string title;
  std::vector<std::string> columns;  // columns[0] heads the row-label column
  std::vector<std::vector<Cell>> rows;
  std::vector<std::string> notes;
};

struct StudyReport {
  int study = 0;
  std::string title;
  std::string manifest_fingerprint;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<Table> tables;
  std::vector<std::string> caveats;
};

enum class ReportFormat { markdown, csv };

inline ReportFormat parse_report_format(std::string_view s) {
  if (s == "markdown" || s == "md") return ReportFormat::markdown;
  if (s == "csv") return ReportFormat::csv;
  throw std::invalid_argument("unknown report format '" + std::string(s) + "'");
}

inline std::string_view extension(ReportFormat f) { return f == ReportFormat::markdown ? ".md" : ".csv"; }

namespace detail {

inline std::string display(const Cell& c) {
  return std::visit(
      [&](const auto& v) -> std::string {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, std::monostate>) {
          return "-";
        } else if constexpr (std::is_same_v<V, double>) {
          // Avoid "-0.000" for tiny negatives.
          double shown = v;
          if (fmt::format("{:.{}f}", std::abs(v), c.precision) ==
              fmt::format("{:.{}f}", 0.0, c.precision))
            shown = 0.0;
          return (c.signed_display ? fmt::format("{:+.{}f}", shown, c.precision)
                                   : fmt::format("{:.{}f}", shown, c.precision)) +
                 c.suffix;
        } else if constexpr (std::is_same_v<V, std::int64_t>) {
          return std::to_string(v) + c.suffix;
        } else {
          return v;
        }
      },
      c.value);
}

inline std::string md_escape(std::string s) {
  std::string out;
  for (char ch : s) {
    if (ch == '|') out += '\\';
    out += ch;
  }
  return out;
}

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  out += '"';
  return out;
}

// Shortest representation that parses back to the same double.
inline std::string csv_value(const Cell& c) {
  return std::visit(
      [](const auto& v) -> std::string {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, std::monostate>)
          return "-";
        else if constexpr (std::is_same_v<V, double>)
          return fmt::format("{}", v);
        else if constexpr (std::is_same_v<V, std::int64_t>)
          return std::to_string(v);
        else
          return v;
      },
      c.value);
}

}  // namespace detail

inline std::string render_markdown(const StudyReport& r) {
  std::string out = "# " + r.title + "\n\n";
  out += "- Manifest: " + r.manifest_fingerprint + "\n";
  for (const auto& [k, v] : r.meta) out += "- " + k + ": " + v + "\n";
  for (const auto& t : r.tables) {
    out += "\n## " + t.title + "\n\n";
    if (!t.rows.empty()) {
      out += "|";
      for (const auto& c : t.columns) out += " " + detail::md_escape(c) + " |";
      out += "\n|";
      for (std::size_t i = 0; i < t.columns.size(); ++i) out += i == 0 ? " --- |" : " ---: |";
      out += "\n";
      for (const auto& row : t.rows) {
        out += "|";
        for (const auto& cell : row) out += " " + detail::md_escape(detail::display(cell)) + " |";
        out += "\n";
      }
    }
    if (!t.notes.empty()) {
      if (!t.rows.empty()) out += "\n";
      for (const auto& n : t.notes) out += "_" + n + "_\n";
    }
  }
  out += "\n## Caveats\n\n";
  for (const auto& c : r.caveats) out += "- " + c + "\n";
  return out;
}

/// Long format: one line per cell, "table,row,column,value". Metadata and
/// caveats come first as tables "meta" and "caveats".
inline std::string render_csv(const StudyReport& r) {
  std::string out = "table,row,column,value\n";
  auto line = [&](std::string_view table, std::string_view row, std::string_view col,
                  std::string_view value) {
    out += detail::csv_field(table) + "," + detail::csv_field(row) + "," + detail::csv_field(col) +
           "," + detail::csv_field(value) + "\n";
  };
  line("meta", "study", "value", std::to_string(r.study));
  line("meta", "title", "value", r.title);
  line("meta", "manifest", "value", r.manifest_fingerprint);
  for (const auto& [k, v] : r.meta) line("meta", k, "value", v);
  for (std::size_t i = 0; i < r.caveats.size(); ++i)
    line("caveats", std::to_string(i + 1), "text", r.caveats[i]);
  for (const auto& t : r.tables)
    for (const auto& row : t.rows) {
      const std::string label = row.empty() ? std::string() : detail::display(row.front());
      for (std::size_t c = 1; c < row.size() && c < t.columns.size(); ++c)
        line(t.id, label, t.columns[c], detail::csv_value(row[c]));
    }
  return out;
}

inline std::string render(const StudyReport& r, ReportFormat f) {
  return f == ReportFormat::markdown ? render_markdown(r) : render_csv(r);
}

/// RFC 4180 subset: quoted fields with doubled quotes, LF or CRLF line ends.
inline std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, field_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
      continue;
    }
    if (ch == '"' && !field_started) {
      quoted = true;
      field_started = true;
    } else if (ch == ',') {
      row.push_back(std::move(field));
      field.clear();
      field_started = false;
    } else if (ch == '\n' || ch == '\r') {
      if (ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      field_started = false;
      rows.push_back(std::move(row));
      row.clear();
    } else {
      field += ch;
      field_started = true;
    }
  }
  if (field_started || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

/// Writes study<N>.md / study<N>.csv under `dir` and returns its path.
inline std::filesystem::path emit_report(const StudyReport& r, ReportFormat f,
                                         const std::filesystem::path& dir) {
  const auto path = dir / ("study" + std::to_string(r.study) + std::string(extension(f)));
  write_file(path, render(r, f));
  return path;
}

}  // namespace refsent
