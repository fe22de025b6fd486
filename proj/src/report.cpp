#include "mimi/report.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

#include "mimi/format.hpp"

namespace mimi {

ReportFormat parse_report_format(std::string_view name) {
  if (name == "csv") return ReportFormat::csv;
  if (name == "text" || name == "text-table" || name == "table") return ReportFormat::text_table;
  throw std::invalid_argument("unknown report format '" + std::string(name) +
                              "' (expected csv or text-table)");
}

const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> columns{
      "label",          "method",           "threshold",        "objective",
      "asr",            "member_count",     "member_mean",      "member_std",
      "member_q1",      "member_median",    "member_q3",        "nonmember_count",
      "nonmember_mean", "nonmember_std",    "nonmember_q1",     "nonmember_median",
      "nonmember_q3"};
  return columns;
}

namespace {

void append_stats(std::vector<std::string>& cells, const SummaryStats& s) {
  cells.push_back(std::to_string(s.count));
  for (double v : {s.mean, s.stddev, s.q1, s.median, s.q3}) cells.push_back(format_double(v));
}

}  // namespace

std::vector<std::string> report_cells(const ReportEntry& entry) {
  const AttackReport& r = entry.report;
  std::vector<std::string> cells{entry.label, r.method, format_double(r.threshold.value),
                                 format_double(r.threshold.objective), format_double(r.asr)};
  append_stats(cells, r.member_stats);
  append_stats(cells, r.nonmember_stats);
  return cells;
}

std::string Table::render(ReportFormat format) const {
  std::ostringstream out;
  if (format == ReportFormat::csv) {
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
      out << '\n';
    };
    line(columns);
    for (const auto& row : rows) line(row);
    return out.str();
  }
  std::vector<std::size_t> width(columns.size());
  for (std::size_t c = 0; c < columns.size(); ++c) width[c] = columns[c].size();
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size() && c < width.size(); ++c) {
      width[c] = std::max(width[c], row[c].size());
    }
  }
  auto line = [&](const std::vector<std::string>& cells) {
    std::string text;
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const std::string& cell = c < cells.size() ? cells[c] : std::string();
      if (c) text += "  ";
      text += cell;
      if (c + 1 < columns.size()) text.append(width[c] - cell.size(), ' ');
    }
    out << text << '\n';
  };
  line(columns);
  std::string rule;
  for (std::size_t c = 0; c < columns.size(); ++c) {
    if (c) rule += "  ";
    rule.append(width[c], '-');
  }
  out << rule << '\n';
  for (const auto& row : rows) line(row);
  return out.str();
}

Table report_table(std::span<const ReportEntry> entries) {
  Table t;
  t.columns = report_columns();
  for (const auto& e : entries) t.rows.push_back(report_cells(e));
  return t;
}

std::string emit_report(std::span<const ReportEntry> entries, ReportFormat format) {
  return report_table(entries).render(format);
}

Table parse_csv_table(std::string_view text) {
  Table t;
  std::istringstream in{std::string(text)};
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (header) {
      t.columns = std::move(cells);
      header = false;
    } else {
      if (cells.size() != t.columns.size()) {
        throw std::invalid_argument("csv row " + std::to_string(t.rows.size() + 1) + " has " +
                                    std::to_string(cells.size()) + " cells, header has " +
                                    std::to_string(t.columns.size()));
      }
      t.rows.push_back(std::move(cells));
    }
  }
  return t;
}

Table threshold_table(std::span<const ThresholdCell> cells) {
  std::vector<std::string> datasets, encoders;
  auto note = [](std::vector<std::string>& seen, const std::string& name) {
    if (std::find(seen.begin(), seen.end(), name) == seen.end()) seen.push_back(name);
  };
  for (const auto& c : cells) {
    note(datasets, c.dataset);
    note(encoders, c.encoder);
  }
  Table t;
  t.columns.push_back("dataset");
  t.columns.insert(t.columns.end(), encoders.begin(), encoders.end());
  for (const auto& d : datasets) {
    std::vector<std::string> row{d};
    row.resize(encoders.size() + 1);
    for (const auto& c : cells) {
      if (c.dataset != d) continue;
      const auto col = std::find(encoders.begin(), encoders.end(), c.encoder) - encoders.begin();
      row[std::size_t(col) + 1] = format_double(c.value);
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace mimi
