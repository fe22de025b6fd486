#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mimi/attack.hpp"

namespace mimi {

enum class ReportFormat { csv, text_table };

ReportFormat parse_report_format(std::string_view name);

/// One attack result with the label of the setting that produced it.
struct ReportEntry {
  std::string label;
  AttackReport report;
};

/// Column order shared by every report table.
const std::vector<std::string>& report_columns();

/// Cells of one entry in report_columns() order; numbers use format_double.
std::vector<std::string> report_cells(const ReportEntry& entry);

/// A table of pre-formatted cells. The text-table form pads the very same
/// strings the CSV form prints.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::string render(ReportFormat format) const;
};

Table report_table(std::span<const ReportEntry> entries);
std::string emit_report(std::span<const ReportEntry> entries, ReportFormat format);

/// Parses CSV written by Table::render (no quoting; cells never contain commas).
Table parse_csv_table(std::string_view text);

struct ThresholdCell {
  std::string dataset;
  std::string encoder;
  double value = 0.0;
};

/// Rows are datasets, columns are encoders, cells hold threshold values;
/// missing combinations are left empty. Order follows first appearance.
Table threshold_table(std::span<const ThresholdCell> cells);

}  // namespace mimi
