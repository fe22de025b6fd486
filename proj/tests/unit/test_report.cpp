#include <doctest.h>

#include "mimi/format.hpp"
#include "mimi/report.hpp"

using namespace mimi;

namespace {

ReportEntry sample_entry(const std::string& label, double offset) {
  std::vector<ScoreRecord> records;
  for (std::size_t i = 0; i < 6; ++i) {
    records.push_back({i, 0.1 * double(i) + offset + 1.0 / 3.0, i < 3, Split::target});
  }
  return {label, make_report("ours", Threshold{0.45 + offset, 0.75}, std::move(records))};
}

}  // namespace

TEST_CASE("empty report set gives a header-only csv") {
  const std::string csv = emit_report({}, ReportFormat::csv);
  CHECK(csv.find('\n') == csv.size() - 1);
  CHECK(csv.substr(0, 12) == "label,method");
}

TEST_CASE("csv round-trips every value to full precision") {
  const std::vector<ReportEntry> entries{sample_entry("blobs", 0.0), sample_entry("stripes", 1e-9)};
  const Table t = parse_csv_table(emit_report(entries, ReportFormat::csv));
  CHECK(t.columns == report_columns());
  REQUIRE(t.rows.size() == 2);
  for (std::size_t r = 0; r < 2; ++r) {
    CHECK(t.rows[r] == report_cells(entries[r]));
    const auto& rep = entries[r].report;
    CHECK(parse_double(t.rows[r][2], "threshold") == rep.threshold.value);
    CHECK(parse_double(t.rows[r][4], "asr") == rep.asr);
    CHECK(parse_double(t.rows[r][6], "mean") == rep.member_stats.mean);
  }
}

TEST_CASE("text table prints the csv strings verbatim") {
  const std::vector<ReportEntry> entries{sample_entry("blobs", 0.0)};
  const std::string text = emit_report(entries, ReportFormat::text_table);
  for (const auto& cell : report_cells(entries[0])) {
    CAPTURE(cell);
    CHECK(text.find(cell) != std::string::npos);
  }
  // header, rule, one row
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
}

TEST_CASE("threshold table puts datasets in rows and encoders in columns") {
  const std::vector<ThresholdCell> cells{{"blobs", "enc-a", 0.0022},
                                         {"blobs", "enc-b", 0.0031},
                                         {"stripes", "enc-a", 0.004}};
  const Table t = threshold_table(cells);
  CHECK(t.columns == std::vector<std::string>{"dataset", "enc-a", "enc-b"});
  REQUIRE(t.rows.size() == 2);
  CHECK(t.rows[0] == std::vector<std::string>{"blobs", "0.0022", "0.0031"});
  CHECK(t.rows[1] == std::vector<std::string>{"stripes", "0.004", ""});
  CHECK(parse_csv_table(t.render(ReportFormat::csv)).rows == t.rows);
}

TEST_CASE("report format names") {
  CHECK(parse_report_format("csv") == ReportFormat::csv);
  CHECK(parse_report_format("text-table") == ReportFormat::text_table);
  CHECK_THROWS_AS(parse_report_format("xml"), std::invalid_argument);
}
