#include <catch2/catch_amalgamated.hpp>

#include "selpred/report.hpp"
#include "test_support.hpp"

using selpred::PlotSeries;
using selpred::RiskCoveragePoint;
using selpred::SummaryRow;
using test_support::TempDir;

namespace {

std::vector<RiskCoveragePoint> sample_curve() {
  std::vector<RiskCoveragePoint> curve;
  const double coverages[] = {1.0, 0.75, 0.5, 0.25};
  const double f1s[] = {0.7, 0.78, 0.85, 0.9};
  for (int i = 0; i < 4; ++i) {
    RiskCoveragePoint pt;
    pt.threshold = 0.2 * i;
    pt.coverage = coverages[i];
    pt.n_retained = static_cast<std::size_t>(coverages[i] * 4);
    pt.sel_accuracy = f1s[i];
    pt.sel_macro_f1 = f1s[i];
    pt.sel_qwk = f1s[i];
    curve.push_back(pt);
  }
  return curve;
}

std::size_t count_occurrences(const std::string& text, const std::string& needle) {
  std::size_t count = 0, pos = 0;
  while ((pos = text.find(needle, pos)) != std::string::npos) {
    ++count;
    pos += needle.size();
  }
  return count;
}

}  // namespace

TEST_CASE("summary table renders four decimals and empty undefined cells") {
  TempDir dir("summary");
  std::vector<SummaryRow> rows;
  rows.push_back({"sicova", "ep-20", 20, 0.7, 0.9258, 0.81234567, 0.95});
  const auto path = dir.path / "summary.csv";
  selpred::emit_summary_table(path, rows);
  const std::string text = test_support::read_file(path);
  CHECK(text ==
        "method,checkpoint_id,pretrain_epoch,coverage,sel_accuracy,"
        "sel_macro_f1,sel_qwk\n"
        "sicova,ep-20,20,0.7000,0.9258,0.8123,0.9500\n");

  rows.push_back({"sicova", "ep-40", 40, 0.0, std::nullopt, std::nullopt,
                  std::nullopt});
  selpred::emit_summary_table(path, rows);
  const std::string text2 = test_support::read_file(path);
  CHECK(text2.find("sicova,ep-40,40,0.0000,,,\n") != std::string::npos);

  CHECK_THROWS_AS(selpred::emit_summary_table(dir.path / "x.csv", {}),
                  selpred::UsageError);
}

TEST_CASE("risk-coverage plot is deterministic with one polyline per series") {
  TempDir dir("plot");
  const PlotSeries s1{"ep-20", sample_curve(), 1};
  const PlotSeries s2{"ep-40", sample_curve(), 1};

  selpred::emit_risk_coverage_plot(dir.path / "a.svg", {s1, s2});
  selpred::emit_risk_coverage_plot(dir.path / "b.svg", {s1, s2});
  const std::string svg = test_support::read_file(dir.path / "a.svg");
  CHECK(svg == test_support::read_file(dir.path / "b.svg"));

  CHECK(count_occurrences(svg, "<polyline") == 2);
  CHECK(count_occurrences(svg, "<circle") == 2);
  CHECK(svg.find(">ep-20</text>") != std::string::npos);
  CHECK(svg.find(">ep-40</text>") != std::string::npos);
  CHECK(svg.find("<svg xmlns") == 0);
}

TEST_CASE("plot markers lie on their polyline") {
  TempDir dir("marker");
  const PlotSeries s{"ep-20", sample_curve(), 2};
  selpred::emit_risk_coverage_plot(dir.path / "m.svg", {s});
  const std::string svg = test_support::read_file(dir.path / "m.svg");

  const auto circle_pos = svg.find("<circle cx=\"");
  REQUIRE(circle_pos != std::string::npos);
  const auto cx_start = circle_pos + 12;
  const auto cx_end = svg.find('"', cx_start);
  const auto cy_start = svg.find("cy=\"", cx_end) + 4;
  const auto cy_end = svg.find('"', cy_start);
  const std::string point = svg.substr(cx_start, cx_end - cx_start) + "," +
                            svg.substr(cy_start, cy_end - cy_start);
  const auto poly_pos = svg.find("<polyline points=\"");
  const auto poly_end = svg.find('"', poly_pos + 18);
  const std::string points = svg.substr(poly_pos + 18, poly_end - poly_pos - 18);
  CHECK(points.find(point) != std::string::npos);
}

TEST_CASE("plot validation") {
  TempDir dir("plotbad");
  CHECK_THROWS_AS(selpred::emit_risk_coverage_plot(dir.path / "x.svg", {}),
                  selpred::UsageError);
  PlotSeries tiny{"t", {sample_curve()[0]}, 0};
  CHECK_THROWS_AS(selpred::emit_risk_coverage_plot(dir.path / "y.svg", {tiny}),
                  selpred::UsageError);
}
