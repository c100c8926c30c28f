#pragma once

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "selpred/io.hpp"
#include "selpred/selective.hpp"

namespace selpred {

/// One summary-table row, already in rank order.
struct SummaryRow {
  std::string method;
  std::string checkpoint_id;
  std::size_t pretrain_epoch = 0;
  double coverage = 0.0;
  std::optional<double> sel_accuracy;
  std::optional<double> sel_macro_f1;
  std::optional<double> sel_qwk;
};

namespace detail {

inline std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

inline std::string fixed4(const std::optional<double>& v) {
  return v ? fixed4(*v) : std::string();
}

}  // namespace detail

/// Summary CSV at 4 decimal places; undefined metrics stay empty.
inline void emit_summary_table(const std::filesystem::path& path,
                               const std::vector<SummaryRow>& rows) {
  if (rows.empty()) throw UsageError("emit_summary_table: no rows");
  auto out = detail::open_out(path);
  out << "method,checkpoint_id,pretrain_epoch,coverage,sel_accuracy,"
         "sel_macro_f1,sel_qwk\n";
  for (const auto& r : rows) {
    out << r.method << ',' << r.checkpoint_id << ',' << r.pretrain_epoch << ','
        << detail::fixed4(r.coverage) << ',' << detail::fixed4(r.sel_accuracy)
        << ',' << detail::fixed4(r.sel_macro_f1) << ','
        << detail::fixed4(r.sel_qwk) << '\n';
  }
}

/// Which retained-set metric a plot puts on the y axis.
enum class PlotMetric { SelAccuracy, SelMacroF1 };

struct PlotSpec {
  PlotMetric metric = PlotMetric::SelMacroF1;
  int width = 800;
  int height = 500;
};

/// One plotted series: a labelled curve plus the index of its operating point.
struct PlotSeries {
  std::string label;
  std::vector<RiskCoveragePoint> curve;
  std::size_t operating_point_index = 0;
};

namespace detail {

inline std::optional<double> plot_value(const RiskCoveragePoint& pt,
                                        PlotMetric metric) {
  return metric == PlotMetric::SelAccuracy ? pt.sel_accuracy : pt.sel_macro_f1;
}

inline std::string coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace detail

/// Self-contained SVG: axes over [0,1]^2, one polyline per series in input
/// order, a legend, and a circled marker at each series' operating point.
/// Coverage ascends left to right. Output bytes are deterministic.
inline void emit_risk_coverage_plot(const std::filesystem::path& path,
                                    const std::vector<PlotSeries>& series,
                                    const PlotSpec& spec = {}) {
  if (series.empty()) throw UsageError("emit_risk_coverage_plot: no series");
  for (const auto& s : series)
    if (s.curve.size() < 2)
      throw UsageError("emit_risk_coverage_plot: series '" + s.label +
                       "' needs at least 2 points");

  static constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c",
                                             "#9467bd", "#ff7f0e", "#8c564b",
                                             "#e377c2", "#17becf"};
  constexpr int kPaletteSize = 8;
  const double ml = 60, mr = 20, mt = 20, mb = 45;  // margins
  const double pw = spec.width - ml - mr;
  const double ph = spec.height - mt - mb;
  auto sx = [&](double cov) { return ml + cov * pw; };
  auto sy = [&](double val) { return mt + (1.0 - val) * ph; };

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
         std::to_string(spec.width) + "\" height=\"" + std::to_string(spec.height) +
         "\" viewBox=\"0 0 " + std::to_string(spec.width) + " " +
         std::to_string(spec.height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  // Grid and tick labels every 0.2.
  for (int t = 0; t <= 5; ++t) {
    const double v = t / 5.0;
    svg += "<line x1=\"" + detail::coord(sx(v)) + "\" y1=\"" + detail::coord(mt) +
           "\" x2=\"" + detail::coord(sx(v)) + "\" y2=\"" + detail::coord(mt + ph) +
           "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    svg += "<line x1=\"" + detail::coord(ml) + "\" y1=\"" + detail::coord(sy(v)) +
           "\" x2=\"" + detail::coord(ml + pw) + "\" y2=\"" + detail::coord(sy(v)) +
           "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + detail::coord(sx(v)) + "\" y=\"" +
           detail::coord(mt + ph + 18) +
           "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">" +
           detail::coord(v) + "</text>\n";
    svg += "<text x=\"" + detail::coord(ml - 8) + "\" y=\"" +
           detail::coord(sy(v) + 4) +
           "\" font-size=\"12\" text-anchor=\"end\" font-family=\"sans-serif\">" +
           detail::coord(v) + "</text>\n";
  }
  svg += "<rect x=\"" + detail::coord(ml) + "\" y=\"" + detail::coord(mt) +
         "\" width=\"" + detail::coord(pw) + "\" height=\"" + detail::coord(ph) +
         "\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>\n";
  svg += "<text x=\"" + detail::coord(ml + pw / 2) + "\" y=\"" +
         detail::coord(static_cast<double>(spec.height) - 8) +
         "\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\">"
         "coverage</text>\n";
  const std::string ylabel = spec.metric == PlotMetric::SelAccuracy
                                 ? "selective accuracy"
                                 : "selective macro-F1";
  svg += "<text x=\"14\" y=\"" + detail::coord(mt + ph / 2) +
         "\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "transform=\"rotate(-90 14 " +
         detail::coord(mt + ph / 2) + ")\">" + ylabel + "</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& sr = series[s];
    const std::string color = kPalette[s % kPaletteSize];
    std::string pts;
    for (const auto& pt : sr.curve) {
      const auto v = detail::plot_value(pt, spec.metric);
      if (!v) continue;  // nothing retained, nothing to draw
      pts += detail::coord(sx(pt.coverage)) + "," + detail::coord(sy(*v)) + " ";
    }
    if (!pts.empty()) pts.pop_back();
    svg += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
           "\" stroke-width=\"2\"/>\n";
    const auto& op = sr.curve.at(sr.operating_point_index);
    if (const auto v = detail::plot_value(op, spec.metric)) {
      svg += "<circle cx=\"" + detail::coord(sx(op.coverage)) + "\" cy=\"" +
             detail::coord(sy(*v)) + "\" r=\"5\" fill=\"" + color +
             "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    }
    const double ly = mt + 16 + 18 * static_cast<double>(s);
    svg += "<line x1=\"" + detail::coord(ml + 10) + "\" y1=\"" + detail::coord(ly) +
           "\" x2=\"" + detail::coord(ml + 34) + "\" y2=\"" + detail::coord(ly) +
           "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    svg += "<text x=\"" + detail::coord(ml + 40) + "\" y=\"" +
           detail::coord(ly + 4) +
           "\" font-size=\"12\" font-family=\"sans-serif\">" + sr.label +
           "</text>\n";
  }
  svg += "</svg>\n";

  auto out = detail::open_out(path);
  out << svg;
}

}  // namespace selpred
