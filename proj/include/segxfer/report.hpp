#pragma once

// SVG line charts of sweep results and a plain-text mode ranking.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iterator>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "segxfer/experiments.hpp"
#include "segxfer/metrics.hpp"

namespace segxfer {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;  // sorted by x
};

struct ChartSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  double y_min = 0.0;
  double y_max = 1.0;
};

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string line_chart_svg(const ChartSpec& spec, const std::vector<Series>& series) {
  static constexpr const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  constexpr double W = 480, H = 320, left = 56, right = 120, top = 36, bottom = 48;
  const double pw = W - left - right, ph = H - top - bottom;
  double x_lo = 0, x_hi = 1;
  bool any = false;
  for (const auto& s : series) {
    for (const auto& [x, _] : s.points) {
      x_lo = any ? std::min(x_lo, x) : x;
      x_hi = any ? std::max(x_hi, x) : x;
      any = true;
    }
  }
  if (x_hi <= x_lo) x_hi = x_lo + 1;
  const double y_span = spec.y_max > spec.y_min ? spec.y_max - spec.y_min : 1.0;
  auto sx = [&](double x) { return left + (x - x_lo) / (x_hi - x_lo) * pw; };
  auto sy = [&](double y) { return top + (1.0 - (std::clamp(y, spec.y_min, spec.y_max) - spec.y_min) / y_span) * ph; };

  std::string out;
  char buf[256];
  auto add = [&](const char* fmt, auto... args) {
    std::snprintf(buf, sizeof buf, fmt, args...);
    out += buf;
  };
  add("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" viewBox=\"0 0 %g %g\">\n", W, H, W, H);
  add("<rect width=\"%g\" height=\"%g\" fill=\"white\"/>\n", W, H);
  out += "<text x=\"" + std::to_string(static_cast<int>(left + pw / 2)) +
         "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" + xml_escape(spec.title) +
         "</text>\n";
  add("<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"none\" stroke=\"black\"/>\n", left, top, pw, ph);
  for (int i = 0; i <= 4; ++i) {
    const double y = spec.y_min + y_span * i / 4.0;
    add("<line x1=\"%g\" y1=\"%.2f\" x2=\"%g\" y2=\"%.2f\" stroke=\"#dddddd\"/>\n", left, sy(y), left + pw, sy(y));
    add("<text x=\"%g\" y=\"%.2f\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">%.2f</text>\n",
        left - 4, sy(y) + 3, y);
  }
  if (any) {
    std::set<double> xs;
    for (const auto& s : series) {
      for (const auto& p : s.points) xs.insert(p.first);
    }
    for (double x : xs) {
      add("<text x=\"%.2f\" y=\"%g\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">%g</text>\n",
          sx(x), top + ph + 14, x);
    }
  }
  out += "<text x=\"" + std::to_string(static_cast<int>(left + pw / 2)) + "\" y=\"" +
         std::to_string(static_cast<int>(H - 10)) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + xml_escape(spec.x_label) +
         "</text>\n";
  add("<text x=\"14\" y=\"%g\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
      "transform=\"rotate(-90 14 %g)\">",
      top + ph / 2, top + ph / 2);
  out += xml_escape(spec.y_label) + "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kColors[i % std::size(kColors)];
    if (!s.points.empty()) {
      out += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"";
      for (std::size_t k = 0; k < s.points.size(); ++k) {
        add("%s%.2f,%.2f", k ? " " : "", sx(s.points[k].first), sy(s.points[k].second));
      }
      out += "\"/>\n";
      for (const auto& [x, y] : s.points) add("<circle cx=\"%.2f\" cy=\"%.2f\" r=\"2.5\" fill=\"%s\"/>\n", sx(x), sy(y), color);
    }
    const double ly = top + 12 + 16.0 * static_cast<double>(i);
    add("<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"%s\" stroke-width=\"2\"/>\n", left + pw + 8, ly,
        left + pw + 24, ly, color);
    out += "<text x=\"" + std::to_string(static_cast<int>(left + pw + 28)) + "\" y=\"" +
           std::to_string(static_cast<int>(ly + 4)) + "\" font-family=\"sans-serif\" font-size=\"11\">" +
           xml_escape(s.name) + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

enum class SweepMetric { tpr, tnr, kappa };

inline const char* metric_name(SweepMetric m) {
  switch (m) {
    case SweepMetric::tpr: return "TPR";
    case SweepMetric::tnr: return "TNR";
    case SweepMetric::kappa: return "kappa";
  }
  return "?";
}

/// One line per mode of the mean metric against n_pos for one disease.
/// Modes follow `mode_order`, then any others alphabetically; an empty
/// `modes_filter` keeps every mode.
inline std::string sweep_chart(std::span<const MetricsRecord> records, const std::string& disease, SweepMetric metric,
                               const std::vector<std::string>& mode_order, const std::set<std::string>* modes_filter) {
  std::vector<MetricsRecord> subset;
  for (const auto& r : records) {
    if (r.disease == disease && (!modes_filter || modes_filter->count(r.mode))) subset.push_back(r);
  }
  std::map<std::string, Series> by_mode;
  if (!subset.empty()) {
    for (const auto& [key, g] : aggregate(subset)) {
      const double v = metric == SweepMetric::tpr ? g.tpr.mean : metric == SweepMetric::tnr ? g.tnr.mean : g.kappa.mean;
      auto& s = by_mode[key.mode];
      s.name = key.mode;
      s.points.emplace_back(key.n_pos_train, v);
    }
  }
  std::vector<Series> series;
  for (const auto& m : mode_order) {
    auto it = by_mode.find(m);
    if (it == by_mode.end()) continue;
    series.push_back(std::move(it->second));
    by_mode.erase(it);
  }
  for (auto& [_, s] : by_mode) series.push_back(std::move(s));
  for (auto& s : series) std::sort(s.points.begin(), s.points.end());
  ChartSpec spec{disease + ": mean " + metric_name(metric), "positive training samples", metric_name(metric),
                 metric == SweepMetric::kappa ? -0.2 : 0.0, 1.0};
  return line_chart_svg(spec, series);
}

/// Mode ranking per (disease, n_pos) by mean kappa.
inline std::string ranking_text(std::span<const MetricsRecord> records, const std::vector<std::string>& mode_order) {
  std::string out;
  char buf[160];
  for (const auto& c : compare_modes(records, mode_order)) {
    std::snprintf(buf, sizeof buf, "%s n_pos=%d", c.disease.c_str(), c.n_pos);
    out += buf;
    if (c.concat_seg_img_ordered) out += *c.concat_seg_img_ordered ? " [CONCAT>=SEG>=IMG]" : " [order broken]";
    out += "\n";
    for (std::size_t i = 0; i < c.ranking.size(); ++i) {
      const auto& s = c.ranking[i];
      std::snprintf(buf, sizeof buf, "  %zu. %-10s kappa %.3f  TPR %.3f  TNR %.3f\n", i + 1, s.mode.c_str(),
                    s.mean_kappa, s.mean_tpr, s.mean_tnr);
      out += buf;
    }
  }
  return out;
}

}  // namespace segxfer
