#include <algorithm>
#include <cmath>
#include <string>

#include <fmt/format.h>

#include "polyflow/errors.hpp"
#include "polyflow/harness.hpp"

namespace polyflow {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string escape(const std::string& s) {
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

double nice_step(double span, int target) {
  const double raw = span / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 2.5, 5.0, 10.0})
    if (m * mag >= raw) return m * mag;
  return 10.0 * mag;
}

std::string tick_label(double v) {
  if (std::abs(v) < 1e-12) return "0";
  return fmt::format("{:.6g}", v);
}

}  // namespace

double ChartFrame::px(double x) const {
  return left + (x - x_min) / (x_max - x_min) * (width - left - right);
}

double ChartFrame::py(double y) const {
  return height - bottom - (y - y_min) / (y_max - y_min) * (height - top - bottom);
}

ChartFrame chart_frame(const ChartSpec& spec) {
  ChartFrame f;
  double x_lo = INFINITY, x_hi = -INFINITY, y_lo = INFINITY, y_hi = -INFINITY;
  for (const auto& s : spec.series) {
    if (s.xs.size() != s.ys.size()) throw InvalidInputError("chart series '" + s.name + "' has mismatched lengths");
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
      x_lo = std::min(x_lo, s.xs[i]);
      x_hi = std::max(x_hi, s.xs[i]);
      y_lo = std::min(y_lo, s.ys[i]);
      y_hi = std::max(y_hi, s.ys[i]);
    }
  }
  if (!std::isfinite(x_lo)) {
    x_lo = 0.0, x_hi = 1.0, y_lo = 0.0, y_hi = 1.0;
  }
  if (x_hi <= x_lo) x_hi = x_lo + 1.0;
  if (y_hi <= y_lo) {
    y_lo -= 0.5;
    y_hi += 0.5;
  }
  f.x_min = x_lo;
  f.x_max = x_hi;
  f.y_min = y_lo;
  f.y_max = y_hi;
  return f;
}

std::string render_svg(const ChartSpec& spec) {
  const ChartFrame f = chart_frame(spec);
  std::string out = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
      "font-family=\"sans-serif\" font-size=\"12\">\n",
      f.width, f.height);
  out += fmt::format("<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>\n", f.width, f.height);
  out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
                     (f.left + f.width - f.right) / 2, f.top / 2 + 5, escape(spec.title));

  const double x0 = f.left, x1 = f.width - f.right, y0 = f.height - f.bottom, y1 = f.top;
  out += fmt::format("<g stroke=\"black\" stroke-width=\"1\"><line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\"/>"
                     "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{3}\"/></g>\n",
                     x0, y0, x1, y1);

  const double xs = nice_step(f.x_max - f.x_min, 6);
  for (double v = std::ceil(f.x_min / xs) * xs; v <= f.x_max + 1e-9 * xs; v += xs) {
    const double p = f.px(v);
    out += fmt::format("<line x1=\"{0:.2f}\" y1=\"{1}\" x2=\"{0:.2f}\" y2=\"{2}\" stroke=\"black\"/>"
                       "<text x=\"{0:.2f}\" y=\"{3}\" text-anchor=\"middle\">{4}</text>\n",
                       p, y0, y0 + 5, y0 + 18, tick_label(v));
  }
  const double ys = nice_step(f.y_max - f.y_min, 5);
  for (double v = std::ceil(f.y_min / ys) * ys; v <= f.y_max + 1e-9 * ys; v += ys) {
    const double p = f.py(v);
    out += fmt::format("<line x1=\"{0}\" y1=\"{1:.2f}\" x2=\"{2}\" y2=\"{1:.2f}\" stroke=\"black\"/>"
                       "<line x1=\"{3}\" y1=\"{1:.2f}\" x2=\"{4}\" y2=\"{1:.2f}\" stroke=\"#dddddd\"/>"
                       "<text x=\"{5}\" y=\"{6:.2f}\" text-anchor=\"end\">{7}</text>\n",
                       x0 - 5, p, x0, x0 + 1, x1, x0 - 8, p + 4, tick_label(v));
  }
  out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", (x0 + x1) / 2, f.height - 15,
                     escape(spec.x_label));
  out += fmt::format("<text x=\"15\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 15 {0})\">{1}</text>\n",
                     (y0 + y1) / 2, escape(spec.y_label));

  for (std::size_t k = 0; k < spec.series.size(); ++k) {
    const auto& s = spec.series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    std::string pts;
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
      pts += fmt::format("{}{:.3f},{:.3f}", pts.empty() ? "" : " ", f.px(s.xs[i]), f.py(s.ys[i]));
    }
    out += fmt::format("<polyline data-series=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
                       escape(s.name), color, pts);
    const double ly = f.top + 10 + 20.0 * static_cast<double>(k);
    out += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"{3}\" stroke-width=\"2\"/>"
                       "<text x=\"{4}\" y=\"{5}\">{6}</text>\n",
                       x1 + 15, ly, x1 + 40, color, x1 + 46, ly + 4, escape(s.name));
  }
  out += "</svg>\n";
  return out;
}

}  // namespace polyflow
