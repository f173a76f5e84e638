#pragma once

// Minimal static SVG charts: multi-series line charts and grouped bar
// charts with optional error bars. Output depends only on the inputs, so
// reruns are byte-identical.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpke::plot {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> err;  // optional, same length as y
};

struct Bar {
  std::string label;
  double value = 0.0;
  double err = 0.0;
};

struct Frame {
  std::string title;
  std::string x_label;
  std::string y_label;
  int width = 640;
  int height = 400;
};

namespace detail {

inline const char* color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  return palette[i % 6];
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

struct Axes {
  double x0, x1, y0, y1;
  double left = 70, right = 150, top = 40, bottom = 50;
  int w, h;
  double px(double x) const { return left + (x - x0) / (x1 - x0) * (w - left - right); }
  double py(double y) const { return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom); }
};

inline void pad_range(double& lo, double& hi) {
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
    return;
  }
  const double m = 0.08 * (hi - lo);
  lo -= m;
  hi += m;
}

inline std::string header(const Frame& f) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(f.width) + "\" height=\"" +
         std::to_string(f.height) + "\" font-family=\"sans-serif\" font-size=\"12\">\n" +
         "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n" + "<text x=\"" +
         std::to_string(f.width / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" +
         escape(f.title) + "</text>\n";
}

inline std::string axes(const Axes& a, const Frame& f, bool x_ticks) {
  std::string s;
  s += "<line x1=\"" + num(a.left) + "\" y1=\"" + num(a.h - a.bottom) + "\" x2=\"" + num(a.w - a.right) +
       "\" y2=\"" + num(a.h - a.bottom) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(a.left) + "\" y1=\"" + num(a.top) + "\" x2=\"" + num(a.left) + "\" y2=\"" +
       num(a.h - a.bottom) + "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = a.y0 + (a.y1 - a.y0) * i / 5.0;
    s += "<text x=\"" + num(a.left - 6) + "\" y=\"" + num(a.py(v) + 4) + "\" text-anchor=\"end\">" + num(v) +
         "</text>\n";
    s += "<line x1=\"" + num(a.left) + "\" y1=\"" + num(a.py(v)) + "\" x2=\"" + num(a.w - a.right) +
         "\" y2=\"" + num(a.py(v)) + "\" stroke=\"#ddd\"/>\n";
    if (x_ticks) {
      const double xv = a.x0 + (a.x1 - a.x0) * i / 5.0;
      s += "<text x=\"" + num(a.px(xv)) + "\" y=\"" + num(a.h - a.bottom + 16) + "\" text-anchor=\"middle\">" +
           num(xv) + "</text>\n";
    }
  }
  s += "<text x=\"" + num((a.left + a.w - a.right) / 2) + "\" y=\"" + num(a.h - 8) +
       "\" text-anchor=\"middle\">" + escape(f.x_label) + "</text>\n";
  s += "<text x=\"16\" y=\"" + num((a.top + a.h - a.bottom) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
       num((a.top + a.h - a.bottom) / 2) + ")\">" + escape(f.y_label) + "</text>\n";
  return s;
}

}  // namespace detail

inline std::string line_chart(const Frame& f, const std::vector<Series>& series) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("line_chart: x/y length mismatch");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double e = i < s.err.size() ? s.err[i] : 0.0;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i] - e);
      y1 = std::max(y1, s.y[i] + e);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  detail::pad_range(x0, x1);
  detail::pad_range(y0, y1);
  const detail::Axes a{x0, x1, y0, y1, 70, 150, 40, 50, f.width, f.height};
  std::string svg = detail::header(f) + detail::axes(a, f, true);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* c = detail::color(k);
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) pts += detail::num(a.px(s.x[i])) + "," + detail::num(a.py(s.y[i])) + " ";
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(c) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      svg += "<circle cx=\"" + detail::num(a.px(s.x[i])) + "\" cy=\"" + detail::num(a.py(s.y[i])) +
             "\" r=\"3.5\" fill=\"" + c + "\"/>\n";
      if (i < s.err.size() && s.err[i] > 0.0)
        svg += "<line x1=\"" + detail::num(a.px(s.x[i])) + "\" y1=\"" + detail::num(a.py(s.y[i] - s.err[i])) +
               "\" x2=\"" + detail::num(a.px(s.x[i])) + "\" y2=\"" + detail::num(a.py(s.y[i] + s.err[i])) +
               "\" stroke=\"" + c + "\"/>\n";
    }
    svg += "<text x=\"" + detail::num(f.width - a.right + 10) + "\" y=\"" + detail::num(a.top + 16 * k + 10) +
           "\" fill=\"" + c + "\">" + detail::escape(s.label) + "</text>\n";
  }
  return svg + "</svg>\n";
}

inline std::string bar_chart(const Frame& f, const std::vector<Bar>& bars) {
  double y0 = 0.0, y1 = 0.0;
  for (const auto& b : bars) {
    y0 = std::min(y0, b.value - b.err);
    y1 = std::max(y1, b.value + b.err);
  }
  if (!(y1 > y0)) y1 = y0 + 1.0;
  y1 += 0.08 * (y1 - y0);
  const double n = static_cast<double>(std::max<std::size_t>(bars.size(), 1));
  const detail::Axes a{0.0, n, y0, y1, 70, 30, 40, 50, f.width, f.height};
  std::string svg = detail::header(f) + detail::axes(a, f, false);
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const auto& b = bars[i];
    const double xl = a.px(i + 0.15), xr = a.px(i + 0.85);
    const double top = a.py(std::max(b.value, 0.0)), base = a.py(std::min(b.value, 0.0));
    svg += "<rect x=\"" + detail::num(xl) + "\" y=\"" + detail::num(top) + "\" width=\"" + detail::num(xr - xl) +
           "\" height=\"" + detail::num(base - top) + "\" fill=\"" + detail::color(i) + "\"/>\n";
    if (b.err > 0.0) {
      const double xm = a.px(i + 0.5);
      svg += "<line x1=\"" + detail::num(xm) + "\" y1=\"" + detail::num(a.py(b.value - b.err)) + "\" x2=\"" +
             detail::num(xm) + "\" y2=\"" + detail::num(a.py(b.value + b.err)) + "\" stroke=\"black\"/>\n";
    }
    svg += "<text x=\"" + detail::num(a.px(i + 0.5)) + "\" y=\"" + detail::num(f.height - a.bottom + 16) +
           "\" text-anchor=\"middle\">" + detail::escape(b.label) + "</text>\n";
  }
  return svg + "</svg>\n";
}

inline void write_svg(const std::string& path, const std::string& svg) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << svg;
}

}  // namespace dpke::plot
