#include "ekrmle/svg_plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "ekrmle/errors.hpp"

namespace ekrmle {

namespace {

constexpr const char* kPalette[] = {"#1f6fb4", "#d1495b", "#2e8b57", "#8e6cbe",
                                    "#c98a1e", "#3aa6a6", "#6b6b6b", "#aa3377"};

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

struct Axis {
  double lo = 0.0, hi = 1.0;
  bool log = false;

  double place(double v) const {
    if (log) return (std::log10(v) - lo) / (hi - lo);
    return (v - lo) / (hi - lo);
  }
};

bool usable(double v, bool log) {
  return std::isfinite(v) && (!log || v > 0.0);
}

Axis fit_axis(const std::vector<PlotSeries>& series, bool take_x, bool log) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& s : series) {
    const auto& vals = take_x ? s.x : s.y;
    const auto& other = take_x ? s.y : s.x;
    for (std::size_t i = 0; i < vals.size() && i < other.size(); ++i) {
      if (!usable(vals[i], log) || !std::isfinite(other[i])) continue;
      lo = std::min(lo, vals[i]);
      hi = std::max(hi, vals[i]);
    }
  }
  Axis axis;
  axis.log = log;
  if (!(lo <= hi)) {
    lo = log ? 1.0 : 0.0;
    hi = log ? 10.0 : 1.0;
  }
  if (log) {
    axis.lo = std::floor(std::log10(lo) - 1e-9);
    axis.hi = std::ceil(std::log10(hi) + 1e-9);
    if (axis.hi - axis.lo < 1.0) axis.hi = axis.lo + 1.0;
  } else {
    if (lo == hi) {
      lo -= 0.5;
      hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    axis.lo = lo - pad;
    axis.hi = hi + pad;
  }
  return axis;
}

std::vector<double> linear_ticks(double lo, double hi, int target = 6) {
  const double span = hi - lo;
  const double raw = span / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 2.5, 5.0, 10.0}) {
    if (mag * m >= raw) {
      step = mag * m;
      break;
    }
  }
  std::vector<double> ticks;
  double t = std::ceil(lo / step) * step;
  for (; t <= hi + 1e-12 * span; t += step) ticks.push_back(t);
  return ticks;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

void write_svg_line_chart(const std::filesystem::path& path,
                          const PlotSpec& spec,
                          const std::vector<PlotSeries>& series) {
  const int W = spec.width, H = spec.height;
  const double mL = 72, mR = 24, mT = 40, mB = 52;
  const double pw = W - mL - mR, ph = H - mT - mB;

  const Axis ax = fit_axis(series, true, spec.log_x);
  const Axis ay = fit_axis(series, false, spec.log_y);
  const auto X = [&](double v) { return mL + ax.place(v) * pw; };
  const auto Y = [&](double v) { return mT + (1.0 - ay.place(v)) * ph; };

  std::ofstream out(path);
  if (!out) throw IoError("svg: cannot write " + path.string());

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
      << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << " " << H
      << "\">\n";
  out << "<rect width=\"" << W << "\" height=\"" << H
      << "\" fill=\"#ffffff\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"15\">"
      << escape(spec.title) << "</text>\n";

  // Grid and tick labels.
  const auto tick_text = [&](double xpix, double ypix, const std::string& t,
                             bool xaxis) {
    out << "<text x=\"" << num(xpix) << "\" y=\"" << num(ypix)
        << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#444\""
        << (xaxis ? " text-anchor=\"middle\""
                  : " text-anchor=\"end\" dominant-baseline=\"middle\"")
        << ">" << t << "</text>\n";
  };
  const auto grid_line = [&](double x1, double y1, double x2, double y2) {
    out << "<line x1=\"" << num(x1) << "\" y1=\"" << num(y1) << "\" x2=\""
        << num(x2) << "\" y2=\"" << num(y2)
        << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
  };

  if (ax.log) {
    for (int e = static_cast<int>(ax.lo); e <= static_cast<int>(ax.hi); ++e) {
      const double xp = mL + (e - ax.lo) / (ax.hi - ax.lo) * pw;
      grid_line(xp, mT, xp, mT + ph);
      tick_text(xp, mT + ph + 16, "1e" + std::to_string(e), true);
    }
  } else {
    for (double t : linear_ticks(ax.lo, ax.hi)) {
      const double xp = X(t);
      grid_line(xp, mT, xp, mT + ph);
      tick_text(xp, mT + ph + 16, num(t), true);
    }
  }
  if (ay.log) {
    for (int e = static_cast<int>(ay.lo); e <= static_cast<int>(ay.hi); ++e) {
      const double yp = mT + (1.0 - (e - ay.lo) / (ay.hi - ay.lo)) * ph;
      grid_line(mL, yp, mL + pw, yp);
      tick_text(mL - 6, yp, "1e" + std::to_string(e), false);
    }
  } else {
    for (double t : linear_ticks(ay.lo, ay.hi)) {
      const double yp = Y(t);
      grid_line(mL, yp, mL + pw, yp);
      tick_text(mL - 6, yp, num(t), false);
    }
  }

  out << "<rect x=\"" << num(mL) << "\" y=\"" << num(mT) << "\" width=\""
      << num(pw) << "\" height=\"" << num(ph)
      << "\" fill=\"none\" stroke=\"#333333\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"" << H - 12
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"12\">"
      << escape(spec.x_label) << "</text>\n";
  out << "<text x=\"18\" y=\"" << H / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"12\" transform=\"rotate(-90 18 "
      << H / 2 << ")\">" << escape(spec.y_label) << "</text>\n";

  // Series polylines.
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % (sizeof(kPalette) / sizeof(*kPalette))];
    std::string points;
    bool open = false;
    const std::size_t npts = std::min(s.x.size(), s.y.size());
    for (std::size_t i = 0; i < npts; ++i) {
      if (!usable(s.x[i], ax.log) || !usable(s.y[i], ay.log)) {
        if (open) {
          out << "<polyline fill=\"none\" stroke=\"" << color
              << "\" stroke-width=\"1.6\""
              << (s.dashed ? " stroke-dasharray=\"6 4\"" : "")
              << " points=\"" << points << "\"/>\n";
          points.clear();
          open = false;
        }
        continue;
      }
      points += num(X(s.x[i])) + "," + num(Y(s.y[i])) + " ";
      open = true;
    }
    if (open)
      out << "<polyline fill=\"none\" stroke=\"" << color
          << "\" stroke-width=\"1.6\""
          << (s.dashed ? " stroke-dasharray=\"6 4\"" : "") << " points=\""
          << points << "\"/>\n";
  }

  // Legend.
  double ly = mT + 10;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = kPalette[k % (sizeof(kPalette) / sizeof(*kPalette))];
    out << "<line x1=\"" << num(mL + pw - 150) << "\" y1=\"" << num(ly)
        << "\" x2=\"" << num(mL + pw - 126) << "\" y2=\"" << num(ly)
        << "\" stroke=\"" << color << "\" stroke-width=\"2\""
        << (series[k].dashed ? " stroke-dasharray=\"6 4\"" : "") << "/>\n";
    out << "<text x=\"" << num(mL + pw - 120) << "\" y=\"" << num(ly + 4)
        << "\" font-family=\"sans-serif\" font-size=\"11\">"
        << escape(series[k].label) << "</text>\n";
    ly += 16;
  }

  out << "</svg>\n";
  if (!out) throw IoError("svg: write failed for " + path.string());
}

}  // namespace ekrmle
