#include "forge/plot.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <sstream>

namespace forge {

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 130, kTop = 40, kBottom = 60;
const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

}  // namespace

std::string render_curve_svg(const QuantileCurve& curve, const PlotLabels& labels) {
  double x_min = 0.0, x_max = 1.0;
  if (!curve.centers.empty()) {
    x_min = curve.centers.front();
    x_max = curve.centers.back();
  }
  double y_min = std::numeric_limits<double>::infinity(), y_max = -y_min;
  for (const auto& row : curve.values)
    for (const auto& v : row)
      if (v) {
        y_min = std::min(y_min, *v);
        y_max = std::max(y_max, *v);
      }
  if (!(y_min <= y_max)) y_min = 0.0, y_max = 1.0;
  if (y_max - y_min < 1e-9) y_min -= 0.05, y_max += 0.05;
  const double pad = 0.05 * (y_max - y_min);
  y_min -= pad;
  y_max += pad;

  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x_min) / (x_max - x_min) * pw; };
  auto py = [&](double y) { return kTop + (1.0 - (y - y_min) / (y_max - y_min)) * ph; };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << kLeft + pw / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(labels.title)
    << "</text>\n";
  s << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int t = 0; t <= 5; ++t) {
    const double xv = x_min + (x_max - x_min) * t / 5.0, yv = y_min + (y_max - y_min) * t / 5.0;
    s << "<line x1=\"" << num(px(xv)) << "\" y1=\"" << kTop + ph << "\" x2=\"" << num(px(xv)) << "\" y2=\""
      << kTop + ph + 5 << "\" stroke=\"#333\"/>\n";
    s << "<text x=\"" << num(px(xv)) << "\" y=\"" << kTop + ph + 18 << "\" text-anchor=\"middle\">" << num(xv)
      << "</text>\n";
    s << "<line x1=\"" << kLeft - 5 << "\" y1=\"" << num(py(yv)) << "\" x2=\"" << kLeft << "\" y2=\"" << num(py(yv))
      << "\" stroke=\"#333\"/>\n";
    s << "<text x=\"" << kLeft - 8 << "\" y=\"" << num(py(yv) + 4) << "\" text-anchor=\"end\">" << num(yv)
      << "</text>\n";
  }
  s << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 15 << "\" text-anchor=\"middle\">"
    << escape(labels.x_label) << "</text>\n";
  s << "<text transform=\"translate(18," << kTop + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
    << escape(labels.y_label) << "</text>\n";

  for (std::size_t l = 0; l < curve.values.size(); ++l) {
    const char* color = kColors[l % std::size(kColors)];
    std::string path;
    bool pen_down = false;
    for (std::size_t k = 0; k < curve.values[l].size(); ++k) {
      const auto& v = curve.values[l][k];
      if (!v) {
        pen_down = false;
        continue;
      }
      path += (pen_down ? " L" : " M") + num(px(curve.centers[k])) + " " + num(py(*v));
      pen_down = true;
    }
    if (!path.empty())
      s << "<path d=\"" << path.substr(1) << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.6\"/>\n";
    const double ly = kTop + 14 + 18.0 * l;
    s << "<line x1=\"" << kLeft + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << kLeft + pw + 36 << "\" y2=\"" << ly
      << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << kLeft + pw + 42 << "\" y=\"" << ly + 4 << "\">Q(" << num(curve.levels[l] * 100.0)
      << "%)</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace forge
