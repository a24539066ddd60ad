#pragma once

#include <string>

#include "forge/evaluation.hpp"

namespace forge {

struct PlotLabels {
  std::string title;
  std::string x_label;
  std::string y_label;
};

// Static SVG of every quantile line of the curve; gaps where the window was
// under-populated.
std::string render_curve_svg(const QuantileCurve& curve, const PlotLabels& labels);

}  // namespace forge
