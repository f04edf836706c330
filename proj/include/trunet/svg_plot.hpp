#pragma once

#include <string>
#include <utility>
#include <vector>

namespace trunet {

struct PlotSeries {
  std::string name;
  std::string color;  // any SVG colour
  std::vector<std::pair<double, double>> points;
};

/// Line chart with one <polyline> per non-empty series, axes with min/max
/// tick labels and a legend.
std::string svg_line_plot(const std::vector<PlotSeries>& series, const std::string& title, const std::string& x_label,
                          const std::string& y_label);

}  // namespace trunet
