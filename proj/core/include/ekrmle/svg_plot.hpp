#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace ekrmle {

/// One polyline on a chart. Points with non-finite values (or non-positive
/// values on a log axis) are skipped.
struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  bool dashed = false;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = false;
  int width = 760;
  int height = 480;
};

/// Render a simple self-contained SVG line chart. Plots are presentation
/// artifacts only; nothing downstream consumes them.
void write_svg_line_chart(const std::filesystem::path& path,
                          const PlotSpec& spec,
                          const std::vector<PlotSeries>& series);

}  // namespace ekrmle
