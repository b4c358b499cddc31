#pragma once

#include <string>
#include <vector>

namespace nr2d3 {

struct PlotSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

// Minimal static SVG chart: axes, ticks, legend, one polyline (or point cloud when
// scatter is set) per series. Output text is deterministic for fixed input.
std::string svg_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                      const std::vector<PlotSeries>& series, bool scatter = false);

void write_text_file(const std::string& path, const std::string& text);

}  // namespace nr2d3
