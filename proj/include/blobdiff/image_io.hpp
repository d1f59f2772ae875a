#pragma once

#include <string>
#include <vector>

#include "blobdiff/tensor.hpp"

namespace blobdiff {

// [C,h,w] with C 1 or 3, values in [-1,1] -> 8-bit grayscale/RGB PNG.
void write_png(const std::string& path, const Tensor& chw);

// PNG -> [3,h,w] in [-1,1]. Grayscale, palette and alpha inputs are widened
// to plain RGB.
Tensor read_png(const std::string& path);

// frames [F,C,h,w] -> dir/frame_0000.png, frame_0001.png, ...
void write_frame_sequence(const std::string& dir, const Tensor& frames);

// One curve of a metric plot.
struct PlotSeries {
  std::string label;
  std::vector<double> values;
};

// Minimal line-plot raster: white background, light grid, one polyline per
// series in a fixed palette, y auto-scaled over all series together. The
// label list is rendered as color swatches in the top-left corner.
// Returns [3,h,w] in [-1,1].
Tensor line_plot(const std::vector<PlotSeries>& series, int h = 240, int w = 640);

void save_line_plot(const std::string& path, const std::vector<PlotSeries>& series,
                    int h = 240, int w = 640);

}  // namespace blobdiff
