#pragma once

#include <string>

#include "nr2d3/array.hpp"
#include "nr2d3/render.hpp"

namespace nr2d3 {

// Binary netpbm writers for debug dumps. Values are clamped into the stated range before
// quantization, so out-of-range inputs degrade gracefully instead of wrapping.

// [H, W, 3] in [0, 1] -> 8-bit P6.
void write_ppm(const std::string& path, const Array& rgb);

// [H, W] mapped from [lo, hi] -> 16-bit big-endian P5.
void write_pgm16(const std::string& path, const Array& gray, double lo, double hi);

// [H, W, 3] unit vectors -> P6 with the (n+1)/2 encoding.
void write_normal_ppm(const std::string& path, const Array& normal);

// One render dumped as prefix_rgb.ppm, prefix_depth.pgm, prefix_alpha.pgm,
// prefix_normal.ppm. Depth maps [0, bg_depth] onto the 16-bit range.
void write_render(const std::string& prefix, const RenderOut& out, double bg_depth);

}  // namespace nr2d3
