#pragma once

#include <vector>

#include "nr2d3/array.hpp"
#include "nr2d3/camera.hpp"
#include "nr2d3/tape.hpp"

namespace nr2d3 {

// Latent layout: K splats, 11 numbers each, flattened back to back:
//   [ position(3) | log-radius(1) | color pre-sigmoid(3) | logit-opacity(1) | normal(3) ]
// Decoding applies exp to the radius, sigmoid to color and opacity, and safe
// normalization to the normal, so every real vector is a valid shape.
inline constexpr int kSplatStride = 11;
inline constexpr std::int64_t latent_dim(int splats) { return static_cast<std::int64_t>(splats) * kSplatStride; }
int splat_count(const Array& latent);  // validates divisibility by the stride

struct RenderConfig {
    double dist0 = 2.0;      // camera-plane distance from the origin along the view axis
    double bg_depth = 4.0;   // far plane composited behind everything
    double bg_color[3] = {0.0, 0.0, 0.0};
};

// Taped render outputs, all [H, W] so rewards can keep slicing them. Normals are in the
// camera frame (x right, y up, z toward the camera) and renormalized after compositing;
// pixels nothing touched keep the zero normal.
struct TapedRender {
    Var r, g, b;
    Var depth;
    Var alpha;
    Var nx, ny, nz;
};

// Differentiable orthographic splat renderer. Projects each splat onto the [-1,1]^2 image
// window, weights pixels by an unclipped Gaussian footprint times opacity, and paints
// back to front (sorted by camera depth, then splat index). Color, depth, and camera-frame
// normal all composite with the same per-pixel weights over the configured background.
// Rejects a non-finite latent, naming the offending splat.
TapedRender render_taped(Tape& tape, Var latent, const CameraPose& cam, const RenderConfig& cfg);

// Plain rendered images for IO and metrics, evaluated through the taped path on a scratch
// tape so the values are bit-identical with the differentiable ones.
struct RenderOut {
    Array rgb;     // [H, W, 3]
    Array depth;   // [H, W]
    Array alpha;   // [H, W]
    Array normal;  // [H, W, 3]
};

RenderOut render(const Array& latent, const CameraPose& cam, const RenderConfig& cfg);

// Pseudo-normals by central differences of the back-projected depth map: each pixel maps
// to (u, v, -depth) in the camera frame, horizontal and vertical differences span the
// surface, and their cross product (oriented toward the camera) is normalized. The
// one-pixel border, where no central difference exists, is returned as zero.
struct TapedNormals {
    Var nx, ny, nz;  // [H, W]
};

TapedNormals depth_to_normal_taped(Tape& tape, Var depth, int height, int width);

// Value-level wrapper, [H, W, 3], through the same ops.
Array depth_to_normal(const Array& depth);

// Masked variant: zero where alpha is below the threshold (on top of the zero border).
Array depth_to_normal(const Array& depth, const Array& alpha, double threshold = 0.5);

// 0/1 interior coverage mask: alpha >= threshold away from the one-pixel border. Returns
// the mask (same shape as alpha) and the count of covered pixels.
Array coverage_mask(const Array& alpha, double threshold, std::int64_t* count);

}  // namespace nr2d3
