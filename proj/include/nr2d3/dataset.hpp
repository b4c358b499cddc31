#pragma once

#include "nr2d3/array.hpp"
#include "nr2d3/render.hpp"
#include "nr2d3/rng.hpp"

namespace nr2d3 {

// Bundled toy corpus of splat latents for pretraining: label 0 draws orb-like shells
// with outward normals and warm colors, label 1 draws flat slabs facing the front
// camera with cool colors. Normals carry deliberate jitter, leaving geometry rewards
// room to improve during finetuning.
struct ShapeDatasetConfig {
    int splats = 4;
    int num_labels = 2;
    double position_noise = 0.08;
    double normal_noise = 0.6;
    double color_noise = 0.3;
};

// One latent of shape [11 * splats] for the given label.
Array draw_shape(const ShapeDatasetConfig& cfg, int label, Rng& rng);

// side x side grid of saturated splats on the z = 0 plane, facing the front camera
// with exact +z normals: the analytic scene whose depth-normal consistency is known to
// be near one.
Array plane_scene(int side);

}  // namespace nr2d3
