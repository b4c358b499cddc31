#include "nr2d3/dataset.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace nr2d3 {

Array draw_shape(const ShapeDatasetConfig& cfg, int label, Rng& rng) {
    if (cfg.splats < 1) throw std::invalid_argument("draw_shape: need at least one splat");
    if (label < 0 || label >= cfg.num_labels)
        throw std::invalid_argument("draw_shape: label " + std::to_string(label) + " outside 0.." +
                                    std::to_string(cfg.num_labels - 1));
    Array z = Array::zeros({latent_dim(cfg.splats)});
    for (int k = 0; k < cfg.splats; ++k) {
        const std::int64_t at = static_cast<std::int64_t>(k) * kSplatStride;
        double px, py, pz, nx, ny, nz, cr, cg, cb;
        if (label == 0) {
            // Orb: shell positions with outward normals.
            const double az = 2.0 * std::numbers::pi * rng.uniform();
            const double el = std::asin(2.0 * rng.uniform() - 1.0);
            const double radius = 0.45 + 0.1 * rng.uniform();
            nx = std::cos(el) * std::cos(az);
            ny = std::cos(el) * std::sin(az);
            nz = std::sin(el);
            px = radius * nx;
            py = radius * ny;
            pz = radius * nz;
            cr = 1.2;
            cg = 0.2;
            cb = -0.8;
        } else {
            // Slab: flat sheet at z near 0, facing the front camera.
            px = 1.4 * (rng.uniform() - 0.5);
            py = 1.4 * (rng.uniform() - 0.5);
            pz = 0.0;
            nx = 0.0;
            ny = 0.0;
            nz = 1.0;
            cr = -0.8;
            cg = 0.2;
            cb = 1.2;
        }
        z[at + 0] = px + cfg.position_noise * rng.normal();
        z[at + 1] = py + cfg.position_noise * rng.normal();
        z[at + 2] = pz + cfg.position_noise * rng.normal();
        z[at + 3] = std::log(0.35) + 0.15 * rng.normal();
        z[at + 4] = cr + cfg.color_noise * rng.normal();
        z[at + 5] = cg + cfg.color_noise * rng.normal();
        z[at + 6] = cb + cfg.color_noise * rng.normal();
        z[at + 7] = 2.5 + 0.5 * rng.normal();
        z[at + 8] = nx + cfg.normal_noise * rng.normal();
        z[at + 9] = ny + cfg.normal_noise * rng.normal();
        z[at + 10] = nz + cfg.normal_noise * rng.normal();
    }
    return z;
}

Array plane_scene(int side) {
    if (side < 2) throw std::invalid_argument("plane_scene: need at least a 2 x 2 grid");
    Array z = Array::zeros({latent_dim(side * side)});
    for (int i = 0; i < side; ++i) {
        for (int j = 0; j < side; ++j) {
            const std::int64_t at = static_cast<std::int64_t>(i * side + j) * kSplatStride;
            z[at + 0] = -0.75 + 1.5 * j / (side - 1.0);
            z[at + 1] = -0.75 + 1.5 * i / (side - 1.0);
            z[at + 2] = 0.0;
            z[at + 3] = std::log(0.5);
            z[at + 4] = z[at + 5] = z[at + 6] = 1.0;
            z[at + 7] = 12.0;  // opacity saturates, so coverage is solid
            z[at + 10] = 1.0;
        }
    }
    return z;
}

}  // namespace nr2d3
