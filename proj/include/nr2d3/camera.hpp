#pragma once

#include <vector>

#include "nr2d3/array.hpp"
#include "nr2d3/rng.hpp"

namespace nr2d3 {

// Orthographic camera on the unit sphere of directions, looking at the origin. The frame
// is right-handed with x = right, y = up, z = view pointing from the scene toward the
// camera, derived from azimuth/elevation in degrees (azimuth 0 looks down +z, azimuth 90
// looks down +x, elevation raises the camera toward +y).
struct CameraPose {
    double azimuth_deg = 0.0;
    double elevation_deg = 0.0;
    int height = 16;
    int width = 16;
    Array right{Shape{3}, Flat::Zero(3)};
    Array up{Shape{3}, Flat::Zero(3)};
    Array view{Shape{3}, Flat::Zero(3)};
};

CameraPose make_camera(double azimuth_deg, double elevation_deg, int height, int width);

// Camera distribution: groups of four orthogonal base azimuths {0, 90, 180, 270}, each
// perturbed by a uniform azimuth offset within +-az_jitter_deg and elevation within
// +-el_jitter_deg. count must be 1 or a multiple of 4. Draw order is azimuth then
// elevation per camera, so a fixed seed reproduces the exact pose list.
std::vector<CameraPose> sample_cameras(Rng& rng, int count, int height, int width, double az_jitter_deg = 60.0,
                                       double el_jitter_deg = 20.0);

// The same base-azimuth pattern without jitter: deterministic views for reporting and
// evaluation. count must be 1 or a multiple of 4.
std::vector<CameraPose> base_cameras(int count, int height, int width);

}  // namespace nr2d3
