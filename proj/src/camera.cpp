#include "nr2d3/camera.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace nr2d3 {

namespace {

Array cross3(const Array& a, const Array& b) {
    return Array::from({3}, {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]});
}

void normalize3(Array& a) {
    const double len = std::sqrt(a.data().square().sum());
    if (len < 1e-12) throw std::invalid_argument("make_camera: degenerate frame (view parallel to world up)");
    a.data() /= len;
}

}  // namespace

CameraPose make_camera(double azimuth_deg, double elevation_deg, int height, int width) {
    if (height < 3 || width < 3)
        throw std::invalid_argument("make_camera: image must be at least 3x3, got " + std::to_string(height) + "x" +
                                    std::to_string(width));
    const double az = azimuth_deg * std::numbers::pi / 180.0;
    const double el = elevation_deg * std::numbers::pi / 180.0;
    CameraPose cam;
    cam.azimuth_deg = azimuth_deg;
    cam.elevation_deg = elevation_deg;
    cam.height = height;
    cam.width = width;
    cam.view = Array::from({3}, {std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az)});
    Array world_up = Array::from({3}, {0.0, 1.0, 0.0});
    cam.right = cross3(world_up, cam.view);
    normalize3(cam.right);
    cam.up = cross3(cam.view, cam.right);
    normalize3(cam.up);
    normalize3(cam.view);
    return cam;
}

std::vector<CameraPose> sample_cameras(Rng& rng, int count, int height, int width, double az_jitter_deg,
                                       double el_jitter_deg) {
    if (count != 1 && (count < 4 || count % 4 != 0))
        throw std::invalid_argument("sample_cameras: count must be 1 or a multiple of 4, got " + std::to_string(count));
    std::vector<CameraPose> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const double base = 90.0 * (i % 4);
        const double az = base + rng.uniform(-az_jitter_deg, az_jitter_deg);
        const double el = rng.uniform(-el_jitter_deg, el_jitter_deg);
        out.push_back(make_camera(az, el, height, width));
    }
    return out;
}

std::vector<CameraPose> base_cameras(int count, int height, int width) {
    if (count != 1 && (count < 4 || count % 4 != 0))
        throw std::invalid_argument("base_cameras: count must be 1 or a multiple of 4, got " + std::to_string(count));
    std::vector<CameraPose> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) out.push_back(make_camera(90.0 * (i % 4), 0.0, height, width));
    return out;
}

}  // namespace nr2d3
