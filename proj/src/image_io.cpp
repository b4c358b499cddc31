#include "nr2d3/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace nr2d3 {

namespace {

std::ofstream open_binary(const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("image_io: cannot open " + path + " for writing");
    return f;
}

unsigned quantize(double x, double lo, double hi, unsigned maxval) {
    double t = (x - lo) / (hi - lo);
    t = std::clamp(t, 0.0, 1.0);
    return static_cast<unsigned>(std::lround(t * maxval));
}

}  // namespace

void write_ppm(const std::string& path, const Array& rgb) {
    if (rgb.rank() != 3 || rgb.dim(2) != 3)
        throw std::invalid_argument("write_ppm: expected [H, W, 3], got " + shape_str(rgb.shape()));
    const std::int64_t h = rgb.dim(0);
    const std::int64_t w = rgb.dim(1);
    auto f = open_binary(path);
    f << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> buf(static_cast<std::size_t>(rgb.numel()));
    for (std::int64_t i = 0; i < rgb.numel(); ++i)
        buf[static_cast<std::size_t>(i)] = static_cast<unsigned char>(quantize(rgb[i], 0.0, 1.0, 255));
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("image_io: short write to " + path);
}

void write_pgm16(const std::string& path, const Array& gray, double lo, double hi) {
    if (gray.rank() != 2) throw std::invalid_argument("write_pgm16: expected [H, W], got " + shape_str(gray.shape()));
    if (!(hi > lo)) throw std::invalid_argument("write_pgm16: need hi > lo");
    const std::int64_t h = gray.dim(0);
    const std::int64_t w = gray.dim(1);
    auto f = open_binary(path);
    f << "P5\n" << w << " " << h << "\n65535\n";
    std::vector<unsigned char> buf(static_cast<std::size_t>(2 * gray.numel()));
    for (std::int64_t i = 0; i < gray.numel(); ++i) {
        unsigned q = quantize(gray[i], lo, hi, 65535);
        buf[static_cast<std::size_t>(2 * i)] = static_cast<unsigned char>(q >> 8);  // big-endian per netpbm
        buf[static_cast<std::size_t>(2 * i + 1)] = static_cast<unsigned char>(q & 0xff);
    }
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("image_io: short write to " + path);
}

void write_normal_ppm(const std::string& path, const Array& normal) {
    if (normal.rank() != 3 || normal.dim(2) != 3)
        throw std::invalid_argument("write_normal_ppm: expected [H, W, 3], got " + shape_str(normal.shape()));
    Array encoded = normal;
    encoded.data() = (encoded.data() + 1.0) * 0.5;
    write_ppm(path, encoded);
}

void write_render(const std::string& prefix, const RenderOut& out, double bg_depth) {
    write_ppm(prefix + "_rgb.ppm", out.rgb);
    write_pgm16(prefix + "_depth.pgm", out.depth, 0.0, bg_depth);
    write_pgm16(prefix + "_alpha.pgm", out.alpha, 0.0, 1.0);
    write_normal_ppm(prefix + "_normal.ppm", out.normal);
}

}  // namespace nr2d3
