#include "nr2d3/render.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace nr2d3 {

namespace {

// Pixel-center grids of the [-1,1]^2 orthographic window: u runs left to right with the
// column index, v runs top to bottom from +1 to -1 with the row index.
Array grid_u(int h, int w) {
    Flat d(static_cast<std::int64_t>(h) * w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) d(static_cast<std::int64_t>(i) * w + j) = -1.0 + (2.0 * j + 1.0) / w;
    return Array({h, w}, std::move(d));
}

Array grid_v(int h, int w) {
    Flat d(static_cast<std::int64_t>(h) * w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) d(static_cast<std::int64_t>(i) * w + j) = 1.0 - (2.0 * i + 1.0) / h;
    return Array({h, w}, std::move(d));
}

struct SplatVars {
    Var pos;       // [3]
    Var color;     // [3] after sigmoid
    Var opacity;   // [1]
    Var inv_r2;    // [1] = exp(-2 log-radius)
    Var normal;    // [3] unit, world frame
    double depth_value = 0.0;
};

Var safe_normalize3(Tape& tape, Var n) {
    (void)tape;
    return mul(n, broadcast(rsqrt(sqnorm(n), 1e-12), {3}));
}

}  // namespace

int splat_count(const Array& latent) {
    if (latent.rank() != 1 || latent.numel() % kSplatStride != 0 || latent.numel() == 0)
        throw std::invalid_argument("render: latent shape " + shape_str(latent.shape()) + " is not a flat multiple of " +
                                    std::to_string(kSplatStride));
    return static_cast<int>(latent.numel() / kSplatStride);
}

TapedRender render_taped(Tape& tape, Var latent, const CameraPose& cam, const RenderConfig& cfg) {
    const int K = splat_count(latent.val());
    const int h = cam.height;
    const int w = cam.width;
    for (int k = 0; k < K; ++k) {
        for (int j = 0; j < kSplatStride; ++j)
            if (!std::isfinite(latent.val()[k * kSplatStride + j]))
                throw std::invalid_argument("render: non-finite latent at splat " + std::to_string(k));
    }

    Var right = constant(tape, cam.right);
    Var up = constant(tape, cam.up);
    Var view = constant(tape, cam.view);
    Var grid_u_c = constant(tape, grid_u(h, w));
    Var grid_v_c = constant(tape, grid_v(h, w));
    Var ones = constant(tape, Array::constant({h, w}, 1.0));
    Var dist0 = constant(tape, Array::constant({1}, cfg.dist0));

    std::vector<SplatVars> splats;
    splats.reserve(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
        const std::int64_t at = static_cast<std::int64_t>(k) * kSplatStride;
        SplatVars s;
        s.pos = slice(latent, {at}, {3});
        Var logr = slice(latent, {at + 3}, {1});
        s.color = sigmoid(slice(latent, {at + 4}, {3}));
        s.opacity = sigmoid(slice(latent, {at + 7}, {1}));
        s.inv_r2 = exp(smul(logr, -2.0));
        s.normal = safe_normalize3(tape, slice(latent, {at + 8}, {3}));
        // Plain camera depth for the compositing order; the differentiable depth is taped below.
        double dot_view = 0.0;
        for (int i = 0; i < 3; ++i) dot_view += s.pos.val()[i] * cam.view[i];
        s.depth_value = cfg.dist0 - dot_view;
        splats.push_back(s);
    }

    // Back to front: farthest first, splat index breaking ties.
    std::vector<int> order(static_cast<std::size_t>(K));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return splats[static_cast<std::size_t>(a)].depth_value > splats[static_cast<std::size_t>(b)].depth_value;
    });

    Var out_r = constant(tape, Array::constant({h, w}, cfg.bg_color[0]));
    Var out_g = constant(tape, Array::constant({h, w}, cfg.bg_color[1]));
    Var out_b = constant(tape, Array::constant({h, w}, cfg.bg_color[2]));
    Var out_d = constant(tape, Array::constant({h, w}, cfg.bg_depth));
    Var out_nx = constant(tape, Array::zeros({h, w}));
    Var out_ny = constant(tape, Array::zeros({h, w}));
    Var out_nz = constant(tape, Array::zeros({h, w}));
    Var transparency = ones;

    for (int idx : order) {
        const SplatVars& s = splats[static_cast<std::size_t>(idx)];
        Var u_k = dot(s.pos, right);
        Var v_k = dot(s.pos, up);
        Var d_k = sub(dist0, dot(s.pos, view));
        Var du = sub(grid_u_c, broadcast(u_k, {h, w}));
        Var dv = sub(grid_v_c, broadcast(v_k, {h, w}));
        Var d2 = add(mul(du, du), mul(dv, dv));
        Var weight = mul(broadcast(s.opacity, {h, w}), exp(smul(mul(d2, broadcast(s.inv_r2, {h, w})), -0.5)));
        Var keep = sub(ones, weight);

        auto paint = [&](Var under, Var value) { return add(mul(keep, under), mul(weight, value)); };
        out_r = paint(out_r, broadcast(slice(s.color, {0}, {1}), {h, w}));
        out_g = paint(out_g, broadcast(slice(s.color, {1}, {1}), {h, w}));
        out_b = paint(out_b, broadcast(slice(s.color, {2}, {1}), {h, w}));
        out_d = paint(out_d, broadcast(d_k, {h, w}));
        out_nx = paint(out_nx, broadcast(dot(s.normal, right), {h, w}));
        out_ny = paint(out_ny, broadcast(dot(s.normal, up), {h, w}));
        out_nz = paint(out_nz, broadcast(dot(s.normal, view), {h, w}));
        transparency = mul(transparency, keep);
    }

    TapedRender out;
    out.r = out_r;
    out.g = out_g;
    out.b = out_b;
    out.depth = out_d;
    out.alpha = sub(ones, transparency);
    // Renormalize the blended normal; untouched pixels keep (0,0,0) since 0 * large = 0.
    Var len2 = add(add(mul(out_nx, out_nx), mul(out_ny, out_ny)), mul(out_nz, out_nz));
    Var inv_len = rsqrt(len2, 1e-12);
    out.nx = mul(out_nx, inv_len);
    out.ny = mul(out_ny, inv_len);
    out.nz = mul(out_nz, inv_len);
    return out;
}

RenderOut render(const Array& latent, const CameraPose& cam, const RenderConfig& cfg) {
    Tape tape;
    Var lv = leaf(tape, latent);
    TapedRender tr = render_taped(tape, lv, cam, cfg);
    const int h = cam.height;
    const int w = cam.width;
    RenderOut out;
    out.depth = tr.depth.val();
    out.alpha = tr.alpha.val();
    Flat rgb(static_cast<std::int64_t>(h) * w * 3);
    Flat nrm(static_cast<std::int64_t>(h) * w * 3);
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(h) * w; ++p) {
        rgb(3 * p + 0) = tr.r.val()[p];
        rgb(3 * p + 1) = tr.g.val()[p];
        rgb(3 * p + 2) = tr.b.val()[p];
        nrm(3 * p + 0) = tr.nx.val()[p];
        nrm(3 * p + 1) = tr.ny.val()[p];
        nrm(3 * p + 2) = tr.nz.val()[p];
    }
    out.rgb = Array({h, w, 3}, std::move(rgb));
    out.normal = Array({h, w, 3}, std::move(nrm));
    return out;
}

TapedNormals depth_to_normal_taped(Tape& tape, Var depth, int height, int width) {
    if (depth.val().rank() != 2 || depth.val().dim(0) != height || depth.val().dim(1) != width)
        throw std::invalid_argument("depth_to_normal: depth shape " + shape_str(depth.shape()) + " does not match " +
                                    std::to_string(height) + "x" + std::to_string(width));
    if (height < 3 || width < 3)
        throw std::invalid_argument("depth_to_normal: need at least 3x3 pixels for central differences");
    const int h = height;
    const int w = width;
    const double su = 2.0 / w;  // pixel pitch along u
    const double sv = 2.0 / h;  // pixel pitch along v (rows run top to bottom)

    // Central differences of depth at interior pixels, shapes [h-2, w-2].
    Var ddu = sub(slice(depth, {1, 2}, {h - 2, w - 2}), slice(depth, {1, 0}, {h - 2, w - 2}));
    Var ddv = sub(slice(depth, {2, 1}, {h - 2, w - 2}), slice(depth, {0, 1}, {h - 2, w - 2}));

    // Cross product of the vertical and horizontal surface steps, oriented toward +z
    // (the camera): n = (2 sv * ddu, -2 su * ddv, 4 su sv).
    Var nx = smul(ddu, 2.0 * sv);
    Var ny = smul(ddv, -2.0 * su);
    Var nz = constant(tape, Array::constant({h - 2, w - 2}, 4.0 * su * sv));
    Var len2 = add(add(mul(nx, nx), mul(ny, ny)), mul(nz, nz));
    Var inv_len = rsqrt(len2, 1e-12);
    nx = mul(nx, inv_len);
    ny = mul(ny, inv_len);
    nz = mul(nz, inv_len);

    // Zero-pad back to [h, w]: the border has no central difference.
    auto pad = [&](Var inner) {
        Var colz = constant(tape, Array::zeros({h - 2, 1}));
        Var rows = concat({colz, inner, colz}, 1);
        Var rowz = constant(tape, Array::zeros({1, w}));
        return concat({rowz, rows, rowz}, 0);
    };
    TapedNormals out;
    out.nx = pad(nx);
    out.ny = pad(ny);
    out.nz = pad(nz);
    return out;
}

Array depth_to_normal(const Array& depth) {
    Tape tape;
    Var d = leaf(tape, depth);
    TapedNormals tn = depth_to_normal_taped(tape, d, static_cast<int>(depth.dim(0)), static_cast<int>(depth.dim(1)));
    const std::int64_t hw = depth.numel();
    Flat out(hw * 3);
    for (std::int64_t p = 0; p < hw; ++p) {
        out(3 * p + 0) = tn.nx.val()[p];
        out(3 * p + 1) = tn.ny.val()[p];
        out(3 * p + 2) = tn.nz.val()[p];
    }
    return Array({depth.dim(0), depth.dim(1), 3}, std::move(out));
}

Array depth_to_normal(const Array& depth, const Array& alpha, double threshold) {
    if (!same_shape(depth, alpha))
        throw std::invalid_argument("depth_to_normal: depth " + shape_str(depth.shape()) + " and alpha " +
                                    shape_str(alpha.shape()) + " disagree");
    Array out = depth_to_normal(depth);
    Array mask = coverage_mask(alpha, threshold, nullptr);
    for (std::int64_t p = 0; p < mask.numel(); ++p) {
        if (mask[p] == 0.0)
            for (int c = 0; c < 3; ++c) out[3 * p + c] = 0.0;
    }
    return out;
}

Array coverage_mask(const Array& alpha, double threshold, std::int64_t* count) {
    if (alpha.rank() != 2) throw std::invalid_argument("coverage_mask: alpha must be [H, W], got " + shape_str(alpha.shape()));
    const std::int64_t h = alpha.dim(0);
    const std::int64_t w = alpha.dim(1);
    Array mask = Array::zeros({h, w});
    std::int64_t n = 0;
    for (std::int64_t i = 1; i + 1 < h; ++i) {
        for (std::int64_t j = 1; j + 1 < w; ++j) {
            if (alpha[i * w + j] >= threshold) {
                mask[i * w + j] = 1.0;
                ++n;
            }
        }
    }
    if (count) *count = n;
    return mask;
}

}  // namespace nr2d3
