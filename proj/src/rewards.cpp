#include "nr2d3/rewards.hpp"

#include <bit>
#include <cmath>
#include <stdexcept>

namespace nr2d3 {

namespace {

// alpha >= threshold, optionally restricted to the interior (pseudo-normals and the
// estimator have no values on the one-pixel border).
Array alpha_mask(const Array& alpha, double threshold, bool interior_only, std::int64_t* count) {
    const std::int64_t h = alpha.dim(0);
    const std::int64_t w = alpha.dim(1);
    Array mask = Array::zeros({h, w});
    std::int64_t n = 0;
    const std::int64_t lo = interior_only ? 1 : 0;
    for (std::int64_t i = lo; i < h - lo; ++i) {
        for (std::int64_t j = lo; j < w - lo; ++j) {
            if (alpha[i * w + j] >= threshold) {
                mask[i * w + j] = 1.0;
                ++n;
            }
        }
    }
    *count = n;
    return mask;
}

Var add3(Var a, Var b, Var c) { return add(add(a, b), c); }

// Zero-pads an interior [h-2, w-2] plane back to [h, w].
Var pad_border(Tape& tape, Var inner, int h, int w) {
    Var colz = constant(tape, Array::zeros({h - 2, 1}));
    Var rowz = constant(tape, Array::zeros({1, w}));
    return concat({rowz, concat({colz, inner, colz}, 1), rowz}, 0);
}

// Estimator forward with the parameters as tape nodes, shared between the frozen reward
// path (constants) and fitting (leaves).
EstimatedNormals est_forward(Tape& tape, Var w1, Var b1, Var w2, Var b2, Var r, Var g, Var b, int h, int w) {
    const std::int64_t n = static_cast<std::int64_t>(h - 2) * (w - 2);
    const int hidden = static_cast<int>(w1.shape()[1]);
    std::vector<Var> cols;
    auto col = [&](Var v) { cols.push_back(reshape(v, {n, 1})); };
    auto center = [&](Var ch) { return slice(ch, {1, 1}, {h - 2, w - 2}); };
    auto du = [&](Var ch) { return smul(sub(slice(ch, {1, 2}, {h - 2, w - 2}), slice(ch, {1, 0}, {h - 2, w - 2})), 0.5); };
    auto dv = [&](Var ch) { return smul(sub(slice(ch, {2, 1}, {h - 2, w - 2}), slice(ch, {0, 1}, {h - 2, w - 2})), 0.5); };
    for (Var ch : {r, g, b}) col(center(ch));
    for (Var ch : {r, g, b}) col(du(ch));
    for (Var ch : {r, g, b}) col(dv(ch));
    Var feats = concat(cols, 1);  // [n, 9]
    Var h1 = tanh(add(matmul(feats, w1), broadcast(reshape(b1, {1, hidden}), {n, hidden})));
    Var o = add(matmul(h1, w2), broadcast(reshape(b2, {1, 3}), {n, 3}));
    Var len2 = matmul(mul(o, o), constant(tape, Array::constant({3, 1}, 1.0)));
    Var u = mul(o, broadcast(rsqrt(len2, 1e-12), {n, 3}));
    EstimatedNormals out;
    Var* planes[3] = {&out.nx, &out.ny, &out.nz};
    for (int c = 0; c < 3; ++c)
        *planes[c] = pad_border(tape, reshape(slice(u, {0, c}, {n, 1}), {h - 2, w - 2}), h, w);
    return out;
}

Var aesthetic_taped(Tape& tape, const RewardModel& model, const TapedRender& tr) {
    const std::int64_t h = tr.r.val().dim(0);
    const std::int64_t w = tr.r.val().dim(1);
    const double hw = static_cast<double>(h * w);
    Var m = smul(add3(tr.r, tr.g, tr.b), 1.0 / 3.0);
    Var chroma = add3(sqnorm(sub(tr.r, m)), sqnorm(sub(tr.g, m)), sqnorm(sub(tr.b, m)));
    Var tv = constant(tape, Array::scalar(0.0));
    for (Var ch : {tr.r, tr.g, tr.b}) {
        Var dh = sub(slice(ch, {0, 1}, {h, w - 1}), slice(ch, {0, 0}, {h, w - 1}));
        Var dv = sub(slice(ch, {1, 0}, {h - 1, w}), slice(ch, {0, 0}, {h - 1, w}));
        tv = add3(tv, sqnorm(dh), sqnorm(dv));
    }
    return sub(smul(chroma, model.chroma_weight / hw), smul(tv, model.tv_weight / hw));
}

Var prompt_taped(Tape& tape, const RewardModel& model, const TapedRender& tr, int cond) {
    const std::int64_t labels = model.targets.dim(0);
    const std::int64_t feat = model.targets.dim(1);
    if (cond < 0 || cond >= labels)
        throw std::invalid_argument("prompt reward: unknown label " + std::to_string(cond) + " of " +
                                    std::to_string(labels));
    const std::int64_t hw = tr.r.val().numel();
    if (model.proj.dim(1) != 3 * hw)
        throw std::invalid_argument("prompt reward: projection expects " + std::to_string(model.proj.dim(1) / 3) +
                                    " pixels, image has " + std::to_string(hw));
    Var x = concat({reshape(tr.r, {hw, 1}), reshape(tr.g, {hw, 1}), reshape(tr.b, {hw, 1})}, 0);
    Var f = matmul(constant(tape, model.proj), x);  // [feat, 1]
    Array trow({feat, 1}, Flat::Zero(feat));
    double tnorm2 = 0.0;
    for (std::int64_t k = 0; k < feat; ++k) {
        trow[k] = model.targets[cond * feat + k];
        tnorm2 += trow[k] * trow[k];
    }
    Var tgt = constant(tape, trow);
    return mul(dot(f, tgt), rsqrt(smul(sqnorm(f), tnorm2), 1e-12));
}

}  // namespace

RewardKind reward_kind_from_string(const std::string& s) {
    if (s == "aesthetic") return RewardKind::aesthetic;
    if (s == "prompt_sim") return RewardKind::prompt_sim;
    if (s == "normal_estimator") return RewardKind::normal_estimator;
    if (s == "dnc") return RewardKind::dnc;
    if (s == "sds2d") return RewardKind::sds2d;
    throw std::invalid_argument("unknown reward kind: " + s);
}

std::string reward_kind_name(RewardKind k) {
    switch (k) {
        case RewardKind::aesthetic: return "aesthetic";
        case RewardKind::prompt_sim: return "prompt_sim";
        case RewardKind::normal_estimator: return "normal_estimator";
        case RewardKind::dnc: return "dnc";
        case RewardKind::sds2d: return "sds2d";
    }
    return "?";
}

NormalEstimator make_normal_estimator(Rng& rng, int hidden) {
    if (hidden < 1) throw std::invalid_argument("normal estimator: hidden must be positive");
    NormalEstimator est;
    est.hidden = hidden;
    est.w1 = rng.normal_array({9, hidden});
    est.w1.data() *= 1.0 / 3.0;  // 1/sqrt(fan_in)
    est.b1 = Array::zeros({hidden});
    est.w2 = rng.normal_array({hidden, 3});
    est.w2.data() *= 1.0 / std::sqrt(static_cast<double>(hidden));
    est.b2 = Array::zeros({3});
    return est;
}

EstimatedNormals estimate_normals_taped(Tape& tape, const NormalEstimator& est, Var r, Var g, Var b, int height,
                                        int width) {
    if (height < 3 || width < 3) throw std::invalid_argument("normal estimator: need at least 3x3 pixels");
    return est_forward(tape, constant(tape, est.w1), constant(tape, est.b1), constant(tape, est.w2),
                       constant(tape, est.b2), r, g, b, height, width);
}

double fit_normal_estimator(NormalEstimator& est, const std::vector<RenderOut>& samples, int steps, double lr) {
    struct Prepared {
        Array r, g, b, tx, ty, tz, mask;
        std::int64_t count = 0;
        int h = 0, w = 0;
    };
    std::vector<Prepared> prep;
    for (const RenderOut& s : samples) {
        Prepared p;
        p.h = static_cast<int>(s.depth.dim(0));
        p.w = static_cast<int>(s.depth.dim(1));
        p.mask = alpha_mask(s.alpha, 0.5, true, &p.count);
        if (p.count == 0) continue;
        Array pn = depth_to_normal(s.depth);
        const std::int64_t hw = s.depth.numel();
        p.r = Array::zeros({p.h, p.w});
        p.g = Array::zeros({p.h, p.w});
        p.b = Array::zeros({p.h, p.w});
        p.tx = Array::zeros({p.h, p.w});
        p.ty = Array::zeros({p.h, p.w});
        p.tz = Array::zeros({p.h, p.w});
        for (std::int64_t q = 0; q < hw; ++q) {
            p.r[q] = s.rgb[3 * q];
            p.g[q] = s.rgb[3 * q + 1];
            p.b[q] = s.rgb[3 * q + 2];
            p.tx[q] = pn[3 * q];
            p.ty[q] = pn[3 * q + 1];
            p.tz[q] = pn[3 * q + 2];
        }
        prep.push_back(std::move(p));
    }
    if (prep.empty()) return 0.0;
    double last = 0.0;
    for (int step = 0; step < steps; ++step) {
        const Prepared& p = prep[static_cast<std::size_t>(step) % prep.size()];
        Tape tape;
        Var w1 = leaf(tape, est.w1), b1 = leaf(tape, est.b1), w2 = leaf(tape, est.w2), b2 = leaf(tape, est.b2);
        EstimatedNormals en = est_forward(tape, w1, b1, w2, b2, constant(tape, p.r), constant(tape, p.g),
                                          constant(tape, p.b), p.h, p.w);
        Var m = constant(tape, p.mask);
        Var loss = smul(add3(sqnorm(mul(sub(en.nx, constant(tape, p.tx)), m)),
                             sqnorm(mul(sub(en.ny, constant(tape, p.ty)), m)),
                             sqnorm(mul(sub(en.nz, constant(tape, p.tz)), m))),
                        1.0 / static_cast<double>(p.count));
        GradientMap g = backward(tape, loss, {w1.id, b1.id, w2.id, b2.id});
        est.w1.data() -= lr * g.at(w1.id).data();
        est.b1.data() -= lr * g.at(b1.id).data();
        est.w2.data() -= lr * g.at(w2.id).data();
        est.b2.data() -= lr * g.at(b2.id).data();
        last = loss.val().scalar_value();
    }
    return last;
}

RewardModel make_reward_aesthetic(double chroma_weight, double tv_weight) {
    RewardModel m;
    m.kind = RewardKind::aesthetic;
    m.chroma_weight = chroma_weight;
    m.tv_weight = tv_weight;
    return m;
}

RewardModel make_reward_prompt(int height, int width, int feature_dim, int num_labels, Rng& rng) {
    if (feature_dim < 1 || num_labels < 1) throw std::invalid_argument("prompt reward: need features and labels");
    RewardModel m;
    m.kind = RewardKind::prompt_sim;
    m.image_h = height;
    m.image_w = width;
    const std::int64_t in = static_cast<std::int64_t>(3) * height * width;
    m.proj = rng.normal_array({feature_dim, in});
    m.proj.data() *= 1.0 / std::sqrt(static_cast<double>(in));
    m.targets = rng.normal_array({num_labels, feature_dim});
    return m;
}

RewardModel make_reward_normal_estimator(Rng& rng, int hidden) {
    RewardModel m;
    m.kind = RewardKind::normal_estimator;
    m.estimator = make_normal_estimator(rng, hidden);
    return m;
}

RewardModel make_reward_dnc() {
    RewardModel m;
    m.kind = RewardKind::dnc;
    return m;
}

RewardModel make_reward_sds2d(EpsNet eps2d, NoiseSchedule sched, int samples) {
    if (samples < 1) throw std::invalid_argument("sds2d reward: samples must be positive");
    RewardModel m;
    m.kind = RewardKind::sds2d;
    m.eps2d = std::move(eps2d);
    m.sched2d = std::move(sched);
    m.sds_samples = samples;
    return m;
}

TapedScalar masked_normal_agreement(Tape& tape, const TapedRender& render, Var est_nx, Var est_ny, Var est_nz,
                                    bool interior_only) {
    std::int64_t count = 0;
    Array mask = alpha_mask(render.alpha.val(), 0.5, interior_only, &count);
    if (count == 0) return {constant(tape, Array::scalar(0.0)), true};
    Var ip = add3(mul(render.nx, est_nx), mul(render.ny, est_ny), mul(render.nz, est_nz));
    return {smul(sum(mul(ip, constant(tape, mask))), 1.0 / static_cast<double>(count)), false};
}

TapedScalar log_reward_sds2d_core(Tape& tape, Var flat_rgb, const Eps2D& eps2d, const NoiseSchedule& sched, Rng& rng,
                                  int samples) {
    if (samples < 1) throw std::invalid_argument("sds2d reward: samples must be positive");
    const Shape dim = flat_rgb.shape();
    Var total = constant(tape, Array::scalar(0.0));
    for (int s = 0; s < samples; ++s) {
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
        Array eps = rng.normal_array(dim);
        Array scaled = eps;
        scaled.data() *= sched.s[static_cast<std::size_t>(t)];
        Var x_t = add(smul(flat_rgb, sched.a[static_cast<std::size_t>(t)]), constant(tape, scaled));
        Var out = eps2d(tape, x_t, t);
        total = add(total, sqnorm(sub(out, constant(tape, eps))));
    }
    return {smul(total, -1.0 / samples), false};
}

TapedScalar log_reward_taped(Tape& tape, const RewardModel& model, const TapedRender& render, int cond, Rng* rng) {
    const int h = static_cast<int>(render.r.val().dim(0));
    const int w = static_cast<int>(render.r.val().dim(1));
    switch (model.kind) {
        case RewardKind::aesthetic:
            return {aesthetic_taped(tape, model, render), false};
        case RewardKind::prompt_sim:
            return {prompt_taped(tape, model, render, cond), false};
        case RewardKind::normal_estimator: {
            EstimatedNormals en = estimate_normals_taped(tape, model.estimator, render.r, render.g, render.b, h, w);
            return masked_normal_agreement(tape, render, en.nx, en.ny, en.nz, false);
        }
        case RewardKind::dnc: {
            TapedNormals pn = depth_to_normal_taped(tape, render.depth, h, w);
            return masked_normal_agreement(tape, render, pn.nx, pn.ny, pn.nz, true);
        }
        case RewardKind::sds2d: {
            if (!rng) throw std::invalid_argument("sds2d reward: an rng is required");
            const std::int64_t hw = static_cast<std::int64_t>(h) * w;
            Var x = concat({reshape(render.r, {hw}), reshape(render.g, {hw}), reshape(render.b, {hw})}, 0);
            EpsVars vars = bind_eps(tape, model.eps2d, nullptr);
            Eps2D fn = [&vars](Tape& tp, Var x_t, int t) { return eps_forward(tp, vars, x_t, t, -1).out; };
            return log_reward_sds2d_core(tape, x, fn, model.sched2d, *rng, model.sds_samples);
        }
    }
    throw std::logic_error("log_reward_taped: unhandled kind");
}

TapedRender to_taped(Tape& tape, const RenderOut& out) {
    const std::int64_t h = out.depth.dim(0);
    const std::int64_t w = out.depth.dim(1);
    Array planes[6] = {Array::zeros({h, w}), Array::zeros({h, w}), Array::zeros({h, w}),
                       Array::zeros({h, w}), Array::zeros({h, w}), Array::zeros({h, w})};
    for (std::int64_t q = 0; q < h * w; ++q) {
        for (int c = 0; c < 3; ++c) {
            planes[c][q] = out.rgb[3 * q + c];
            planes[3 + c][q] = out.normal[3 * q + c];
        }
    }
    TapedRender tr;
    tr.r = constant(tape, planes[0]);
    tr.g = constant(tape, planes[1]);
    tr.b = constant(tape, planes[2]);
    tr.depth = constant(tape, out.depth);
    tr.alpha = constant(tape, out.alpha);
    tr.nx = constant(tape, planes[3]);
    tr.ny = constant(tape, planes[4]);
    tr.nz = constant(tape, planes[5]);
    return tr;
}

double log_reward(const RewardModel& model, const RenderOut& out, int cond, Rng* rng, bool* degenerate) {
    Tape tape;
    TapedRender tr = to_taped(tape, out);
    TapedScalar s = log_reward_taped(tape, model, tr, cond, rng);
    if (degenerate) *degenerate = s.degenerate;
    return s.value.val().scalar_value();
}

namespace {

Reward3DEstimate lift_3d(const RewardModel& model, const Array& latent, const std::vector<CameraPose>& cameras,
                         int cond, const RenderConfig& cfg, Rng* rng, Array* grad_out) {
    if (cameras.empty()) throw std::invalid_argument("log_reward_3d: cameras must be nonempty");
    Reward3DEstimate est;
    Array gsum = Array::zeros(latent.shape());
    for (std::size_t i = 0; i < cameras.size(); ++i) {
        try {
            Tape tape;
            Var lv = leaf(tape, latent);
            TapedRender tr = render_taped(tape, lv, cameras[i], cfg);
            TapedScalar s = log_reward_taped(tape, model, tr, cond, rng);
            est.per_camera.push_back(s.value.val().scalar_value());
            est.degenerate = est.degenerate || s.degenerate;
            if (grad_out) {
                GradientMap g = backward(tape, s.value, {lv.id});
                gsum.data() += g.at(lv.id).data();
            }
        } catch (const std::exception& e) {
            throw std::runtime_error("camera " + std::to_string(i) + ": " + e.what());
        }
    }
    double total = 0.0;
    for (double v : est.per_camera) total += v;
    est.value = total / static_cast<double>(cameras.size());
    if (grad_out) {
        gsum.data() /= static_cast<double>(cameras.size());
        *grad_out = std::move(gsum);
    }
    return est;
}

}  // namespace

Reward3DEstimate log_reward_3d(const RewardModel& model, const Array& latent, const std::vector<CameraPose>& cameras,
                               int cond, const RenderConfig& cfg, Rng* rng) {
    return lift_3d(model, latent, cameras, cond, cfg, rng, nullptr);
}

Array grad_log_reward_3d(const RewardModel& model, const Array& latent, const std::vector<CameraPose>& cameras,
                         int cond, const RenderConfig& cfg, Rng* rng, Reward3DEstimate* estimate) {
    Array grad = Array::zeros(latent.shape());
    Reward3DEstimate est = lift_3d(model, latent, cameras, cond, cfg, rng, &grad);
    if (estimate) *estimate = std::move(est);
    return grad;
}

std::uint64_t reward_checksum(const RewardModel& model) {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed_byte = [&](unsigned char b) {
        h ^= b;
        h *= 1099511628211ULL;
    };
    auto feed_u64 = [&](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) feed_byte(static_cast<unsigned char>(v >> (8 * i)));
    };
    auto feed_double = [&](double d) { feed_u64(std::bit_cast<std::uint64_t>(d)); };
    auto feed_array = [&](const Array& a) {
        feed_u64(static_cast<std::uint64_t>(a.numel()));
        for (std::int64_t i = 0; i < a.numel(); ++i) feed_double(a[i]);
    };
    feed_u64(static_cast<std::uint64_t>(model.kind));
    feed_double(model.chroma_weight);
    feed_double(model.tv_weight);
    feed_array(model.proj);
    feed_array(model.targets);
    feed_u64(static_cast<std::uint64_t>(model.estimator.hidden));
    feed_array(model.estimator.w1);
    feed_array(model.estimator.b1);
    feed_array(model.estimator.w2);
    feed_array(model.estimator.b2);
    for (const Array& p : model.eps2d.params.values) feed_array(p);
    feed_u64(static_cast<std::uint64_t>(model.sched2d.T));
    feed_u64(static_cast<std::uint64_t>(model.sds_samples));
    return h;
}

}  // namespace nr2d3
