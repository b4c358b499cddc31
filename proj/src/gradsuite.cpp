#include "nr2d3/gradsuite.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "nr2d3/camera.hpp"
#include "nr2d3/dataset.hpp"
#include "nr2d3/diffusion.hpp"
#include "nr2d3/gradcheck.hpp"
#include "nr2d3/losses.hpp"
#include "nr2d3/nets.hpp"
#include "nr2d3/render.hpp"
#include "nr2d3/rewards.hpp"
#include "nr2d3/rng.hpp"
#include "nr2d3/schedule.hpp"
#include "nr2d3/tape.hpp"

namespace nr2d3 {
namespace {

constexpr double kOpTol = 1e-4;
constexpr double kLossTol = 1e-3;

// Small shared geometry so a hundred instances per path stay fast.
constexpr int kImage = 6;
constexpr int kSplats = 2;
constexpr int kSteps = 5;

void fold(PathResult& r, const GradCheckReport& rep) {
    if (rep.max_rel_err > r.max_rel_err) r.max_rel_err = rep.max_rel_err;
    if (rep.nonfinite_coordinates > 0)
        throw std::runtime_error(r.name + ": non-finite finite-difference evaluation");
}

void jiggle(NamedParams& params, Rng& rng, double scale) {
    for (Array& v : params.values) v.data() += scale * rng.normal_array(v.shape()).data();
}

void jiggle_adapter(LowRankAdapter& ad, Rng& rng, double scale) {
    for (Array& v : ad.A) v.data() += scale * rng.normal_array(v.shape()).data();
    for (Array& v : ad.B) v.data() += scale * rng.normal_array(v.shape()).data();
}

// A latent whose opacity is saturated and whose splats sit inside the window, keeping
// the alpha-threshold masks of the geometry rewards away from their decision boundary
// so the finite-difference probes stay on one side of it.
Array stable_latent(Rng& rng) {
    ShapeDatasetConfig ds;
    ds.splats = kSplats;
    Array z = draw_shape(ds, static_cast<int>(rng.below(2)), rng);
    for (int k = 0; k < kSplats; ++k) {
        z[k * kSplatStride + 3] = std::log(0.45) + 0.05 * rng.normal();  // broad footprint
        z[k * kSplatStride + 7] = 3.0 + 0.2 * rng.normal();              // saturated opacity
    }
    return z;
}

CameraPose pick_camera(Rng& rng) {
    const std::vector<CameraPose> cams = base_cameras(4, kImage, kImage);
    return cams[static_cast<std::size_t>(rng.below(4))];
}

// ---- tape op composite ----------------------------------------------------------

// Every differentiable primitive appears at least once. stopgrad is excluded by
// definition: its adjoint is zero while its numerical derivative is not, so it is
// checked for exactly that property in the unit tests instead.
Var op_composite(Tape& tape, Var x, Var m) {
    Var a = tanh(x);
    Var b = softplus(x);
    Var c = mul(a, b);
    Var d = add(c, x);
    Var e = exp(smul(x, 0.1));
    Var f = sub(d, e);
    Var g = matvec(m, f);
    Var h = sigmoid(g);
    Var q = matmul(m, m, false, true);
    Var out = smul(sqnorm(h), 0.3);
    out = add(out, smul(dot(g, h), 0.7));
    out = add(out, mean(log(addc(mul(f, f), 1.5))));
    out = add(out, sum(rsqrt(mul(x, x), 0.5)));
    out = add(out, smul(sum(tanh(q)), 0.05));
    out = add(out, smul(dot(broadcast(reshape(mean(x), {1}), {5}), x), 0.1));
    out = add(out, smul(sum(slice(concat({x, f}, 0), {2}, {5})), 0.2));
    out = add(out, smul(sum(neg(h)), 0.15));
    return out;
}

double op_composite_value(const Array& xa, const Array& ma) {
    Tape tape;
    return op_composite(tape, constant(tape, xa), constant(tape, ma)).val().scalar_value();
}

PathResult check_tape_ops(int instances, Rng root) {
    PathResult r{"tape ops", instances, 0.0, kOpTol, 0.0};
    for (int i = 0; i < instances; ++i) {
        Rng rng = root.derive(static_cast<std::uint64_t>(i));
        const Array xa = rng.normal_array({5});
        const Array ma = rng.normal_array({3, 5});
        Tape tape;
        Var x = leaf(tape, xa);
        Var m = leaf(tape, ma);
        Var out = op_composite(tape, x, m);
        GradientMap g = backward(tape, out, {x.id, m.id});
        fold(r, grad_check([&](const Array& p) { return op_composite_value(p, ma); }, xa, g.at(x.id)));
        fold(r, grad_check([&](const Array& p) { return op_composite_value(xa, p); }, ma, g.at(m.id)));
    }
    return r;
}

// ---- networks -------------------------------------------------------------------

EpsNetConfig tiny_eps_cfg() {
    EpsNetConfig cfg;
    cfg.state_dim = static_cast<int>(latent_dim(kSplats));
    cfg.width = 5;
    cfg.depth = 2;
    cfg.time_features = 2;
    cfg.embed_dim = 2;
    cfg.num_labels = 2;
    return cfg;
}

PathResult check_eps_params(int instances, Rng root) {
    PathResult r{"noise net / parameters", instances, 0.0, kOpTol, 0.0};
    for (int i = 0; i < instances; ++i) {
        Rng rng = root.derive(static_cast<std::uint64_t>(i));
        EpsNet net = make_eps_net(tiny_eps_cfg(), rng);
        const Array x = rng.normal_array({net.cfg.state_dim});
        const Array w = rng.normal_array({net.cfg.state_dim});
        const int t = static_cast<int>(rng.below(kSteps + 1));
        const int cond = static_cast<int>(rng.below(3)) - 1;  // includes the null label
        Tape tape;
        EpsVars vars = bind_eps(tape, net, nullptr);
        Var out = dot(eps_forward(tape, vars, constant(tape, x), t, cond).out, constant(tape, w));
        GradientMap g = backward(tape, out, vars.base_ids);
        for (std::size_t k = 0; k < net.params.count(); ++k) {
            if (!g.has(vars.base_ids[k])) continue;  // unused embedding rows have no entry
            auto f = [&](const Array& p) {
                EpsNet n2 = net;
                n2.params.values[k] = p;
                return (eps_predict(n2, x, t, cond).data() * w.data()).sum();
            };
            fold(r, grad_check(f, net.params.values[k], g.at(vars.base_ids[k])));
        }
    }
    return r;
}

PathResult check_eps_input(int instances, Rng root) {
    PathResult r{"noise net / input", instances, 0.0, kOpTol, 0.0};
    for (int i = 0; i < instances; ++i) {
        Rng rng = root.derive(static_cast<std::uint64_t>(i));
        EpsNet net = make_eps_net(tiny_eps_cfg(), rng);
        const Array x = rng.normal_array({net.cfg.state_dim});
        const Array w = rng.normal_array({net.cfg.state_dim});
        const int t = static_cast<int>(rng.below(kSteps + 1));
        const int cond = static_cast<int>(rng.below(3)) - 1;
        Tape tape;
        EpsVars vars = bind_eps(tape, net, nullptr);
        Var xv = leaf(tape, x);
        Var out = dot(eps_forward(tape, vars, xv, t, cond).out, constant(tape, w));
        GradientMap g = backward(tape, out, {xv.id});
        auto f = [&](const Array& p) { return (eps_predict(net, p, t, cond).data() * w.data()).sum(); };
        fold(r, grad_check(f, x, g.at(xv.id)));
    }
    return r;
}

PathResult check_adapter(int instances, Rng root) {
    PathResult r{"low-rank adapter", instances, 0.0, kOpTol, 0.0};
    for (int i = 0; i < instances; ++i) {
        Rng rng = root.derive(static_cast<std::uint64_t>(i));
        EpsNet net = make_eps_net(tiny_eps_cfg(), rng);
        LowRankAdapter ad = make_adapter(net, 2, 0.7, rng);
        jiggle_adapter(ad, rng, 0.3);  // B starts at zero, which would zero A's gradient
        const Array x = rng.normal_array({net.cfg.state_dim});
        const Array w = rng.normal_array({net.cfg.state_dim});
        const int t = static_cast<int>(rng.below(kSteps + 1));
        const int cond = static_cast<int>(rng.below(3)) - 1;
        Tape tape;
        EpsVars vars = bind_eps(tape, net, &ad);
        Var out = dot(eps_forward(tape, vars, constant(tape, x), t, cond).out, constant(tape, w));
        std::vector<int> wrt = vars.a_ids;
        wrt.insert(wrt.end(), vars.b_ids.begin(), vars.b_ids.end());
        GradientMap g = backward(tape, out, wrt);
        for (std::size_t k = 0; k < ad.A.size(); ++k) {
            auto fa = [&](const Array& p) {
                LowRankAdapter a2 = ad;
                a2.A[k] = p;
                return (adapter_forward(net, a2, x, t, cond).data() * w.data()).sum();
            };
            auto fb = [&](const Array& p) {
                LowRankAdapter a2 = ad;
                a2.B[k] = p;
                return (adapter_forward(net, a2, x, t, cond).data() * w.data()).sum();
            };
            fold(r, grad_check(fa, ad.A[k], g.at(vars.a_ids[k])));
            fold(r, grad_check(fb, ad.B[k], g.at(vars.b_ids[k])));
        }
    }
    return r;
}

ResidualNetConfig tiny_res_cfg() {
    ResidualNetConfig cfg;
    cfg.state_dim = static_cast<int>(latent_dim(kSplats));
    cfg.width = 4;
    cfg.depth = 1;
    cfg.time_features = 2;
    return cfg;
}

PathResult check_residual_params(int instances, Rng root) {
    PathResult r{"correction net / parameters", instances, 0.0, kOpTol, 0.0};
    for (int i = 0; i < instances; ++i) {
        Rng rng = root.derive(static_cast<std::uint64_t>(i));
        ResidualNet net = make_residual_net(tiny_res_cfg(), rng);
        jiggle(net.params, rng, 0.3);  // the final layer is zero-initialized
        const Array x = rng.normal_array({net.cfg.state_dim});
        const Array w = rng.normal_array({net.cfg.state_dim});
        const int t = static_cast<int>(rng.below(kSteps + 1));
        Tape tape;
        ResVars vars = bind_residual(tape, net);
        Var out = dot(residual_forward(tape, vars, constant(tape, x), t), constant(tape, w));
        GradientMap g = backward(tape, out, vars.param_ids);
        for (std::size_t k = 0; k < net.params.count(); ++k) {
            auto f = [&](const Array& p) {
                ResidualNet n2 = net;
                n2.params.values[k] = p;
                return (residual_predict(n2, x, t).data() * w.data()).sum();
            };
            fold(r, grad_check(f, net.params.values[k], g.at(vars.param_ids[k])));
        }
    }
    return r;
}

PathResult check_residual_input(int instances, Rng root) {
    PathResult r{"correction net / input", instances, 0.0, kOpTol, 0.0};
    for (int i = 0; i < instances; ++i) {
        Rng rng = root.derive(static_cast<std::uint64_t>(i));
        ResidualNet net = make_residual_net(tiny_res_cfg(), rng);
        jiggle(net.params, rng, 0.3);
        const Array x = rng.normal_array({net.cfg.state_dim});
        const Array w = rng.normal_array({net.cfg.state_dim});
        const int t = static_cast<int>(rng.below(kSteps + 1));
        Tape tape;
        ResVars vars = bind_residual(tape, net);
        Var xv = leaf(tape, x);
        Var out = dot(residual_forward(tape, vars, xv, t), constant(tape, w));
        GradientMap g = backward(tape, out, {xv.id});
        auto f = [&](const Array& p) { return (residual_predict(net, p, t).data() * w.data()).sum(); };
        fold(r, grad_check(f, x, g.at(xv.id)));
    }
    return r;
}

// ---- renderer -------------------------------------------------------------------

PathResult check_renderer(int instances, Rng root) {
    PathResult r{"renderer", instances, 0.0, kOpTol, 0.0};
    const RenderConfig rc;
    for (int i = 0; i < instances; ++i) {
        Rng rng = root.derive(static_cast<std::uint64_t>(i));
        const Array z = stable_latent(rng);
        const CameraPose cam = pick_camera(rng);
        const Array wr = rng.normal_array({kImage, kImage});
        const Array wg = rng.normal_array({kImage, kImage});
        const Array wb = rng.normal_array({kImage, kImage});
        const Array wd = rng.normal_array({kImage, kImage});
        const Array wa = rng.normal_array({kImage, kImage});
        const Array wx = rng.normal_array({kImage, kImage});
        const Array wy = rng.normal_array({kImage, kImage});
        const Array wz = rng.normal_array({kImage, kImage});

        auto weigh = [&](const RenderOut& out) {
            double acc = 0.0;
            for (std::int64_t p = 0; p < static_cast<std::int64_t>(kImage) * kImage; ++p) {
                acc += wr[p] * out.rgb[3 * p] + wg[p] * out.rgb[3 * p + 1] + wb[p] * out.rgb[3 * p + 2];
                acc += wd[p] * out.depth[p] + wa[p] * out.alpha[p];
                acc += wx[p] * out.normal[3 * p] + wy[p] * out.normal[3 * p + 1] + wz[p] * out.normal[3 * p + 2];
            }
            return acc;
        };

        Tape tape;
        Var zv = leaf(tape, z);
        TapedRender tr = render_taped(tape, zv, cam, rc);
        Var out = dot(tr.r, constant(tape, wr));
        out = add(out, dot(tr.g, constant(tape, wg)));
        out = add(out, dot(tr.b, constant(tape, wb)));
        out = add(out, dot(tr.depth, constant(tape, wd)));
        out = add(out, dot(tr.alpha, constant(tape, wa)));
        out = add(out, dot(tr.nx, constant(tape, wx)));
        out = add(out, dot(tr.ny, constant(tape, wy)));
        out = add(out, dot(tr.nz, constant(tape, wz)));
        GradientMap g = backward(tape, out, {zv.id});
        auto f = [&](const Array& p) { return weigh(render(p, cam, rc)); };
        fold(r, grad_check(f, z, g.at(zv.id)));
    }
    return r;
}

// ---- rewards --------------------------------------------------------------------

NoiseSchedule suite_schedule() { return make_schedule(ScheduleKind::LinearAlphaBar, kSteps); }

RewardModel suite_reward(RewardKind kind, Rng& rng, const NoiseSchedule& sched) {
    switch (kind) {
        case RewardKind::aesthetic:
            return make_reward_aesthetic(0.8, 0.25);
        case RewardKind::prompt_sim:
            return make_reward_prompt(kImage, kImage, 6, 2, rng);
        case RewardKind::normal_estimator: {
            RewardModel m = make_reward_normal_estimator(rng, 6);
            m.estimator.w2.data() += 0.2 * rng.normal_array(m.estimator.w2.shape()).data();
            m.estimator.b2.data() += 0.2 * rng.normal_array(m.estimator.b2.shape()).data();
            return m;
        }
        case RewardKind::dnc:
            return make_reward_dnc();
        case RewardKind::sds2d: {
            EpsNetConfig e;
            e.state_dim = 3 * kImage * kImage;
            e.width = 6;
            e.depth = 1;
            e.time_features = 2;
            e.embed_dim = 2;
            e.num_labels = 1;
            return make_reward_sds2d(make_eps_net(e, rng), sched, 2);
        }
    }
    throw std::logic_error("suite_reward: unhandled kind");
}

PathResult check_reward(RewardKind kind, int instances, Rng root) {
    PathResult r{"reward / " + reward_kind_name(kind), instances, 0.0, kOpTol, 0.0};
    const RenderConfig rc;
    const NoiseSchedule sched = suite_schedule();
    for (int i = 0; i < instances; ++i) {
        Rng rng = root.derive(static_cast<std::uint64_t>(i));
        RewardModel model = suite_reward(kind, rng, sched);
        const Array z = stable_latent(rng);
        const CameraPose cam = pick_camera(rng);
        const int cond = static_cast<int>(rng.below(2));
        const Rng frozen = rng.derive(0x66ULL);  // one stream, cloned into every evaluation

        Tape tape;
        Var zv = leaf(tape, z);
        Rng r0 = frozen;
        Var out = log_reward_taped(tape, model, render_taped(tape, zv, cam, rc), cond, &r0).value;
        GradientMap g = backward(tape, out, {zv.id});
        auto f = [&](const Array& p) {
            Rng re = frozen;
            return log_reward(model, render(p, cam, rc), cond, &re);
        };
        fold(r, grad_check(f, z, g.at(zv.id)));
    }
    return r;
}

// ---- reward gradient target -----------------------------------------------------

// reward_grad_view's output is the gradient of reward(render(one-step prediction)), so
// its finite-difference oracle is that scalar chain evaluated at plain values.
PathResult check_reward_target(int instances, Rng root) {
    PathResult r{"reward gradient target", instances, 0.0, kOpTol, 0.0};
    const NoiseSchedule sched = suite_schedule();
    for (int i = 0; i < instances; ++i) {
        Rng rng = root.derive(static_cast<std::uint64_t>(i));
        EpsNet net = make_eps_net(tiny_eps_cfg(), rng);
        LowRankAdapter ad = make_adapter(net, 1, 1.0, rng);
        jiggle_adapter(ad, rng, 0.2);
        RewardModel model = make_reward_aesthetic(0.8, 0.25);
        LossConfig cfg;
        cfg.sched = &sched;
        cfg.reward = &model;
        cfg.image_h = kImage;
        cfg.image_w = kImage;
        const Array z = stable_latent(rng);
        const CameraPose cam = pick_camera(rng);
        const int t = static_cast<int>(rng.below(kSteps));  // probe point of the target
        const int cond = static_cast<int>(rng.below(2));

        Tape tape;
        EpsVars vars = bind_eps(tape, net, &ad);
        const Array target = reward_grad_view(vars, cfg, z, t, cond, cam, nullptr);
        auto f = [&](const Array& p) {
            Array xhat = p;
            if (t > 0) {
                const Array eps = adapter_forward(net, ad, p, t, cond);
                xhat.data() = (p.data() - sched.s[static_cast<std::size_t>(t)] * eps.data()) /
                              sched.a[static_cast<std::size_t>(t)];
            }
            return log_reward(model, render(xhat, cam, cfg.render), cond, nullptr);
        };
        fold(r, grad_check(f, z, target));
    }
    return r;
}

// ---- losses ---------------------------------------------------------------------

// Shared fixture for the loss paths: a jiggled policy over the tiny net, two frozen
// on-policy trajectories, and one subsampled transition batch. Reward-gradient targets
// are pinned to frozen copies so finite differences probe exactly the parameters the
// backward pass differentiates.
struct LossRig {
    NoiseSchedule sched;
    EpsNet base;
    LowRankAdapter adapter;
    ResidualNet resnet;
    EpsNet reference;
    RewardModel reward;
    std::vector<Trajectory> trajs;
    TransitionBatch batch;
    std::vector<Array> z0s;
    Rng loss_rng{0};
    double lambda = 0.0;
};

LossRig make_loss_rig(Rng& rng) {
    LossRig rig;
    rig.sched = suite_schedule();
    rig.base = make_eps_net(tiny_eps_cfg(), rng);
    rig.adapter = make_adapter(rig.base, 1, 1.0, rng);
    jiggle_adapter(rig.adapter, rng, 0.15);
    rig.resnet = make_residual_net(tiny_res_cfg(), rng);
    jiggle(rig.resnet.params, rng, 0.15);
    rig.reference = adapter_merge(rig.base, rig.adapter);
    jiggle(rig.reference.params, rng, 0.05);  // distinct frozen anchor
    rig.reward = make_reward_aesthetic(0.8, 0.25);
    const Shape shape{latent_dim(kSplats)};
    EpsFn policy = make_eps_fn(rig.base, rig.adapter);
    for (int k = 0; k < 2; ++k) {
        rig.trajs.push_back(sample_trajectory(policy, rig.sched, shape, k % 2, rng));
        rig.z0s.push_back(rig.trajs.back().z[0]);
    }
    rig.batch = subsample_transitions(rig.trajs, 0.4, rng);
    rig.loss_rng = rng.derive(0x6cULL);
    rig.lambda = 0.5 + rng.uniform();
    return rig;
}

LossConfig rig_loss_config(const LossRig& rig) {
    LossConfig cfg;
    cfg.sched = &rig.sched;
    cfg.reward = &rig.reward;
    cfg.image_h = kImage;
    cfg.image_w = kImage;
    cfg.beta = 2.0;
    cfg.gamma = GammaKind::signal;
    cfg.cameras_per_transition = 1;
    cfg.target_net = &rig.base;
    cfg.target_adapter = &rig.adapter;
    return cfg;
}

enum class LossPath { approx, forward, reverse, terminal, total, reg };

double loss_value(const LossRig& rig, const LossConfig& cfg, LossPath which, const LowRankAdapter& ad,
                  const ResidualNet& rn) {
    Tape tape;
    EpsVars policy = bind_eps(tape, rig.base, &ad);
    ResVars rvars = bind_residual(tape, rn);
    Rng r = rig.loss_rng;
    Var out;
    switch (which) {
        case LossPath::approx:
            out = loss_approx_taped(tape, policy, cfg, rig.batch, r);
            break;
        case LossPath::forward:
            out = loss_forward_taped(tape, policy, rvars, cfg, rig.batch, r);
            break;
        case LossPath::reverse:
            out = loss_reverse_taped(tape, policy, rvars, cfg, rig.batch, r);
            break;
        case LossPath::terminal:
            out = loss_terminal_taped(tape, rvars, rig.z0s);
            break;
        case LossPath::total:
            out = total_loss_taped(tape, policy, rvars, cfg, rig.trajs, rig.batch, 1.0, r);
            break;
        case LossPath::reg:
            out = loss_reg_taped(tape, policy, rig.reference, rig.batch, rig.lambda);
            break;
    }
    return out.val().scalar_value();
}

PathResult check_loss(LossPath which, const std::string& name, int instances, Rng root) {
    PathResult r{name, instances, 0.0, kLossTol, 0.0};
    const bool wants_adapter = which != LossPath::terminal;
    const bool wants_resnet = which == LossPath::forward || which == LossPath::reverse ||
                              which == LossPath::terminal || which == LossPath::total;
    for (int i = 0; i < instances; ++i) {
        Rng rng = root.derive(static_cast<std::uint64_t>(i));
        LossRig rig = make_loss_rig(rng);
        LossConfig cfg = rig_loss_config(rig);

        Tape tape;
        EpsVars policy = bind_eps(tape, rig.base, &rig.adapter);
        ResVars rvars = bind_residual(tape, rig.resnet);
        Rng lr = rig.loss_rng;
        Var out;
        switch (which) {
            case LossPath::approx:
                out = loss_approx_taped(tape, policy, cfg, rig.batch, lr);
                break;
            case LossPath::forward:
                out = loss_forward_taped(tape, policy, rvars, cfg, rig.batch, lr);
                break;
            case LossPath::reverse:
                out = loss_reverse_taped(tape, policy, rvars, cfg, rig.batch, lr);
                break;
            case LossPath::terminal:
                out = loss_terminal_taped(tape, rvars, rig.z0s);
                break;
            case LossPath::total:
                out = total_loss_taped(tape, policy, rvars, cfg, rig.trajs, rig.batch, 1.0, lr);
                break;
            case LossPath::reg:
                out = loss_reg_taped(tape, policy, rig.reference, rig.batch, rig.lambda);
                break;
        }
        std::vector<int> wrt;
        if (wants_adapter) {
            wrt = policy.a_ids;
            wrt.insert(wrt.end(), policy.b_ids.begin(), policy.b_ids.end());
        }
        if (wants_resnet) wrt.insert(wrt.end(), rvars.param_ids.begin(), rvars.param_ids.end());
        GradientMap g = backward(tape, out, wrt);

        if (wants_adapter) {
            for (std::size_t k = 0; k < rig.adapter.A.size(); ++k) {
                auto fa = [&](const Array& p) {
                    LowRankAdapter a2 = rig.adapter;
                    a2.A[k] = p;
                    return loss_value(rig, cfg, which, a2, rig.resnet);
                };
                auto fb = [&](const Array& p) {
                    LowRankAdapter a2 = rig.adapter;
                    a2.B[k] = p;
                    return loss_value(rig, cfg, which, a2, rig.resnet);
                };
                fold(r, grad_check(fa, rig.adapter.A[k], g.at(policy.a_ids[k]), 1e-5));
                fold(r, grad_check(fb, rig.adapter.B[k], g.at(policy.b_ids[k]), 1e-5));
            }
        }
        if (wants_resnet) {
            // The head's output layer covers the whole downstream use of the head.
            for (const std::string& name2 : {std::string("wout"), std::string("bout")}) {
                const int k = rig.resnet.params.index_of(name2);
                auto f = [&](const Array& p) {
                    ResidualNet n2 = rig.resnet;
                    n2.params.values[static_cast<std::size_t>(k)] = p;
                    return loss_value(rig, cfg, which, rig.adapter, n2);
                };
                fold(r, grad_check(f, rig.resnet.params.values[static_cast<std::size_t>(k)],
                                   g.at(rvars.param_ids[static_cast<std::size_t>(k)]), 1e-5));
            }
        }
    }
    return r;
}

PathResult check_pretrain_loss(int instances, Rng root) {
    PathResult r{"loss / pretraining", instances, 0.0, kLossTol, 0.0};
    const NoiseSchedule sched = suite_schedule();
    ShapeDatasetConfig ds;
    ds.splats = kSplats;
    for (int i = 0; i < instances; ++i) {
        Rng rng = root.derive(static_cast<std::uint64_t>(i));
        EpsNet net = make_eps_net(tiny_eps_cfg(), rng);
        std::vector<Array> x0s;
        std::vector<int> conds;
        for (int b = 0; b < 2; ++b) {
            const int label = static_cast<int>(rng.below(2));
            x0s.push_back(draw_shape(ds, label, rng));
            conds.push_back(label);
        }
        const Rng frozen = rng.derive(0x70ULL);
        Tape tape;
        EpsVars vars = bind_eps(tape, net, nullptr);
        Rng r0 = frozen;
        Var loss = pretrain_loss(tape, vars, sched, x0s, conds, r0, 0.1);
        GradientMap g = backward(tape, loss, vars.base_ids);
        for (std::size_t k = 0; k < net.params.count(); ++k) {
            if (!g.has(vars.base_ids[k])) continue;
            auto f = [&](const Array& p) {
                EpsNet n2 = net;
                n2.params.values[k] = p;
                Tape scratch;
                EpsVars v2 = bind_eps(scratch, n2, nullptr);
                Rng re = frozen;
                return pretrain_loss(scratch, v2, sched, x0s, conds, re, 0.1).val().scalar_value();
            };
            fold(r, grad_check(f, net.params.values[k], g.at(vars.base_ids[k]), 1e-5));
        }
    }
    return r;
}

PathResult timed(std::function<PathResult()> fn) {
    const auto t0 = std::chrono::steady_clock::now();
    PathResult r = fn();
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

}  // namespace

std::vector<PathResult> run_gradient_suite(int instances, std::uint64_t seed) {
    if (instances < 1) throw std::invalid_argument("gradient suite: need at least one instance");
    const Rng root(seed);
    auto tagged = [&](std::uint64_t tag) { return root.derive(tag); };
    std::vector<PathResult> out;
    out.push_back(timed([&] { return check_tape_ops(instances, tagged(1)); }));
    out.push_back(timed([&] { return check_eps_params(instances, tagged(2)); }));
    out.push_back(timed([&] { return check_eps_input(instances, tagged(3)); }));
    out.push_back(timed([&] { return check_adapter(instances, tagged(4)); }));
    out.push_back(timed([&] { return check_residual_params(instances, tagged(5)); }));
    out.push_back(timed([&] { return check_residual_input(instances, tagged(6)); }));
    out.push_back(timed([&] { return check_renderer(instances, tagged(7)); }));
    out.push_back(timed([&] { return check_reward(RewardKind::aesthetic, instances, tagged(8)); }));
    out.push_back(timed([&] { return check_reward(RewardKind::prompt_sim, instances, tagged(9)); }));
    out.push_back(timed([&] { return check_reward(RewardKind::normal_estimator, instances, tagged(10)); }));
    out.push_back(timed([&] { return check_reward(RewardKind::dnc, instances, tagged(11)); }));
    out.push_back(timed([&] { return check_reward(RewardKind::sds2d, instances, tagged(12)); }));
    out.push_back(timed([&] { return check_reward_target(instances, tagged(13)); }));
    out.push_back(timed([&] { return check_loss(LossPath::approx, "loss / score matching", instances, tagged(14)); }));
    out.push_back(timed([&] { return check_loss(LossPath::forward, "loss / forward residual", instances, tagged(15)); }));
    out.push_back(
        timed([&] { return check_loss(LossPath::reverse, "loss / reverse consistency", instances, tagged(16)); }));
    out.push_back(
        timed([&] { return check_loss(LossPath::terminal, "loss / terminal anchor", instances, tagged(17)); }));
    out.push_back(
        timed([&] { return check_loss(LossPath::total, "loss / trajectory objective", instances, tagged(18)); }));
    out.push_back(timed([&] { return check_loss(LossPath::reg, "loss / trust region", instances, tagged(19)); }));
    out.push_back(timed([&] { return check_pretrain_loss(instances, tagged(20)); }));
    return out;
}

std::string gradient_suite_table(const std::vector<PathResult>& results) {
    std::ostringstream os;
    for (const PathResult& r : results) {
        char line[160];
        std::snprintf(line, sizeof line, "[%s] %-28s max_rel_err=%-12.3g tol=%-8.0e %3d instances  %6.2fs\n",
                      r.pass() ? "PASS" : "FAIL", r.name.c_str(), r.max_rel_err, r.tolerance, r.instances, r.seconds);
        os << line;
    }
    return os.str();
}

bool gradient_suite_ok(const std::vector<PathResult>& results) {
    for (const PathResult& r : results) {
        if (!r.pass()) return false;
    }
    return true;
}

}  // namespace nr2d3
