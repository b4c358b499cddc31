#include "nr2d3/trainers.hpp"

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nr2d3 {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void check_context(const TrainContext& ctx, const char* where) {
    if (!ctx.sched) throw std::invalid_argument(std::string(where) + ": schedule not set");
    if (!ctx.reward && !ctx.latent_reward)
        throw std::invalid_argument(std::string(where) + ": neither reward model nor latent reward set");
    if (shape_numel(ctx.latent_shape) < 1)
        throw std::invalid_argument(std::string(where) + ": latent shape is empty");
}

void check_common(const FinetuneConfig& cfg, const char* where) {
    if (!(cfg.beta > 0.0))
        throw std::invalid_argument(std::string(where) + ": beta must be positive, got " + std::to_string(cfg.beta));
    if (cfg.lambda < 0.0)
        throw std::invalid_argument(std::string(where) + ": lambda must be nonnegative, got " +
                                    std::to_string(cfg.lambda));
    if (cfg.w_b < 0.0)
        throw std::invalid_argument(std::string(where) + ": reverse weight must be nonnegative, got " +
                                    std::to_string(cfg.w_b));
    if (!(cfg.fraction > 0.0 && cfg.fraction <= 1.0))
        throw std::invalid_argument(std::string(where) + ": fraction must lie in (0, 1], got " +
                                    std::to_string(cfg.fraction));
    if (cfg.lr < 0.0)
        throw std::invalid_argument(std::string(where) + ": learning rate must be nonnegative, got " +
                                    std::to_string(cfg.lr));
    if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0))
        throw std::invalid_argument(std::string(where) + ": momentum must lie in [0, 1), got " +
                                    std::to_string(cfg.momentum));
    if (cfg.batch_size < 1)
        throw std::invalid_argument(std::string(where) + ": batch size must be positive, got " +
                                    std::to_string(cfg.batch_size));
    if (cfg.cameras_per_transition < 1)
        throw std::invalid_argument(std::string(where) + ": cameras per transition must be positive, got " +
                                    std::to_string(cfg.cameras_per_transition));
}

void check_state(const TrainState& st, const char* where) {
    if (st.adapter.A.size() != st.vel_a.size() || st.adapter.B.size() != st.vel_b.size() ||
        st.resnet.params.values.size() != st.vel_res.size())
        throw std::invalid_argument(std::string(where) + ": momentum buffers do not match the parameters");
}

LossConfig loss_config_of(const TrainContext& ctx, const FinetuneConfig& cfg) {
    LossConfig lc;
    lc.sched = ctx.sched;
    lc.reward = ctx.reward;
    lc.latent_reward = ctx.latent_reward;
    lc.render = ctx.render;
    lc.image_h = ctx.image_h;
    lc.image_w = ctx.image_w;
    lc.beta = cfg.beta;
    lc.gamma = cfg.gamma;
    lc.cameras_per_transition = cfg.cameras_per_transition;
    return lc;
}

std::vector<Trajectory> sample_batch(const TrainState& st, const TrainContext& ctx, int n, Rng& rng) {
    EpsFn policy = make_eps_fn(st.base, st.adapter);
    std::vector<Trajectory> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(sample_trajectory(policy, *ctx.sched, ctx.latent_shape, ctx.cond, rng));
    return out;
}

// v <- momentum v + g; the parameter write is skipped entirely at lr 0 so that a zero
// learning rate preserves parameters bit for bit.
void momentum_update(Array& vel, const Array& grad, Array& param, double momentum, double lr) {
    vel.data() = momentum * vel.data() + grad.data();
    if (lr != 0.0) param.data() -= lr * vel.data();
}

// Captures the merged pre-update parameters first, applies the momentum updates, then
// installs the capture as the new snapshot, so the snapshot lags the policy by one step.
void apply_update(TrainState& st, const GradientMap& grads, const EpsVars& vars, const ResVars* rvars,
                  const FinetuneConfig& cfg) {
    EpsNet pre = adapter_merge(st.base, st.adapter);
    for (std::size_t i = 0; i < st.adapter.A.size(); ++i) {
        momentum_update(st.vel_a[i], grads.at(vars.a_ids[i]), st.adapter.A[i], cfg.momentum, cfg.lr);
        momentum_update(st.vel_b[i], grads.at(vars.b_ids[i]), st.adapter.B[i], cfg.momentum, cfg.lr);
    }
    if (rvars) {
        for (std::size_t i = 0; i < st.resnet.params.values.size(); ++i)
            momentum_update(st.vel_res[i], grads.at(rvars->param_ids[i]), st.resnet.params.values[i], cfg.momentum,
                            cfg.lr);
    }
    st.snapshot = std::move(pre);
    st.step += 1;
}

void require_finite(double total, double main_v, double reg_v, const char* where, int step) {
    if (std::isfinite(total)) return;
    throw std::runtime_error(std::string(where) + ": non-finite loss at step " + std::to_string(step) +
                             " (matching " + std::to_string(main_v) + ", trust " + std::to_string(reg_v) + ")");
}

double latent_value(const LatentReward& f, const Array& z) {
    Tape scratch;
    return f(scratch, constant(scratch, z)).val().scalar_value();
}

Array latent_grad(const LatentReward& f, const Array& z) {
    Tape scratch;
    Var zv = leaf(scratch, z);
    Var v = f(scratch, zv);
    Array g = backward(scratch, v, {zv.id}).at(zv.id);
    return g;
}

// Batch statistics for the step report, evaluated through a derived rng (and a fixed
// four-view camera set) so reporting never perturbs the training stream.
void fill_report(StepReport& rep, const TrainState& st, const TrainContext& ctx,
                 const std::vector<Trajectory>& trajs, const Rng& rng) {
    Rng eval_rng = rng.derive(0x7265706fULL);
    std::vector<CameraPose> cams = base_cameras(4, ctx.image_h, ctx.image_w);
    EpsFn base_fn = make_eps_fn(st.base);
    double reward_acc = 0.0;
    double kl_acc = 0.0;
    for (const Trajectory& traj : trajs) {
        const Array& z0 = traj.z[0];
        reward_acc += ctx.latent_reward ? latent_value(ctx.latent_reward, z0)
                                        : log_reward_3d(*ctx.reward, z0, cams, ctx.cond, ctx.render, &eval_rng).value;
        kl_acc += path_log_ratio(traj, base_fn, *ctx.sched);
    }
    rep.step = st.step;
    rep.mean_log_reward = reward_acc / static_cast<double>(trajs.size());
    rep.kl_to_base = kl_acc / static_cast<double>(trajs.size());
}

// Taped reverse-step mean, the same arithmetic as the sampler so replayed values match
// the stored ones bit for bit.
Var taped_step_mean(Tape& tape, const EpsVars& vars, const NoiseSchedule& sched, Var z_t, int t, int cond) {
    const PosteriorCoef c = posterior_coef(sched, t);
    EpsFwd fwd = eps_forward(tape, vars, z_t, t, cond);
    return smul(sub(z_t, smul(fwd.out, c.eps_coef)), c.inv_sqrt_alpha);
}

// Mean over freshly drawn cameras of the taped view log-reward, or the latent functional
// directly when one is set. Degenerate views enter as constants, contributing their value
// but no gradient, matching the plain multi-view lift.
Var taped_reward_3d(Tape& tape, const TrainContext& ctx, const FinetuneConfig& cfg, Var x0, Rng& rng) {
    if (ctx.latent_reward) return ctx.latent_reward(tape, x0);
    std::vector<CameraPose> cams = sample_cameras(rng, cfg.cameras_per_transition, ctx.image_h, ctx.image_w);
    Var acc;
    for (std::size_t i = 0; i < cams.size(); ++i) {
        TapedRender view = render_taped(tape, x0, cams[i], ctx.render);
        TapedScalar s = log_reward_taped(tape, *ctx.reward, view, ctx.cond, &rng);
        acc = i == 0 ? s.value : add(acc, s.value);
    }
    return smul(acc, 1.0 / static_cast<double>(cams.size()));
}

}  // namespace

Method method_from_string(const std::string& name) {
    if (name == "nabla") return Method::nabla;
    if (name == "ddpo") return Method::ddpo;
    if (name == "refl") return Method::refl;
    if (name == "draft") return Method::draft;
    if (name == "sds3d") return Method::sds3d;
    throw std::invalid_argument("unknown finetuning method '" + name + "'");
}

std::string method_name(Method m) {
    switch (m) {
        case Method::nabla: return "nabla";
        case Method::ddpo: return "ddpo";
        case Method::refl: return "refl";
        case Method::draft: return "draft";
        case Method::sds3d: return "sds3d";
    }
    throw std::invalid_argument("method_name: unknown method value");
}

LossVariant loss_variant_from_string(const std::string& name) {
    if (name == "approx") return LossVariant::approx;
    if (name == "full" || name == "forward+reverse+terminal") return LossVariant::full;
    throw std::invalid_argument("unknown loss variant '" + name + "'");
}

std::string loss_variant_name(LossVariant v) { return v == LossVariant::approx ? "approx" : "full"; }

TrainState make_train_state(const EpsNet& base, int rank, double adapter_scale, const ResidualNetConfig& resnet_cfg,
                            Rng& rng) {
    if (resnet_cfg.state_dim != base.cfg.state_dim)
        throw std::invalid_argument("make_train_state: correction-head state_dim " +
                                    std::to_string(resnet_cfg.state_dim) + " differs from the net's " +
                                    std::to_string(base.cfg.state_dim));
    TrainState st;
    st.base = base;
    st.adapter = make_adapter(st.base, rank, adapter_scale, rng);
    st.resnet = make_residual_net(resnet_cfg, rng);
    st.snapshot = adapter_merge(st.base, st.adapter);
    for (std::size_t i = 0; i < st.adapter.A.size(); ++i) {
        st.vel_a.push_back(Array::zeros(st.adapter.A[i].shape()));
        st.vel_b.push_back(Array::zeros(st.adapter.B[i].shape()));
    }
    for (const Array& p : st.resnet.params.values) st.vel_res.push_back(Array::zeros(p.shape()));
    return st;
}

StepReport nabla_step(TrainState& st, const TrainContext& ctx, const FinetuneConfig& cfg, Rng& rng) {
    const Clock::time_point t0 = Clock::now();
    check_context(ctx, "nabla_step");
    check_common(cfg, "nabla_step");
    check_state(st, "nabla_step");

    std::vector<Trajectory> trajs = sample_batch(st, ctx, cfg.batch_size, rng);
    TransitionBatch batch = subsample_transitions(trajs, cfg.fraction, rng);

    Tape tape;
    EpsVars vars = bind_eps(tape, st.base, &st.adapter);
    LossConfig lcfg = loss_config_of(ctx, cfg);
    const bool full = cfg.variant == LossVariant::full;
    ResVars rvars;
    Var main;
    if (full) {
        rvars = bind_residual(tape, st.resnet);
        main = total_loss_taped(tape, vars, rvars, lcfg, trajs, batch, cfg.w_b, rng);
    } else {
        main = loss_approx_taped(tape, vars, lcfg, batch, rng);
    }
    const double main_v = main.val().scalar_value();
    double reg_v = 0.0;
    Var total = main;
    if (cfg.lambda > 0.0) {
        Var reg = loss_reg_taped(tape, vars, st.snapshot, batch, cfg.lambda);
        reg_v = reg.val().scalar_value();
        total = add(main, reg);
    }
    const double total_v = total.val().scalar_value();
    require_finite(total_v, main_v, reg_v, "nabla_step", st.step);

    std::vector<int> wrt = vars.a_ids;
    wrt.insert(wrt.end(), vars.b_ids.begin(), vars.b_ids.end());
    if (full) wrt.insert(wrt.end(), rvars.param_ids.begin(), rvars.param_ids.end());
    GradientMap grads = backward(tape, total, wrt);
    apply_update(st, grads, vars, full ? &rvars : nullptr, cfg);

    StepReport rep;
    rep.method = Method::nabla;
    rep.loss = total_v;
    rep.loss_main = main_v;
    rep.loss_reg = reg_v;
    fill_report(rep, st, ctx, trajs, rng);
    rep.wall_seconds = seconds_since(t0);
    return rep;
}

StepReport ddpo_step(TrainState& st, const TrainContext& ctx, const FinetuneConfig& cfg, Rng& rng) {
    const Clock::time_point t0 = Clock::now();
    check_context(ctx, "ddpo_step");
    check_common(cfg, "ddpo_step");
    check_state(st, "ddpo_step");
    if (cfg.batch_size < 2)
        throw std::invalid_argument("ddpo_step: batch size must be at least 2 for the batch-mean baseline");
    const NoiseSchedule& sched = *ctx.sched;
    for (int t = 1; t <= sched.T; ++t)
        if (!(sched.post_std[static_cast<std::size_t>(t)] > 0.0))
            throw std::invalid_argument("ddpo_step: reverse-step std must be positive, got " +
                                        std::to_string(sched.post_std[static_cast<std::size_t>(t)]) + " at step " +
                                        std::to_string(t));

    std::vector<Trajectory> trajs = sample_batch(st, ctx, cfg.batch_size, rng);
    const std::size_t n = trajs.size();
    std::vector<double> rewards(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const Array& z0 = trajs[i].z[0];
        if (ctx.latent_reward) {
            rewards[i] = latent_value(ctx.latent_reward, z0);
        } else {
            std::vector<CameraPose> cams = sample_cameras(rng, cfg.cameras_per_transition, ctx.image_h, ctx.image_w);
            rewards[i] = log_reward_3d(*ctx.reward, z0, cams, ctx.cond, ctx.render, &rng).value;
        }
    }
    // Advantages relative to the first sample's reward, then centered; a constant reward
    // yields exact zeros, so the update direction vanishes identically.
    std::vector<double> adv(n, 0.0);
    double shift_mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        adv[i] = rewards[i] - rewards[0];
        shift_mean += adv[i];
    }
    shift_mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) adv[i] -= shift_mean;

    // Surrogate -1/n sum_i adv_i sum_t log p(z_{t-1}|z_t); only the quadratic part of each
    // log density depends on the parameters, so the normalizers are dropped.
    Tape tape;
    EpsVars vars = bind_eps(tape, st.base, &st.adapter);
    Var total;
    for (std::size_t i = 0; i < n; ++i) {
        const Trajectory& traj = trajs[i];
        Var lp;
        for (int t = traj.T; t >= 1; --t) {
            const double sig = traj.std[static_cast<std::size_t>(t)];
            if (!(sig > 0.0))
                throw std::invalid_argument("ddpo_step: reverse-step std must be positive, got " +
                                            std::to_string(sig) + " at step " + std::to_string(t));
            Var mu = taped_step_mean(tape, vars, sched, constant(tape, traj.z[static_cast<std::size_t>(t)]), t,
                                     traj.cond);
            Var q = smul(sqnorm(sub(constant(tape, traj.z[static_cast<std::size_t>(t - 1)]), mu)),
                         -0.5 / (sig * sig));
            lp = t == traj.T ? q : add(lp, q);
        }
        Var term = smul(lp, -adv[i] / static_cast<double>(n));
        total = i == 0 ? term : add(total, term);
    }
    const double total_v = total.val().scalar_value();
    require_finite(total_v, total_v, 0.0, "ddpo_step", st.step);

    std::vector<int> wrt = vars.a_ids;
    wrt.insert(wrt.end(), vars.b_ids.begin(), vars.b_ids.end());
    GradientMap grads = backward(tape, total, wrt);
    apply_update(st, grads, vars, nullptr, cfg);

    StepReport rep;
    rep.method = Method::ddpo;
    rep.loss = total_v;
    rep.loss_main = total_v;
    fill_report(rep, st, ctx, trajs, rng);
    rep.wall_seconds = seconds_since(t0);
    return rep;
}

StepReport refl_step(TrainState& st, const TrainContext& ctx, const FinetuneConfig& cfg, Rng& rng) {
    const Clock::time_point t0 = Clock::now();
    check_context(ctx, "refl_step");
    check_common(cfg, "refl_step");
    check_state(st, "refl_step");
    const NoiseSchedule& sched = *ctx.sched;
    const int lo = cfg.refl_t_lo < 0 ? (3 * sched.T) / 4 : cfg.refl_t_lo;
    const int hi = cfg.refl_t_hi < 0 ? sched.T - 1 : cfg.refl_t_hi;
    if (lo < 1 || hi < lo || hi > sched.T)
        throw std::invalid_argument("refl_step: prediction-step range [" + std::to_string(lo) + ", " +
                                    std::to_string(hi) + "] must satisfy 1 <= lo <= hi <= " +
                                    std::to_string(sched.T));

    std::vector<Trajectory> trajs = sample_batch(st, ctx, cfg.batch_size, rng);

    Tape tape;
    EpsVars vars = bind_eps(tape, st.base, &st.adapter);
    Var acc;
    for (std::size_t i = 0; i < trajs.size(); ++i) {
        const int t = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
        Var zt = constant(tape, trajs[i].z[static_cast<std::size_t>(t)]);
        Var xhat = taped_one_step_prediction(tape, vars, sched, zt, t, trajs[i].cond);
        Var term = taped_reward_3d(tape, ctx, cfg, xhat, rng);
        acc = i == 0 ? term : add(acc, term);
    }
    Var total = smul(acc, -1.0 / static_cast<double>(trajs.size()));
    const double total_v = total.val().scalar_value();
    require_finite(total_v, total_v, 0.0, "refl_step", st.step);

    std::vector<int> wrt = vars.a_ids;
    wrt.insert(wrt.end(), vars.b_ids.begin(), vars.b_ids.end());
    GradientMap grads = backward(tape, total, wrt);
    apply_update(st, grads, vars, nullptr, cfg);

    StepReport rep;
    rep.method = Method::refl;
    rep.loss = total_v;
    rep.loss_main = total_v;
    fill_report(rep, st, ctx, trajs, rng);
    rep.wall_seconds = seconds_since(t0);
    return rep;
}

StepReport draft_step(TrainState& st, const TrainContext& ctx, const FinetuneConfig& cfg, Rng& rng) {
    const Clock::time_point t0 = Clock::now();
    check_context(ctx, "draft_step");
    check_common(cfg, "draft_step");
    check_state(st, "draft_step");
    const NoiseSchedule& sched = *ctx.sched;
    if (cfg.draft_k < 1 || cfg.draft_k > sched.T)
        throw std::invalid_argument("draft_step: backprop window " + std::to_string(cfg.draft_k) +
                                    " outside [1, " + std::to_string(sched.T) + "]");

    std::vector<Trajectory> trajs = sample_batch(st, ctx, cfg.batch_size, rng);

    // Replay the last K steps on the tape from the stored noise draws; with unchanged
    // parameters the replayed states match the sampled ones bit for bit, so the gradient
    // flows through exactly the path the sample took.
    Tape tape;
    EpsVars vars = bind_eps(tape, st.base, &st.adapter);
    Var acc;
    for (std::size_t i = 0; i < trajs.size(); ++i) {
        Var z = constant(tape, trajs[i].z[static_cast<std::size_t>(cfg.draft_k)]);
        for (int t = cfg.draft_k; t >= 1; --t) {
            Var mu = taped_step_mean(tape, vars, sched, z, t, trajs[i].cond);
            Array scaled = trajs[i].noise[static_cast<std::size_t>(t)];
            scaled.data() *= trajs[i].std[static_cast<std::size_t>(t)];
            z = add(mu, constant(tape, scaled));
        }
        Var term = taped_reward_3d(tape, ctx, cfg, z, rng);
        acc = i == 0 ? term : add(acc, term);
    }
    Var total = smul(acc, -1.0 / static_cast<double>(trajs.size()));
    const double total_v = total.val().scalar_value();
    require_finite(total_v, total_v, 0.0, "draft_step", st.step);

    std::vector<int> wrt = vars.a_ids;
    wrt.insert(wrt.end(), vars.b_ids.begin(), vars.b_ids.end());
    GradientMap grads = backward(tape, total, wrt);
    apply_update(st, grads, vars, nullptr, cfg);

    StepReport rep;
    rep.method = Method::draft;
    rep.loss = total_v;
    rep.loss_main = total_v;
    fill_report(rep, st, ctx, trajs, rng);
    rep.wall_seconds = seconds_since(t0);
    return rep;
}

StepReport finetune_step(TrainState& st, const TrainContext& ctx, const FinetuneConfig& cfg, Rng& rng) {
    switch (cfg.method) {
        case Method::nabla: return nabla_step(st, ctx, cfg, rng);
        case Method::ddpo: return ddpo_step(st, ctx, cfg, rng);
        case Method::refl: return refl_step(st, ctx, cfg, rng);
        case Method::draft: return draft_step(st, ctx, cfg, rng);
        case Method::sds3d:
            throw std::invalid_argument("finetune_step: sds3d optimizes individual latents, use sds3d_optimize");
    }
    throw std::invalid_argument("finetune_step: unknown method value");
}

Array sds3d_optimize(const EpsNet& base, const TrainContext& ctx, const FinetuneConfig& cfg, Rng& rng) {
    check_context(ctx, "sds3d_optimize");
    if (!(cfg.sds_lr > 0.0))
        throw std::invalid_argument("sds3d_optimize: step size must be positive, got " + std::to_string(cfg.sds_lr));
    if (cfg.sds_steps < 1)
        throw std::invalid_argument("sds3d_optimize: step count must be positive, got " +
                                    std::to_string(cfg.sds_steps));
    if (cfg.sds_eta < 0.0)
        throw std::invalid_argument("sds3d_optimize: reward strength must be nonnegative, got " +
                                    std::to_string(cfg.sds_eta));
    if (cfg.cameras_per_transition < 1)
        throw std::invalid_argument("sds3d_optimize: cameras per transition must be positive, got " +
                                    std::to_string(cfg.cameras_per_transition));
    const NoiseSchedule& sched = *ctx.sched;
    const int t_hi = std::max(1, static_cast<int>(std::ceil(0.4 * static_cast<double>(sched.T))));

    Array z = rng.normal_array(ctx.latent_shape);
    for (int s = 0; s < cfg.sds_steps; ++s) {
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(t_hi)));
        Array eps = rng.normal_array(ctx.latent_shape);
        Array z_t = q_sample(sched, z, t, eps);
        Array dir = eps_predict(base, z_t, t, ctx.cond);
        dir.data() -= eps.data();
        if (ctx.latent_reward) {
            if (cfg.sds_eta != 0.0) dir.data() -= cfg.sds_eta * latent_grad(ctx.latent_reward, z).data();
        } else {
            // Drawn unconditionally, so a constant reward reproduces the eta 0 iterates.
            std::vector<CameraPose> cams = sample_cameras(rng, cfg.cameras_per_transition, ctx.image_h, ctx.image_w);
            if (cfg.sds_eta != 0.0)
                dir.data() -= cfg.sds_eta * grad_log_reward_3d(*ctx.reward, z, cams, ctx.cond, ctx.render, &rng).data();
        }
        z.data() -= cfg.sds_lr * dir.data();
        const double norm = std::sqrt(z.data().square().sum());
        if (!(norm <= 1e3))
            throw std::runtime_error("sds3d_optimize: latent diverged at iteration " + std::to_string(s) +
                                     " (norm " + std::to_string(norm) + ")");
    }
    return z;
}

}  // namespace nr2d3
