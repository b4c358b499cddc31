#include "nr2d3/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>

namespace nr2d3 {

namespace {

void check_config(const LossConfig& cfg, const char* where) {
    if (!cfg.sched) throw std::invalid_argument(std::string(where) + ": schedule not set");
    if (!cfg.reward && !cfg.latent_reward)
        throw std::invalid_argument(std::string(where) + ": neither reward model nor latent reward set");
    if (cfg.beta < 0.0)
        throw std::invalid_argument(std::string(where) + ": beta must be nonnegative, got " + std::to_string(cfg.beta));
    if (cfg.fixed_cameras) {
        if (cfg.fixed_cameras->empty()) throw std::invalid_argument(std::string(where) + ": fixed camera set is empty");
    } else if (cfg.cameras_per_transition < 1) {
        throw std::invalid_argument(std::string(where) + ": cameras per transition must be positive, got " +
                                    std::to_string(cfg.cameras_per_transition));
    }
}

void check_transition(const Transition& item, const NoiseSchedule& sched, const char* where) {
    if (item.t < 1 || item.t > sched.T)
        throw std::invalid_argument(std::string(where) + ": transition step " + std::to_string(item.t) +
                                    " outside [1, " + std::to_string(sched.T) + "]");
    if (!same_shape(item.z_t, item.z_prev))
        throw std::invalid_argument(std::string(where) + ": endpoint shapes " + shape_str(item.z_t.shape()) +
                                    " and " + shape_str(item.z_prev.shape()) + " differ");
}

enum class Variant { approx, forward, reverse };

// One transition's contribution. Sampled cameras give the mean over per-view squared
// residuals; a fixed camera set is treated as the exact view expectation, averaging the
// reward-gradient target inside the norm (the two agree in parameter gradient because the
// target is a constant and the score difference is view-independent).
Var transition_term(Tape& tape, const EpsVars& policy, const ResVars* resnet, const LossConfig& cfg,
                    const Transition& item, Variant variant, Rng& rng) {
    const NoiseSchedule& sched = *cfg.sched;
    check_transition(item, sched, "matching loss");
    const PosteriorCoef c = posterior_coef(sched, item.t);
    const double sig = sched.post_std[static_cast<std::size_t>(item.t)];
    const double inv_var = 1.0 / (sig * sig);

    Var zt = constant(tape, item.z_t);
    EpsFwd fwd = eps_forward(tape, policy, zt, item.t, item.cond);
    Var mu = smul(sub(zt, smul(fwd.out, c.eps_coef)), c.inv_sqrt_alpha);
    // Frozen prior counterpart through the same arithmetic order, so a zero adapter
    // cancels bit for bit.
    Array eps_b = eps_predict(*policy.net, item.z_t, item.t, item.cond);
    Array mu_b = item.z_t;
    mu_b.data() = (item.z_t.data() - eps_b.data() * c.eps_coef) * c.inv_sqrt_alpha;

    Var score_diff;
    int probe_t = 0;
    const Array* probe_z = nullptr;
    Var head;
    bool has_head = false;
    if (variant == Variant::reverse) {
        // d/dz_t of the Gaussian log density is J_mu^T (z_prev - mu) / sig^2 with
        // J_mu = c1 (I - c2 J_eps); the policy side stays differentiable through the
        // taped input VJP, the prior side is the same arithmetic at value level.
        Var w = smul(sub(constant(tape, item.z_prev), mu), inv_var);
        Var jw = eps_input_vjp(tape, policy, fwd, w);
        Var grad_pol = smul(sub(w, smul(jw, c.eps_coef)), c.inv_sqrt_alpha);
        Array wb = item.z_prev;
        wb.data() = (item.z_prev.data() - mu_b.data()) * inv_var;
        Array jwb = eps_input_vjp_values(*policy.net, nullptr, item.z_t, item.t, item.cond, wb);
        Array grad_base = wb;
        grad_base.data() = (wb.data() - jwb.data() * c.eps_coef) * c.inv_sqrt_alpha;
        score_diff = sub(grad_pol, constant(tape, grad_base));
        probe_t = item.t;
        probe_z = &item.z_t;
        if (resnet) {
            head = residual_forward(tape, *resnet, zt, item.t);
            has_head = true;
        }
    } else {
        // d/dz_prev of log p - log p_base: the z_prev terms cancel, leaving
        // (mu_theta - mu_base) / sig^2.
        score_diff = smul(sub(mu, constant(tape, mu_b)), inv_var);
        probe_t = item.t - 1;
        probe_z = &item.z_prev;
        if (variant == Variant::forward && resnet) {
            head = residual_forward(tape, *resnet, constant(tape, item.z_prev), item.t - 1);
            has_head = true;
        }
    }

    const double gb = gamma_schedule(cfg.gamma, item.t, sched) * cfg.beta;
    auto target_for = [&](const CameraPose& cam) {
        if (gb == 0.0) return Array(probe_z->shape(), Flat::Zero(probe_z->numel()));
        return reward_grad_view(policy, cfg, *probe_z, probe_t, item.cond, cam, &rng);
    };
    auto residual_norm = [&](const Array& target) {
        Var e = variant == Variant::reverse ? add(score_diff, constant(tape, target))
                                            : sub(score_diff, constant(tape, target));
        if (has_head) e = variant == Variant::reverse ? add(e, head) : sub(e, head);
        return sqnorm(e);
    };

    if (cfg.latent_reward) {
        // View-free reward: a single target, no camera draws.
        Array target = target_for(CameraPose{});
        target.data() *= gb;
        return residual_norm(target);
    }
    if (cfg.fixed_cameras) {
        const std::vector<CameraPose>& cams = *cfg.fixed_cameras;
        Array target(probe_z->shape(), Flat::Zero(probe_z->numel()));
        for (const CameraPose& cam : cams) target.data() += target_for(cam).data();
        target.data() *= gb / static_cast<double>(cams.size());
        return residual_norm(target);
    }
    std::vector<CameraPose> cams = sample_cameras(rng, cfg.cameras_per_transition, cfg.image_h, cfg.image_w,
                                                  cfg.az_jitter_deg, cfg.el_jitter_deg);
    Var acc;
    for (std::size_t i = 0; i < cams.size(); ++i) {
        Array target = target_for(cams[i]);
        target.data() *= gb;
        Var term = residual_norm(target);
        acc = i == 0 ? term : add(acc, term);
    }
    return smul(acc, 1.0 / static_cast<double>(cams.size()));
}

Var batch_mean(Tape& tape, const EpsVars& policy, const ResVars* resnet, const LossConfig& cfg,
               const TransitionBatch& batch, Variant variant, Rng& rng, const char* where) {
    check_config(cfg, where);
    if (batch.items.empty()) throw std::invalid_argument(std::string(where) + ": empty transition batch");
    Var acc;
    for (std::size_t i = 0; i < batch.items.size(); ++i) {
        Var term = transition_term(tape, policy, resnet, cfg, batch.items[i], variant, rng);
        acc = i == 0 ? term : add(acc, term);
    }
    return smul(acc, 1.0 / static_cast<double>(batch.items.size()));
}

}  // namespace

GammaKind gamma_kind_from_string(const std::string& name) {
    if (name == "signal") return GammaKind::signal;
    if (name == "constant") return GammaKind::constant;
    throw std::invalid_argument("gamma_schedule: unknown gamma kind '" + name + "'");
}

std::string gamma_kind_name(GammaKind kind) { return kind == GammaKind::signal ? "signal" : "constant"; }

double gamma_schedule(GammaKind kind, int t, const NoiseSchedule& sched) {
    if (t < 0 || t > sched.T)
        throw std::invalid_argument("gamma_schedule: step " + std::to_string(t) + " outside [0, " +
                                    std::to_string(sched.T) + "]");
    return kind == GammaKind::signal ? sched.a[static_cast<std::size_t>(t)] : 1.0;
}

TransitionBatch subsample_transitions(const std::vector<Trajectory>& trajs, double fraction, Rng& rng) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw std::invalid_argument("subsample_transitions: fraction must lie in (0, 1], got " +
                                    std::to_string(fraction));
    if (trajs.empty()) throw std::invalid_argument("subsample_transitions: empty trajectory batch");
    TransitionBatch batch;
    batch.num_trajectories = static_cast<int>(trajs.size());
    for (std::size_t j = 0; j < trajs.size(); ++j) {
        const Trajectory& traj = trajs[j];
        if (traj.T < 1 || traj.z.size() != static_cast<std::size_t>(traj.T) + 1 ||
            traj.std.size() != static_cast<std::size_t>(traj.T) + 1)
            throw std::invalid_argument("subsample_transitions: trajectory " + std::to_string(j) + " is malformed");
        const int k = static_cast<int>(std::ceil(fraction * static_cast<double>(traj.T)));
        // Partial Fisher-Yates over the step indices 1..T, keeping the first k picks.
        std::vector<int> steps(static_cast<std::size_t>(traj.T));
        std::iota(steps.begin(), steps.end(), 1);
        for (int i = 0; i < k; ++i) {
            const std::size_t pick =
                static_cast<std::size_t>(i) + static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(traj.T - i)));
            std::swap(steps[static_cast<std::size_t>(i)], steps[pick]);
        }
        steps.resize(static_cast<std::size_t>(k));
        std::sort(steps.begin(), steps.end());
        for (int t : steps) {
            Transition tr;
            tr.z_t = traj.z[static_cast<std::size_t>(t)];
            tr.z_prev = traj.z[static_cast<std::size_t>(t - 1)];
            tr.t = t;
            tr.cond = traj.cond;
            tr.traj = static_cast<int>(j);
            tr.std = traj.std[static_cast<std::size_t>(t)];
            batch.items.push_back(std::move(tr));
        }
    }
    return batch;
}

Array reward_grad_view(const EpsVars& policy, const LossConfig& cfg, const Array& z, int t, int cond,
                       const CameraPose& cam, Rng* rng) {
    if (!cfg.sched) throw std::invalid_argument("reward_grad_view: schedule not set");
    if (!policy.net) throw std::invalid_argument("reward_grad_view: policy is not bound to a network");
    const EpsNet* net = cfg.target_net ? cfg.target_net : policy.net;
    const LowRankAdapter* adapter = cfg.target_net ? cfg.target_adapter : policy.adapter;
    Tape scratch;
    Var zv = leaf(scratch, z);
    Var xhat = zv;  // at step 0 the clean sample predicts itself
    if (t != 0) {
        EpsVars vars = bind_eps(scratch, *net, adapter);
        xhat = taped_one_step_prediction(scratch, vars, *cfg.sched, zv, t, cond);
    }
    TapedScalar score;
    if (cfg.latent_reward) {
        score.value = cfg.latent_reward(scratch, xhat);
    } else {
        if (!cfg.reward) throw std::invalid_argument("reward_grad_view: reward model not set");
        TapedRender view = render_taped(scratch, xhat, cam, cfg.render);
        score = log_reward_taped(scratch, *cfg.reward, view, cond, rng);
    }
    Array out(z.shape(), Flat::Zero(z.numel()));
    if (score.degenerate) return out;
    GradientMap g = backward(scratch, score.value, {zv.id});
    if (g.has(zv.id)) out = g.at(zv.id);
    return out;
}

Var loss_approx_taped(Tape& tape, const EpsVars& policy, const LossConfig& cfg, const TransitionBatch& batch,
                      Rng& rng) {
    return batch_mean(tape, policy, nullptr, cfg, batch, Variant::approx, rng, "loss_approx");
}

Var loss_forward_taped(Tape& tape, const EpsVars& policy, const ResVars& resnet, const LossConfig& cfg,
                       const TransitionBatch& batch, Rng& rng) {
    return batch_mean(tape, policy, &resnet, cfg, batch, Variant::forward, rng, "loss_forward");
}

Var loss_reverse_taped(Tape& tape, const EpsVars& policy, const ResVars& resnet, const LossConfig& cfg,
                       const TransitionBatch& batch, Rng& rng) {
    return batch_mean(tape, policy, &resnet, cfg, batch, Variant::reverse, rng, "loss_reverse");
}

Var loss_terminal_taped(Tape& tape, const ResVars& resnet, const std::vector<Array>& z0s) {
    if (z0s.empty()) throw std::invalid_argument("loss_terminal: empty sample batch");
    Var acc;
    for (std::size_t i = 0; i < z0s.size(); ++i) {
        Var term = sqnorm(residual_forward(tape, resnet, constant(tape, z0s[i]), 0));
        acc = i == 0 ? term : add(acc, term);
    }
    return smul(acc, 1.0 / static_cast<double>(z0s.size()));
}

Var total_loss_taped(Tape& tape, const EpsVars& policy, const ResVars& resnet, const LossConfig& cfg,
                     const std::vector<Trajectory>& trajs, double fraction, double w_b, Rng& rng) {
    TransitionBatch batch = subsample_transitions(trajs, fraction, rng);
    return total_loss_taped(tape, policy, resnet, cfg, trajs, batch, w_b, rng);
}

Var total_loss_taped(Tape& tape, const EpsVars& policy, const ResVars& resnet, const LossConfig& cfg,
                     const std::vector<Trajectory>& trajs, const TransitionBatch& batch, double w_b, Rng& rng) {
    check_config(cfg, "total_loss");
    if (w_b < 0.0)
        throw std::invalid_argument("total_loss: reverse weight must be nonnegative, got " + std::to_string(w_b));
    Var total;
    std::size_t next = 0;
    for (std::size_t j = 0; j < trajs.size(); ++j) {
        Var traj_sum;
        int count = 0;
        while (next < batch.items.size() && batch.items[next].traj == static_cast<int>(j)) {
            const Transition& item = batch.items[next];
            Var term = transition_term(tape, policy, &resnet, cfg, item, Variant::forward, rng);
            if (w_b > 0.0) {
                Var rev = transition_term(tape, policy, &resnet, cfg, item, Variant::reverse, rng);
                term = add(term, smul(rev, w_b));
            }
            traj_sum = count == 0 ? term : add(traj_sum, term);
            ++count;
            ++next;
        }
        if (count == 0)
            throw std::invalid_argument("total_loss: trajectory " + std::to_string(j) +
                                        " has no transitions in the batch");
        // Scale the subsampled sum back to the full-chain sum it estimates.
        Var scaled = smul(traj_sum, static_cast<double>(trajs[j].T) / static_cast<double>(count));
        Var terminal = sqnorm(residual_forward(tape, resnet, constant(tape, trajs[j].z[0]), 0));
        Var traj_total = add(terminal, scaled);
        total = j == 0 ? traj_total : add(total, traj_total);
    }
    return smul(total, 1.0 / static_cast<double>(trajs.size()));
}

Var loss_reg_taped(Tape& tape, const EpsVars& policy, const EpsNet& reference, const TransitionBatch& batch,
                   double lambda) {
    if (lambda < 0.0)
        throw std::invalid_argument("loss_reg: lambda must be nonnegative, got " + std::to_string(lambda));
    if (batch.items.empty()) throw std::invalid_argument("loss_reg: empty transition batch");
    Var acc;
    for (std::size_t i = 0; i < batch.items.size(); ++i) {
        const Transition& item = batch.items[i];
        Var eps_f = eps_forward(tape, policy, constant(tape, item.z_t), item.t, item.cond).out;
        Array eps_r = eps_predict(reference, item.z_t, item.t, item.cond);
        Var term = sqnorm(sub(eps_f, constant(tape, eps_r)));
        acc = i == 0 ? term : add(acc, term);
    }
    return smul(acc, lambda / static_cast<double>(batch.items.size()));
}

}  // namespace nr2d3
