#include "nr2d3/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace nr2d3 {

namespace {

void check_step(const NoiseSchedule& sched, int t, int lo, const char* where) {
    if (t < lo || t > sched.T)
        throw std::invalid_argument(std::string(where) + ": step " + std::to_string(t) + " outside [" +
                                    std::to_string(lo) + ", " + std::to_string(sched.T) + "]");
}

}  // namespace

PosteriorCoef posterior_coef(const NoiseSchedule& sched, int t) {
    check_step(sched, t, 1, "posterior_coef");
    PosteriorCoef c;
    c.inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha[static_cast<std::size_t>(t)]);
    c.eps_coef = sched.beta[static_cast<std::size_t>(t)] / sched.s[static_cast<std::size_t>(t)];
    return c;
}

Array q_sample(const NoiseSchedule& sched, const Array& x0, int t, const Array& eps) {
    check_step(sched, t, 0, "q_sample");
    if (!same_shape(x0, eps))
        throw std::invalid_argument("q_sample: x0 shape " + shape_str(x0.shape()) + " differs from eps shape " +
                                    shape_str(eps.shape()));
    Array out = x0;
    out.data() = sched.a[static_cast<std::size_t>(t)] * x0.data() + sched.s[static_cast<std::size_t>(t)] * eps.data();
    return out;
}

GaussianTransition reverse_transition(const EpsFn& eps, const NoiseSchedule& sched, const Array& x_t, int t, int cond,
                                      double cfg_scale) {
    check_step(sched, t, 1, "reverse_transition");
    if (cfg_scale < 0.0)
        throw std::invalid_argument("reverse_transition: cfg scale must be nonnegative, got " +
                                    std::to_string(cfg_scale));
    Array e = eps(x_t, t, cond);
    if (cfg_scale != 1.0) e = cfg_compose(e, eps(x_t, t, -1), cfg_scale);
    const PosteriorCoef c = posterior_coef(sched, t);
    GaussianTransition tr;
    tr.mean = x_t;
    tr.mean.data() = c.inv_sqrt_alpha * (x_t.data() - c.eps_coef * e.data());
    tr.std = sched.post_std[static_cast<std::size_t>(t)];
    return tr;
}

double log_prob(const GaussianTransition& tr, const Array& x_next) {
    if (tr.std <= 0.0) throw std::invalid_argument("log_prob: std must be positive, got " + std::to_string(tr.std));
    if (!same_shape(tr.mean, x_next))
        throw std::invalid_argument("log_prob: state shape " + shape_str(x_next.shape()) + " differs from mean shape " +
                                    shape_str(tr.mean.shape()));
    const double n = static_cast<double>(x_next.numel());
    const double sq = (x_next.data() - tr.mean.data()).square().sum();
    return -0.5 * n * std::log(2.0 * std::numbers::pi * tr.std * tr.std) - sq / (2.0 * tr.std * tr.std);
}

Array grad_log_prob(const GaussianTransition& tr, const Array& x_next) {
    if (tr.std <= 0.0)
        throw std::invalid_argument("grad_log_prob: std must be positive, got " + std::to_string(tr.std));
    if (!same_shape(tr.mean, x_next))
        throw std::invalid_argument("grad_log_prob: state shape " + shape_str(x_next.shape()) +
                                    " differs from mean shape " + shape_str(tr.mean.shape()));
    Array g = x_next;
    g.data() = -(x_next.data() - tr.mean.data()) / (tr.std * tr.std);
    return g;
}

double path_log_ratio(const Trajectory& traj, const EpsFn& other, const NoiseSchedule& sched, double cfg_scale) {
    if (traj.T != sched.T)
        throw std::invalid_argument("path_log_ratio: trajectory horizon " + std::to_string(traj.T) +
                                    " does not match schedule horizon " + std::to_string(sched.T));
    double total = 0.0;
    for (int t = traj.T; t >= 1; --t) {
        const Array& next = traj.z[static_cast<std::size_t>(t - 1)];
        GaussianTransition sampler;
        sampler.mean = traj.mean[static_cast<std::size_t>(t)];
        sampler.std = traj.std[static_cast<std::size_t>(t)];
        GaussianTransition ref = reverse_transition(other, sched, traj.z[static_cast<std::size_t>(t)], t, traj.cond,
                                                    cfg_scale);
        total += log_prob(sampler, next) - log_prob(ref, next);
    }
    return total;
}

Array one_step_prediction_from_eps(const NoiseSchedule& sched, const Array& x_t, const Array& eps, int t) {
    check_step(sched, t, 1, "one_step_prediction");
    if (!same_shape(x_t, eps))
        throw std::invalid_argument("one_step_prediction: state shape " + shape_str(x_t.shape()) +
                                    " differs from eps shape " + shape_str(eps.shape()));
    const double a = sched.a[static_cast<std::size_t>(t)];
    if (a < 1e-8)
        throw std::invalid_argument("one_step_prediction: signal scale " + std::to_string(a) + " at step " +
                                    std::to_string(t) + " is numerically singular");
    // Multiply by the reciprocal rather than divide, matching the taped construction (sub
    // followed by scalar-mul) bit for bit.
    Array out = x_t;
    out.data() = (x_t.data() - sched.s[static_cast<std::size_t>(t)] * eps.data()) * (1.0 / a);
    return out;
}

Array one_step_prediction(const EpsFn& eps, const NoiseSchedule& sched, const Array& x_t, int t, int cond) {
    check_step(sched, t, 1, "one_step_prediction");
    return one_step_prediction_from_eps(sched, x_t, eps(x_t, t, cond), t);
}

Var taped_one_step_prediction(Tape& tape, const EpsVars& vars, const NoiseSchedule& sched, Var x_t, int t, int cond) {
    check_step(sched, t, 1, "one_step_prediction");
    const double a = sched.a[static_cast<std::size_t>(t)];
    if (a < 1e-8)
        throw std::invalid_argument("one_step_prediction: signal scale " + std::to_string(a) + " at step " +
                                    std::to_string(t) + " is numerically singular");
    EpsFwd fwd = eps_forward(tape, vars, x_t, t, cond);
    return smul(sub(x_t, smul(fwd.out, sched.s[static_cast<std::size_t>(t)])), 1.0 / a);
}

Trajectory sample_trajectory(const EpsFn& eps, const NoiseSchedule& sched, const Shape& shape, int cond, Rng& rng,
                             double cfg_scale, double std_scale) {
    if (std_scale < 0.0)
        throw std::invalid_argument("sample_trajectory: std scale must be nonnegative, got " +
                                    std::to_string(std_scale));
    const int T = sched.T;
    Trajectory traj;
    traj.T = T;
    traj.cond = cond;
    traj.z.assign(static_cast<std::size_t>(T) + 1, Array());
    traj.noise.assign(static_cast<std::size_t>(T) + 1, Array());
    traj.mean.assign(static_cast<std::size_t>(T) + 1, Array());
    traj.std.assign(static_cast<std::size_t>(T) + 1, 0.0);
    for (int t = T; t >= 0; --t) traj.times.push_back(t);

    traj.z[static_cast<std::size_t>(T)] = rng.normal_array(shape);
    for (int t = T; t >= 1; --t) {
        const Array& cur = traj.z[static_cast<std::size_t>(t)];
        if (!cur.all_finite())
            throw std::runtime_error("sample_trajectory: non-finite state at step " + std::to_string(t));
        GaussianTransition tr = reverse_transition(eps, sched, cur, t, cond, cfg_scale);
        const double eff_std = std_scale * tr.std;
        Array noise = rng.normal_array(shape);
        Array next = tr.mean;
        next.data() = tr.mean.data() + eff_std * noise.data();
        traj.noise[static_cast<std::size_t>(t)] = std::move(noise);
        traj.mean[static_cast<std::size_t>(t)] = std::move(tr.mean);
        traj.std[static_cast<std::size_t>(t)] = eff_std;
        traj.z[static_cast<std::size_t>(t - 1)] = std::move(next);
    }
    if (!traj.z[0].all_finite()) throw std::runtime_error("sample_trajectory: non-finite state at step 0");
    return traj;
}

bool replay_ok(const Trajectory& traj) {
    if (traj.z.size() != static_cast<std::size_t>(traj.T) + 1) return false;
    for (int t = traj.T; t >= 1; --t) {
        const Array& mean = traj.mean[static_cast<std::size_t>(t)];
        const Array& noise = traj.noise[static_cast<std::size_t>(t)];
        if (!same_shape(mean, noise)) return false;
        Array next = mean;
        next.data() = mean.data() + traj.std[static_cast<std::size_t>(t)] * noise.data();
        if (!bit_equal(next, traj.z[static_cast<std::size_t>(t - 1)])) return false;
    }
    return true;
}

Var pretrain_loss(Tape& tape, const EpsVars& vars, const NoiseSchedule& sched, const std::vector<Array>& x0,
                  const std::vector<int>& cond, Rng& rng, double label_dropout) {
    if (x0.empty()) throw std::invalid_argument("pretrain_loss: empty batch");
    if (cond.size() != x0.size())
        throw std::invalid_argument("pretrain_loss: batch has " + std::to_string(x0.size()) + " states but " +
                                    std::to_string(cond.size()) + " labels");
    Var total = constant(tape, 0.0);
    for (std::size_t i = 0; i < x0.size(); ++i) {
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
        Array eps = rng.normal_array(x0[i].shape());
        const int label = (rng.uniform() < label_dropout) ? -1 : cond[i];
        Var x_t = constant(tape, q_sample(sched, x0[i], t, eps));
        EpsFwd fwd = eps_forward(tape, vars, x_t, t, label);
        total = add(total, sqnorm(sub(fwd.out, constant(tape, std::move(eps)))));
    }
    return smul(total, 1.0 / static_cast<double>(x0.size()));
}

}  // namespace nr2d3
