#pragma once

#include <vector>

#include "nr2d3/array.hpp"
#include "nr2d3/nets.hpp"
#include "nr2d3/rng.hpp"
#include "nr2d3/schedule.hpp"
#include "nr2d3/tape.hpp"

namespace nr2d3 {

// One reverse-process transition p(x_{t-1} | x_t) = N(mean, std^2 I).
struct GaussianTransition {
    Array mean;
    double std = 0.0;
};

// A sampled reverse chain. States are indexed by time, z[t] for t = 0..T; the per-step
// records at index t describe the t -> t-1 transition (slot 0 unused). `std` holds the
// effective value used while stepping, so z[t-1] = mean[t] + std[t] * noise[t] replays the
// chain exactly.
struct Trajectory {
    int T = 0;
    int cond = -1;
    std::vector<int> times;  // T, T-1, ..., 0
    std::vector<Array> z;
    std::vector<Array> noise;
    std::vector<Array> mean;
    std::vector<double> std;
};

// Coefficients of the reverse-transition mean: mean = inv_sqrt_alpha * (x - eps_coef * eps).
// Shared by the plain sampler and the taped loss construction so both compute the same mean.
struct PosteriorCoef {
    double inv_sqrt_alpha = 1.0;
    double eps_coef = 0.0;
};

PosteriorCoef posterior_coef(const NoiseSchedule& sched, int t);

// Forward-process sample x_t = a_t x0 + s_t eps. Requires 0 <= t <= T and matching shapes.
Array q_sample(const NoiseSchedule& sched, const Array& x0, int t, const Array& eps);

// Reverse transition from the noise prediction at (x_t, t). cfg_scale 1 uses the plain
// conditional prediction; otherwise the guided composition of the conditional and null
// predictions. The std is the schedule's posterior std (always positive). Requires t >= 1.
GaussianTransition reverse_transition(const EpsFn& eps, const NoiseSchedule& sched, const Array& x_t, int t, int cond,
                                      double cfg_scale = 1.0);

// Isotropic Gaussian log-density and its gradient in x_next. Rejects std <= 0.
double log_prob(const GaussianTransition& tr, const Array& x_next);
Array grad_log_prob(const GaussianTransition& tr, const Array& x_next);

// Sum over the chain of per-step log-density ratios log p_sampler - log p_other. The
// sampler side reuses the trajectory's stored mean/std; `other` is re-evaluated along the
// path. Averaged over sampler trajectories this is a Monte-Carlo path-KL estimate.
double path_log_ratio(const Trajectory& traj, const EpsFn& other, const NoiseSchedule& sched, double cfg_scale = 1.0);

// Expected clean state (x_t - s_t eps) / a_t. Rejects t < 1 and a_t below 1e-8.
Array one_step_prediction_from_eps(const NoiseSchedule& sched, const Array& x_t, const Array& eps, int t);
Array one_step_prediction(const EpsFn& eps, const NoiseSchedule& sched, const Array& x_t, int t, int cond);

// Taped (x_t - s_t eps(x_t)) / a_t, differentiable in x_t and the bound parameters. Same
// rejection rules as the plain version.
Var taped_one_step_prediction(Tape& tape, const EpsVars& vars, const NoiseSchedule& sched, Var x_t, int t, int cond);

// Ancestral sampling from z_T ~ N(0, I). std_scale multiplies the per-step posterior std
// (0 gives the deterministic mean chain); the value actually used is recorded in the
// trajectory. Aborts with the step index if a state goes non-finite.
Trajectory sample_trajectory(const EpsFn& eps, const NoiseSchedule& sched, const Shape& shape, int cond, Rng& rng,
                             double cfg_scale = 1.0, double std_scale = 1.0);

// Verifies that every stored transition reproduces the stored next state from the stored
// noise draw, bit for bit.
bool replay_ok(const Trajectory& traj);

// Monte-Carlo denoising loss E[ || eps_net(a_t x0 + s_t eps, t) - eps ||^2 ] over the batch,
// with t uniform on {1..T}. Labels are dropped to the null label with the given
// probability. Built on the tape so the gradient with respect to the bound parameters is
// available through backward().
Var pretrain_loss(Tape& tape, const EpsVars& vars, const NoiseSchedule& sched, const std::vector<Array>& x0,
                  const std::vector<int>& cond, Rng& rng, double label_dropout = 0.1);

}  // namespace nr2d3
