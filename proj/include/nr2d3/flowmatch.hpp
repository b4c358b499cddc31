#pragma once

#include <functional>

#include "nr2d3/array.hpp"
#include "nr2d3/rng.hpp"

namespace nr2d3 {

// Velocity field of a continuous-time flow model: v(x, t).
using VField = std::function<Array(const Array&, double)>;

// A scalar schedule supplied with its analytic derivative, e.g. the interpolation weights
// alpha(t), beta(t) of x_t = alpha_t x_0 + beta_t eps.
struct ScheduleFn {
    std::function<double(double)> value;
    std::function<double(double)> deriv;
};

// Converts a flow-matching velocity field into the drift of an equivalent SDE with
// diffusion coefficient sigma(t):
//
//   drift = v + sigma(t)^2 / (2 beta_t ((alpha'_t/alpha_t) beta_t - beta'_t)) * (v - (alpha'_t/alpha_t) x)
//
// Under the interpolation x_t = alpha_t x_0 + beta_t eps (data weight alpha rising from 0
// to 1, noise weight beta falling from 1 to 0), integrating dx = drift dt + sigma dW
// forward in t from the noise marginal reproduces the flow's marginals. Rejects t where
// the denominator magnitude falls below 1e-10.
Array fm_drift(const VField& v, const ScheduleFn& alpha, const ScheduleFn& beta,
               const std::function<double(double)>& sigma, const Array& x, double t);

// Score of the marginal density of a rectified flow with data at interpolation time 0 and
// standard normal noise at time 1 (x_t = (1-t) x_0 + t eps):
//
//   score(x, t) = -[(1/t) x + ((1-t)/t) v(x, t)]
//
// Rejects t <= 0.
Array rf_score(const VField& v, const Array& x, double t);

// One Euler-Maruyama step of the reverse-time sampling SDE for the same rectified flow,
// moving from time t to t - dt with diffusion coefficient sigma_t:
//
//   x' = x - [v + sigma_t^2/(2t) (x + (1-t) v)] dt + sigma_t sqrt(dt) xi,  xi ~ N(0, I)
//
// Rejects t outside (0, 1], nonpositive dt, and steps that would cross time 0.
Array rf_sde_step(const VField& v, const Array& x, double t, double dt, double sigma_t, Rng& rng);

}  // namespace nr2d3
