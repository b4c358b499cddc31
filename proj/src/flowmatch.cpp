#include "nr2d3/flowmatch.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace nr2d3 {

Array fm_drift(const VField& v, const ScheduleFn& alpha, const ScheduleFn& beta,
               const std::function<double(double)>& sigma, const Array& x, double t) {
    const double al = alpha.value(t);
    if (al == 0.0) throw std::invalid_argument("fm_drift: alpha(t) = 0 at t = " + std::to_string(t));
    const double rate = alpha.deriv(t) / al;
    const double b = beta.value(t);
    const double denom = 2.0 * b * (rate * b - beta.deriv(t));
    if (std::abs(denom) < 1e-10)
        throw std::invalid_argument("fm_drift: singular schedule at t = " + std::to_string(t) +
                                    " (denominator " + std::to_string(denom) + ")");
    const double sg = sigma(t);
    Array vel = v(x, t);
    if (!same_shape(vel, x)) throw std::invalid_argument("fm_drift: velocity shape differs from state shape");
    Array out = vel;
    out.data() += (sg * sg / denom) * (vel.data() - rate * x.data());
    return out;
}

Array rf_score(const VField& v, const Array& x, double t) {
    if (t <= 0.0) throw std::invalid_argument("rf_score: t must be positive, got " + std::to_string(t));
    Array vel = v(x, t);
    if (!same_shape(vel, x)) throw std::invalid_argument("rf_score: velocity shape differs from state shape");
    Array out = x;
    out.data() = -(x.data() / t + (1.0 - t) / t * vel.data());
    return out;
}

Array rf_sde_step(const VField& v, const Array& x, double t, double dt, double sigma_t, Rng& rng) {
    if (t <= 0.0 || t > 1.0) throw std::invalid_argument("rf_sde_step: t must be in (0,1], got " + std::to_string(t));
    if (dt <= 0.0) throw std::invalid_argument("rf_sde_step: dt must be positive, got " + std::to_string(dt));
    if (t - dt < 0.0)
        throw std::invalid_argument("rf_sde_step: step from t = " + std::to_string(t) + " by dt = " +
                                    std::to_string(dt) + " crosses time 0");
    Array vel = v(x, t);
    if (!same_shape(vel, x)) throw std::invalid_argument("rf_sde_step: velocity shape differs from state shape");
    Array out = x;
    out.data() -= dt * (vel.data() + (sigma_t * sigma_t / (2.0 * t)) * (x.data() + (1.0 - t) * vel.data()));
    if (sigma_t != 0.0) {
        const Array noise = rng.normal_array(x.shape());
        out.data() += sigma_t * std::sqrt(dt) * noise.data();
    }
    return out;
}

}  // namespace nr2d3
