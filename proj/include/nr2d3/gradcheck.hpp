#pragma once

#include <cmath>
#include <functional>

#include "nr2d3/array.hpp"

namespace nr2d3 {

// Relative error with an absolute floor of 1: small gradients are compared absolutely,
// large ones relatively. Used by every finite-difference check in the test suites.
inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::int64_t worst_coordinate = -1;
    int nonfinite_coordinates = 0;  // perturbed evaluations that came back non-finite
};

// Central finite differences, independent of the tape: the oracle against which backward()
// is verified. Per-coordinate step h = step*(1+|x_i|).
inline GradCheckReport grad_check(const std::function<double(const Array&)>& f, const Array& x,
                                  const Array& analytic_grad, double step = 1e-4) {
    if (!same_shape(x, analytic_grad))
        throw std::invalid_argument("grad_check: gradient shape " + shape_str(analytic_grad.shape()) +
                                    " does not match point shape " + shape_str(x.shape()));
    if (step <= 0) throw std::invalid_argument("grad_check: step must be positive");
    GradCheckReport rep;
    Array p = x;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        double h = step * (1.0 + std::abs(x[i]));
        double orig = p[i];
        p[i] = orig + h;
        double fp = f(p);
        p[i] = orig - h;
        double fm = f(p);
        p[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            ++rep.nonfinite_coordinates;
            continue;
        }
        double fd = (fp - fm) / (2.0 * h);
        double e = rel_err(fd, analytic_grad[i]);
        if (e > rep.max_rel_err) {
            rep.max_rel_err = e;
            rep.worst_coordinate = i;
        }
    }
    return rep;
}

}  // namespace nr2d3
