#include "nr2d3/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nr2d3 {

ScheduleKind schedule_kind_from_string(const std::string& name) {
    if (name == "linear-alpha-bar") return ScheduleKind::LinearAlphaBar;
    if (name == "cosine") return ScheduleKind::Cosine;
    throw std::invalid_argument("make_schedule: unknown schedule kind '" + name + "'");
}

std::string schedule_kind_name(ScheduleKind kind) {
    return kind == ScheduleKind::LinearAlphaBar ? "linear-alpha-bar" : "cosine";
}

namespace {

// Fills the derived per-step fields from the cumulative a_t^2 sequence. The posterior std
// is the standard DDPM choice sqrt((1 - abar_{t-1}) / (1 - abar_t) * beta_t); at t = 1 that
// expression collapses to zero (abar_0 = 1), so sqrt(beta_1) is used instead to keep every
// reverse transition a proper Gaussian.
void finish_from_bar_alpha(NoiseSchedule& sch, const std::vector<double>& bar) {
    const int T = sch.T;
    sch.a.assign(static_cast<std::size_t>(T) + 1, 0.0);
    sch.s.assign(static_cast<std::size_t>(T) + 1, 0.0);
    sch.alpha.assign(static_cast<std::size_t>(T) + 1, 1.0);
    sch.beta.assign(static_cast<std::size_t>(T) + 1, 0.0);
    sch.post_std.assign(static_cast<std::size_t>(T) + 1, 0.0);
    for (int t = 0; t <= T; ++t) {
        sch.a[static_cast<std::size_t>(t)] = std::sqrt(bar[static_cast<std::size_t>(t)]);
        sch.s[static_cast<std::size_t>(t)] = std::sqrt(1.0 - bar[static_cast<std::size_t>(t)]);
    }
    for (int t = 1; t <= T; ++t) {
        const double al = bar[static_cast<std::size_t>(t)] / bar[static_cast<std::size_t>(t - 1)];
        sch.alpha[static_cast<std::size_t>(t)] = al;
        sch.beta[static_cast<std::size_t>(t)] = 1.0 - al;
        const double var = (t == 1) ? sch.beta[1]
                                    : (1.0 - bar[static_cast<std::size_t>(t - 1)]) /
                                          (1.0 - bar[static_cast<std::size_t>(t)]) * sch.beta[static_cast<std::size_t>(t)];
        sch.post_std[static_cast<std::size_t>(t)] = std::sqrt(var);
    }
}

}  // namespace

NoiseSchedule make_schedule(ScheduleKind kind, int T) {
    if (T < 2) throw std::invalid_argument("make_schedule: T must be at least 2, got " + std::to_string(T));
    NoiseSchedule sch;
    sch.T = T;
    std::vector<double> bar(static_cast<std::size_t>(T) + 1, 1.0);
    if (kind == ScheduleKind::LinearAlphaBar) {
        for (int t = 0; t <= T; ++t)
            bar[static_cast<std::size_t>(t)] = 1.0 - 0.99 * static_cast<double>(t) / static_cast<double>(T);
    } else {
        const double off = 0.008;
        auto f = [&](double u) {
            const double c = std::cos((u + off) / (1.0 + off) * (M_PI / 2.0));
            return c * c;
        };
        // Build per-step betas from the cosine profile (the f(0) normalization cancels in the
        // ratios), clip them, then re-accumulate so the stored cumulative products stay
        // consistent with the clipped steps.
        double acc = 1.0;
        for (int t = 1; t <= T; ++t) {
            const double raw_ratio = f(static_cast<double>(t) / T) / f(static_cast<double>(t - 1) / T);
            const double beta = std::min(1.0 - raw_ratio, 0.999);
            acc *= 1.0 - beta;
            bar[static_cast<std::size_t>(t)] = acc;
        }
    }
    finish_from_bar_alpha(sch, bar);
    return sch;
}

}  // namespace nr2d3
