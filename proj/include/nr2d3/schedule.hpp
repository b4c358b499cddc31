#pragma once

#include <string>
#include <vector>

namespace nr2d3 {

// Variance-preserving noise schedule over discrete steps t = 0..T. Index t holds the
// cumulative signal/noise scales of q(x_t | x_0) = N(a_t x_0, s_t^2 I), so a_0 = 1 and
// s_0 = 0 (clean data), with a_t strictly decreasing and a_t^2 + s_t^2 = 1 throughout.
// Per-step quantities (alpha, beta, posterior std) describe the t -> t-1 transition and
// are stored at index t with slot 0 unused.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> a;         // cumulative signal scale, size T+1
    std::vector<double> s;         // cumulative noise scale, size T+1
    std::vector<double> alpha;     // per-step signal ratio a_t^2 / a_{t-1}^2, size T+1, [0] unused
    std::vector<double> beta;      // 1 - alpha, size T+1, [0] unused
    std::vector<double> post_std;  // std of the reverse transition t -> t-1, size T+1, [0] unused

    double bar_alpha(int t) const { return a.at(static_cast<std::size_t>(t)) * a.at(static_cast<std::size_t>(t)); }
};

enum class ScheduleKind { LinearAlphaBar, Cosine };

ScheduleKind schedule_kind_from_string(const std::string& name);
std::string schedule_kind_name(ScheduleKind kind);

// Builds a schedule of the given kind. LinearAlphaBar interpolates a_t^2 linearly from 1
// at t=0 to 0.01 at t=T. Cosine uses the squared-cosine profile with offset 0.008 and
// per-step beta clipped at 0.999. Rejects T < 2.
NoiseSchedule make_schedule(ScheduleKind kind, int T);

}  // namespace nr2d3
