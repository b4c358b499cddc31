#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace nr2d3 {

struct PathResult {
    std::string name;
    int instances = 0;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    double seconds = 0.0;
    bool pass() const { return max_rel_err <= tolerance; }
};

// Central finite-difference verification of every differentiable path against its
// reverse-mode gradient: the tape op set, both networks (parameter and input
// gradients), the low-rank adapter, the renderer, every reward kind, the reward
// gradient target, and all training losses. Runs `instances` fresh random instances
// per path; op paths must stay within 1e-4 relative error, loss paths within 1e-3.
std::vector<PathResult> run_gradient_suite(int instances, std::uint64_t seed);

// One line per path, aligned, with PASS/FAIL, worst error, tolerance, and runtime.
std::string gradient_suite_table(const std::vector<PathResult>& results);

bool gradient_suite_ok(const std::vector<PathResult>& results);

}  // namespace nr2d3
