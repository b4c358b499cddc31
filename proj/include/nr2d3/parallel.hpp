#pragma once

#include <cstdint>
#include <functional>

namespace nr2d3 {

// Worker cap from the NR2D3_THREADS environment variable. Unset, unparseable, or
// non-positive values all mean one worker.
int max_workers();

// Runs fn(i) for every i in [0, n) on at most max_workers() threads. Iterations must be
// independent and write only their own output slot; results are then identical to the
// sequential order for any thread count. The first exception thrown by any iteration is
// rethrown after all workers join.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

}  // namespace nr2d3
