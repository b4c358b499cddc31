#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "nr2d3/array.hpp"

namespace nr2d3 {

// Deterministic splitmix64 stream. Self-contained so that trajectories, camera draws and
// checkpointed rng state are bit-stable across platforms and toolchains; the standard
// <random> distributions are implementation-defined, which would break the byte-identical
// CSV contract.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in the open interval (0,1); never returns 0, so log() is always safe.
    double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    // One Box-Muller draw per call (the sine partner is discarded); keeps the stream
    // position a pure function of the call count, which substream derivation relies on.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    Array normal_array(Shape shape) {
        auto n = shape_numel(shape);
        Flat d(n);
        for (std::int64_t i = 0; i < n; ++i) d(i) = normal();
        return Array(std::move(shape), std::move(d));
    }

    // Deterministic substream: mixes the tag into a fresh seed without disturbing this stream.
    Rng derive(std::uint64_t tag) const {
        Rng mix(state_ ^ (0x510e527fade682d1ULL + tag * 0x9e3779b97f4a7c15ULL));
        mix.next_u64();
        return Rng(mix.next_u64());
    }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

private:
    std::uint64_t state_;
};

}  // namespace nr2d3
