#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace rflow {

namespace detail {

inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace detail

// SplitMix64 generator with counter-based stream derivation. Every training
// draw is derived from (seed, stream path), so a run can be resumed at any
// step without serializing generator state.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        return detail::mix64(state_);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // (0, 1]
    double uniform_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    // (0, 1) strictly
    double uniform_open() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53 + 0x1.0p-54;
    }

    // Box-Muller; consumes exactly two raw draws per normal.
    double normal() {
        double u1 = uniform_pos();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    // Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(next_u64() % span);
    }

private:
    uint64_t state_;
};

// Independent stream for a (seed, path) pair, e.g. {epoch, batch, sample}.
inline Rng derive_rng(uint64_t seed, std::initializer_list<uint64_t> path) {
    uint64_t s = detail::mix64(seed + 0x9E3779B97F4A7C15ull);
    for (uint64_t id : path) s = detail::mix64(s ^ (0xD1B54A32D192ED03ull * (id + 1)));
    return Rng(s);
}

}  // namespace rflow
