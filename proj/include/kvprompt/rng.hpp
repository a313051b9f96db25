#pragma once

#include <cmath>
#include <cstdint>

namespace kvp {

// Counter-free splittable generator built on SplitMix64. Every stream is a
// pure function of the root seed, so a whole run is reproducible from one
// integer. Distributions are hand-rolled (Box-Muller, rejection) instead of
// <random> so the byte-exact determinism contract does not depend on the
// standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(mix(seed ^ 0x9e3779b97f4a7c15ULL)) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix(state_);
    }

    // Independent stream derived from this generator's seed and a label.
    // Forking does not advance the parent state.
    Rng fork(std::uint64_t stream) const {
        return Rng(mix(state_ ^ mix(stream + 0x632be59bd9b4e019ULL)));
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n). n must be > 0.
    std::uint64_t uniform_index(std::uint64_t n) {
        // Rejection to kill modulo bias; loops are astronomically rare for
        // the small n used here.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    // Standard normal via Box-Muller. One draw per call; the paired value is
    // discarded to keep the consumption pattern deterministic and simple.
    double normal() {
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Normal truncated at +-2 standard deviations (transformer convention).
    double truncated_normal(double stddev) {
        double v;
        do {
            v = normal();
        } while (v < -2.0 || v > 2.0);
        return v * stddev;
    }

    // He (Kaiming) normal: std = sqrt(2 / fan_in), untruncated.
    double he_normal(std::size_t fan_in) {
        return normal() * std::sqrt(2.0 / static_cast<double>(fan_in));
    }

    template <class Vec>
    void shuffle(Vec& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
};

}  // namespace kvp
