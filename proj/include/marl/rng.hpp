#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

#include <Eigen/Dense>

namespace marl {

/// All randomness flows through this engine. std::mt19937_64 is fully
/// specified by the standard, and the helpers below avoid the
/// implementation-defined std::*_distribution classes, so streams are
/// reproducible across compilers.
using Rng = std::mt19937_64;

/// SplitMix64 finalizer.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Counter-based child seed: stream `index` of `master`. Adding streams never
/// perturbs existing ones.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
    return mix64(mix64(master) ^ mix64(index + 0x632be59bd9b4e019ULL));
}

inline Rng make_rng(std::uint64_t seed) { return Rng{mix64(seed)}; }

/// Uniform double in [0, 1) with 53 random bits.
inline double unit_double(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, n) by rejection (unbiased).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: empty range");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = rng();
    } while (x >= limit);
    return x % n;
}

/// Standard normal via Box-Muller (one value per call).
inline double standard_normal(Rng& rng) {
    double u1 = unit_double(rng);
    while (u1 <= 0.0) u1 = unit_double(rng);
    const double u2 = unit_double(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

/// Exp(1) variate.
inline double standard_exponential(Rng& rng) {
    double u = unit_double(rng);
    while (u <= 0.0) u = unit_double(rng);
    return -std::log(u);
}

/// Inverse-CDF draw from a probability vector. Mass is not renormalized;
/// any rounding shortfall falls on the last positive entry.
template <typename Vec>
Eigen::Index sample_categorical(Rng& rng, const Vec& probs) {
    const double u = unit_double(rng);
    double acc = 0.0;
    Eigen::Index last = -1;
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        acc += probs[i];
        last = i;
        if (u < acc) return i;
    }
    if (last < 0) throw std::invalid_argument("sample_categorical: no positive mass");
    return last;
}

} // namespace marl
