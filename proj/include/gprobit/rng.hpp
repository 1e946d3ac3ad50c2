#pragma once

// Deterministic random streams. Draws are built from raw 64-bit engine output
// rather than <random> distributions so sequences are identical across
// standard library implementations.

#include "truncnorm.hpp"

#include <boost/math/special_functions/erf.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <numbers>
#include <random>

namespace gprobit {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed for substream `stream` of master seed `seed` (e.g. one per region).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t salt = 0) {
    return splitmix64(splitmix64(seed ^ splitmix64(salt)) + stream);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    /// Uniform on the open interval (0, 1).
    double uniform() { return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

    bool bernoulli(double p) { return uniform() < p; }

    std::uint64_t next() { return engine_(); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Inverse-CDF draw of Z ~ N(0, 1) conditioned on Z > a.
inline double sample_std_lower_truncated(double a, double u) {
    using truncnorm::kTailSwitch;
    using truncnorm::log_normal_sf;
    using truncnorm::normal_cdf;
    using truncnorm::normal_sf;
    if (a <= 0.0) {
        const double p = normal_cdf(a) + u * normal_sf(a);
        return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
    }
    if (a < kTailSwitch) {
        const double q = u * normal_sf(a);
        return std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * q);
    }
    // Deep tail: solve log P(Z > x) = log u + log P(Z > a) by Newton.
    const double target = std::log(u) + log_normal_sf(a);
    double x = std::sqrt(a * a - 2.0 * std::log(u));
    for (int it = 0; it < 50; ++it) {
        const double step = (log_normal_sf(x) - target) / truncnorm::hazard(x).h;
        x += step;
        if (x < a) x = a;
        if (std::abs(step) < 1e-15 * x) break;
    }
    return x;
}

/// Draw from N(mu, sigma^2) restricted to the side of zero given by `positive`.
inline double sample_truncated(double mu, double sigma, bool positive, Rng& rng) {
    const double u = rng.uniform();
    // Clamp so rounding never leaves the side implied by the outcome
    // (y = 1 iff the latent value is >= 0).
    if (positive) return std::max(0.0, mu + sigma * sample_std_lower_truncated(-mu / sigma, u));
    const double x = -(-mu + sigma * sample_std_lower_truncated(mu / sigma, u));
    return std::min(x, -std::numeric_limits<double>::denorm_min());
}

}  // namespace gprobit
