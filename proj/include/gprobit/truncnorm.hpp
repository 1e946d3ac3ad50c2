#pragma once

// Moments of a univariate normal truncated to one side of zero.
//
// The model only ever truncates at 0: a positive outcome restricts the latent
// variable to (0, inf), a zero outcome to (-inf, 0). Every kernel reduces the
// zero-outcome case to the positive one by reflection and then works with the
// standardized lower bound a = (0 - mu) / sigma.

#include "common.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace gprobit::truncnorm {

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kInvSqrt2Pi = 0.398942280401432677939946059934;
inline constexpr double kLogSqrt2Pi = 0.918938533204672741780329736406;

// Beyond this standardized bound the Mills ratio comes from its continued
// fraction instead of phi / Phi, which underflows near 37.
inline constexpr double kTailSwitch = 8.0;

struct Bounds {
    double lower;
    double upper;
};

inline Bounds truncation_bounds(bool positive) {
    return positive ? Bounds{0.0, kInf} : Bounds{-kInf, 0.0};
}

inline double normal_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

/// Upper tail Phi(-x) = P(Z > x).
inline double normal_sf(double x) { return 0.5 * std::erfc(x * std::numbers::sqrt2 / 2.0); }

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0); }

namespace detail {

// t(a) = 1 / (a + 2 / (a + 3 / (a + ...))), so that the hazard is a + t(a).
// Evaluated backwards; 120 levels are ample for a >= 8.
inline double mills_tail(double a) {
    double t = 0.0;
    for (int k = 120; k >= 2; --k) t = k / (a + t);
    return 1.0 / (a + t);
}

}  // namespace detail

/// Hazard phi(a) / P(Z > a) split as (hazard, hazard - a). The second value
/// is the mean excess over the bound and is computed without cancellation.
struct Hazard {
    double h;
    double excess;
};

inline Hazard hazard(double a) {
    if (a >= kTailSwitch) {
        const double t = detail::mills_tail(a);
        return {a + t, t};
    }
    const double q = normal_sf(a);
    const double h = normal_pdf(a) / q;
    return {h, h - a};
}

/// log P(Z > x), finite for every finite x.
inline double log_normal_sf(double x) {
    if (x < kTailSwitch) return std::log(normal_sf(x));
    return -0.5 * x * x - kLogSqrt2Pi - std::log(hazard(x).h);
}

struct MillsTerms {
    double rho1;
    double rho2;
};

/// rho1 = (phi(xi1) - phi(xi2)) / (Phi(xi2) - Phi(xi1)),
/// rho2 = (xi1 phi(xi1) - xi2 phi(xi2)) / (Phi(xi2) - Phi(xi1)),
/// with xi_j = (t_j - mu) / sigma and x phi(x) -> 0 at an infinite bound.
inline MillsTerms mills_terms(double mu, double sigma, bool positive) {
    if (!(sigma > 0.0) || !std::isfinite(mu)) throw NumericalError("mills_terms: need sigma > 0 and finite mu");
    if (positive) {
        const double a = -mu / sigma;
        const double h = hazard(a).h;
        return {h, a * h};
    }
    const double b = -mu / sigma;
    const double h = hazard(-b).h;
    return {-h, -b * h};
}

struct TruncMoments {
    double lambda1;  // E[Y]
    double lambda2;  // E[Y^2]
    double l2c;      // central moments of order 2, 3, 4
    double l3c;
    double l4c;
    double rho1;
    double rho2;
};

/// Moments of Y ~ N(mu, sigma^2) restricted to the side of zero given by
/// `positive`.
inline TruncMoments trunc_moments(double mu, double sigma, bool positive) {
    if (!(sigma > 0.0) || !std::isfinite(mu)) throw NumericalError("trunc_moments: need sigma > 0 and finite mu");

    // Reflect the zero-outcome case onto a lower truncation at 0.
    const double m = positive ? mu : -mu;
    const double a = -m / sigma;
    const auto [h, excess] = hazard(a);

    double k2, k3, k4;
    if (a <= 0.0) {
        // Raw-moment forms; h is small here so nothing cancels.
        k2 = 1.0 - h * excess;
        k3 = h * (2.0 * h * h - 3.0 * a * h + a * a - 1.0);
        k4 = 3.0 + h * (3.0 * a + a * a * a) - h * h * (4.0 * a * a + 2.0) + 6.0 * a * h * h * h -
             3.0 * h * h * h * h;
    } else {
        // Moments of the excess W - a: e_{k+1} = k e_{k-1} - a e_k.
        const double e1 = excess;
        const double e2 = 1.0 - a * e1;
        const double e3 = 2.0 * e1 - a * e2;
        const double e4 = 3.0 * e2 - a * e3;
        k2 = e2 - e1 * e1;
        k3 = e3 - 3.0 * e1 * e2 + 2.0 * e1 * e1 * e1;
        k4 = e4 - 4.0 * e1 * e3 + 6.0 * e1 * e1 * e2 - 3.0 * e1 * e1 * e1 * e1;
    }

    const double s2 = sigma * sigma;
    TruncMoments out{};
    // mu + sigma * a is the bound (zero), so the mean is sigma times the excess.
    const double mean = sigma * excess;
    out.lambda1 = positive ? mean : -mean;
    out.l2c = k2 * s2;
    out.l3c = (positive ? 1.0 : -1.0) * k3 * s2 * sigma;
    out.l4c = k4 * s2 * s2;
    out.lambda2 = out.l2c + out.lambda1 * out.lambda1;
    out.rho1 = positive ? h : -h;
    out.rho2 = a * h;
    return out;
}

}  // namespace gprobit::truncnorm
