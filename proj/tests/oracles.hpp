#pragma once

// Independent reference computations used by the test suites: numerical
// quadrature, dense linear algebra, brute-force counting and a generic
// convex solver. Nothing here calls into the closed forms being checked.

#include <gprobit/gprobit.hpp>

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

namespace oracle {

using gprobit::Index;
using gprobit::Mat;
using gprobit::Vec;

struct Moments {
    double m1, m2, c2, c3, c4;
};

// Moments of N(mu, sigma^2) restricted to x > 0 (positive) or x < 0, by
// adaptive quadrature of the unnormalized density over t in (0, inf) with
// x = sign * t. The exponent is shifted by its value at the feasible point
// nearest to mu, and t is rescaled to the width of the feasible mass, so
// deep tails neither underflow nor collapse onto the endpoint.
inline Moments truncated_moments(double mu, double sigma, bool positive) {
    const double s = positive ? 1.0 : -1.0;
    const double a = s * mu;  // mode distance inside the feasible side
    const double scale = a >= 0.0 ? sigma : std::min(sigma, sigma * sigma / -a);
    const double x0 = a >= 0.0 ? mu : 0.0;
    auto dens = [&](double t) {
        const double x = s * t * scale;
        return std::exp(-((x - mu) * (x - mu) - (x0 - mu) * (x0 - mu)) / (2.0 * sigma * sigma));
    };
    boost::math::quadrature::exp_sinh<double> q;
    auto integ = [&](const std::function<double(double)>& g) {
        return q.integrate(
            [&](double t) {
                const double d = dens(t);
                return d > 0.0 ? g(t) * d : 0.0;
            },
            0.0, std::numeric_limits<double>::infinity());
    };
    const double z = integ([](double) { return 1.0; });
    const double m1 = integ([&](double t) { return s * t * scale; }) / z;
    auto central = [&](int k) { return integ([&](double t) { return std::pow(s * t * scale - m1, k); }) / z; };
    Moments m;
    m.m1 = m1;
    m.c2 = central(2);
    m.c3 = central(3);
    m.c4 = central(4);
    m.m2 = m.c2 + m1 * m1;
    return m;
}

// Bivariate normal N(mean, cov) restricted to the orthant given by the signs
// of y; moments by nested Gauss-Kronrod quadrature on a box of +-12
// standard deviations around the mean, clipped to the orthant.
struct Orthant2d {
    std::array<double, 2> mean;
    std::array<double, 3> second;  // E[x1^2], E[x2^2], E[x1 x2]
};

inline Orthant2d orthant_moments_2d(const Vec& mean, const Mat& cov, const std::array<int, 2>& y) {
    const double s1 = std::sqrt(cov(0, 0)), s2 = std::sqrt(cov(1, 1));
    const Mat P = cov.inverse();
    auto range = [](double m, double s, int yy) {
        double lo = m - 12.0 * s, hi = m + 12.0 * s;
        if (yy == 1) lo = std::max(lo, 0.0);
        else hi = std::min(hi, 0.0);
        return std::array<double, 2>{lo, std::max(lo, hi)};
    };
    const auto r1 = range(mean(0), s1, y[0]);
    const auto r2 = range(mean(1), s2, y[1]);
    auto dens = [&](double a, double b) {
        const double d0 = a - mean(0), d1 = b - mean(1);
        return std::exp(-0.5 * (P(0, 0) * d0 * d0 + 2.0 * P(0, 1) * d0 * d1 + P(1, 1) * d1 * d1));
    };
    using GK = boost::math::quadrature::gauss_kronrod<double, 61>;
    auto outer = [&](const std::function<double(double, double)>& g) {
        return GK::integrate(
            [&](double a) {
                return GK::integrate([&](double b) { return g(a, b) * dens(a, b); }, r2[0], r2[1], 8, 1e-13);
            },
            r1[0], r1[1], 8, 1e-13);
    };
    const double z = outer([](double, double) { return 1.0; });
    Orthant2d o;
    o.mean = {outer([](double a, double) { return a; }) / z, outer([](double, double b) { return b; }) / z};
    o.second = {outer([](double a, double) { return a * a; }) / z, outer([](double, double b) { return b * b; }) / z,
                outer([](double a, double b) { return a * b; }) / z};
    return o;
}

inline std::array<double, 2> orthant_mean_2d(const Vec& mean, const Mat& cov, const std::array<int, 2>& y) {
    return orthant_moments_2d(mean, cov, y).mean;
}

// Leave-one-out conditional of y*_i given y*_{-i} from the dense model
// covariance: coefficient row and conditional variance.
struct DenseLoo {
    Vec coef;  // length N, zero at i
    double var;
};

inline DenseLoo dense_loo(const Mat& Sigma_r, Index i) {
    const Index n = Sigma_r.rows();
    std::vector<Index> rest;
    for (Index j = 0; j < n; ++j)
        if (j != i) rest.push_back(j);
    const Index m = static_cast<Index>(rest.size());
    Mat S_mm(m, m);
    Vec s_im(m);
    for (Index a = 0; a < m; ++a) {
        s_im(a) = Sigma_r(i, rest[static_cast<std::size_t>(a)]);
        for (Index b = 0; b < m; ++b) S_mm(a, b) = Sigma_r(rest[static_cast<std::size_t>(a)], rest[static_cast<std::size_t>(b)]);
    }
    const Mat inv = S_mm.inverse();
    const Vec c = inv * s_im;
    DenseLoo out;
    out.coef = Vec::Zero(n);
    for (Index a = 0; a < m; ++a) out.coef(rest[static_cast<std::size_t>(a)]) = c(a);
    out.var = Sigma_r(i, i) - s_im.dot(c);
    return out;
}

// Random-effect moments from the dense conditional-normal formulas:
// E[u|y] = S Z' Sr^{-1} m, E[uu'|y] = S Z' Sr^{-1} M Sr^{-1} Z S + S - S Z' Sr^{-1} Z S.
inline std::pair<Vec, Mat> dense_u_moments(const Mat& Z, const Mat& SigmaG, const Vec& m1, const Mat& M) {
    Mat Sr = Z * SigmaG * Z.transpose();
    Sr.diagonal().array() += 1.0;
    const Mat Si = Sr.inverse();
    const Mat K = SigmaG * Z.transpose() * Si;
    return {K * m1, K * M * K.transpose() + SigmaG - K * Z * SigmaG};
}

// AUC as the fraction of (positive, negative) pairs ranked correctly, ties 1/2.
inline double concordance_auc(const std::vector<double>& s, const std::vector<int>& y) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j)
            if (y[i] == 1 && y[j] == 0) {
                den += 1.0;
                num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
            }
    return num / den;
}

// Proximal gradient with backtracking on
//   -log|Phi| + tr(S Phi) + lambda * sum_{g != h} |phi_gh|.
inline Mat prox_grad_glasso(const Mat& S, double lambda, int iters = 200000, double tol = 1e-13) {
    const Index G = S.rows();
    Mat phi = Mat(S.diagonal().asDiagonal().inverse());
    auto smooth = [&](const Mat& P) {
        Eigen::LLT<Mat> llt(P);
        if (llt.info() != Eigen::Success) return std::numeric_limits<double>::infinity();
        const Mat L = llt.matrixL();
        return -2.0 * L.diagonal().array().log().sum() + (S.cwiseProduct(P)).sum();
    };
    auto soft = [&](const Mat& P, double t) {
        Mat out = P;
        for (Index i = 0; i < G; ++i)
            for (Index j = 0; j < G; ++j)
                if (i != j) {
                    const double v = P(i, j), th = t * lambda;
                    out(i, j) = v > th ? v - th : (v < -th ? v + th : 0.0);
                }
        return out;
    };
    double t = 1.0;
    for (int k = 0; k < iters; ++k) {
        const Mat grad = S - phi.inverse();
        const double f0 = smooth(phi);
        Mat next;
        for (;;) {
            next = soft(phi - t * grad, t);
            const Mat d = next - phi;
            const double f1 = smooth(next);
            if (f1 <= f0 + grad.cwiseProduct(d).sum() + d.squaredNorm() / (2.0 * t)) break;
            t *= 0.5;
        }
        const double step = (next - phi).cwiseAbs().maxCoeff();
        phi = next;
        t = std::min(1.0, t * 1.5);
        if (step < tol) break;
    }
    return phi;
}

// Brute-force Monte Carlo of the quadratic-form moments with independent
// coordinates w_i = d_i + (standardized draw from a given sampler) * sd_i.
struct McQuad {
    double mean_qq, se_qq;
    Vec mean_qlin, se_qlin;
};

inline McQuad mc_quadform(const std::vector<std::function<double(std::mt19937_64&)>>& draw, const Mat& A,
                          const Mat& B, long n_draws, std::uint64_t seed) {
    const Index n = A.rows();
    std::mt19937_64 gen(seed);
    double s = 0.0, ss = 0.0;
    Vec sl = Vec::Zero(n), ssl = Vec::Zero(n);
    Vec w(n);
    for (long k = 0; k < n_draws; ++k) {
        for (Index i = 0; i < n; ++i) w(i) = draw[static_cast<std::size_t>(i)](gen);
        const double qa = w.dot(A * w);
        const double qb = w.dot(B * w);
        s += qa * qb;
        ss += qa * qb * qa * qb;
        for (Index i = 0; i < n; ++i) {
            sl(i) += qa * w(i);
            ssl(i) += qa * w(i) * qa * w(i);
        }
    }
    const double N = static_cast<double>(n_draws);
    McQuad r;
    r.mean_qq = s / N;
    r.se_qq = std::sqrt((ss / N - r.mean_qq * r.mean_qq) / N);
    r.mean_qlin = sl / N;
    r.se_qlin = ((ssl / N).array() - r.mean_qlin.array().square()).max(0.0).sqrt() / std::sqrt(N);
    return r;
}

inline Mat random_spd(Index n, std::mt19937_64& gen, double ridge = 0.5) {
    std::normal_distribution<double> nd;
    Mat A(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) A(i, j) = nd(gen);
    Mat S = A * A.transpose() / static_cast<double>(n);
    S.diagonal().array() += ridge;
    return S;
}

inline Mat random_symmetric(Index n, std::mt19937_64& gen) {
    std::normal_distribution<double> nd;
    Mat A(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) A(i, j) = nd(gen);
    return (A + A.transpose()) / 2.0;
}

}  // namespace oracle
