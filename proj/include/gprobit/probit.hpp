#pragma once

// Plain probit maximum likelihood (random effects ignored). Used as the EM
// starting point and as the "no random effects" comparison estimator.

#include "model.hpp"
#include "truncnorm.hpp"

#include <cmath>
#include <string>

namespace gprobit {

struct ProbitFit {
    Vec beta;
    double loglik = 0.0;
    int iterations = 0;
};

namespace detail {

// log P(y | eta) and its first two derivatives in eta.
struct ProbitTerm {
    double ll, d1, d2;
};

inline ProbitTerm probit_term(double eta, bool positive) {
    // P(y=1) = Phi(eta) = P(Z > -eta); P(y=0) = P(Z > eta).
    const double a = positive ? -eta : eta;
    const double h = truncnorm::hazard(a).h;
    const double ll = truncnorm::log_normal_sf(a);
    // d/d(eta) log P(Z > a(eta)) = h * (+-1); second derivative -h (h - a).
    return {ll, positive ? h : -h, -h * (h - a)};
}

inline double probit_loglik(const Dataset& data, const Vec& beta) {
    double ll = 0.0;
    for (const auto& b : data.regions) {
        const Vec eta = b.X * beta;
        for (Index i = 0; i < b.size(); ++i) ll += probit_term(eta(i), b.y(i) == 1).ll;
    }
    return ll;
}

}  // namespace detail

/// Newton-Raphson with step halving on the probit log-likelihood.
inline ProbitFit fit_probit(const Dataset& data, int max_iter = 100, double tol = 1e-10) {
    const Index K = data.K;
    ProbitFit fit;
    fit.beta = Vec::Zero(K);
    fit.loglik = detail::probit_loglik(data, fit.beta);
    for (int it = 0; it < max_iter; ++it) {
        Vec grad = Vec::Zero(K);
        Mat hess = Mat::Zero(K, K);
        for (const auto& b : data.regions) {
            const Vec eta = b.X * fit.beta;
            for (Index i = 0; i < b.size(); ++i) {
                const auto t = detail::probit_term(eta(i), b.y(i) == 1);
                grad.noalias() += t.d1 * b.X.row(i).transpose();
                hess.noalias() += t.d2 * b.X.row(i).transpose() * b.X.row(i);
            }
        }
        Eigen::LDLT<Mat> ldlt(-hess);
        if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0.0).all())
            throw NumericalError("probit Hessian is singular; check for collinear covariates");
        const Vec step = ldlt.solve(grad);
        double scale = 1.0;
        Vec trial;
        double ll = 0.0;
        for (int h = 0; h < 40; ++h) {
            trial = fit.beta + scale * step;
            ll = detail::probit_loglik(data, trial);
            if (ll >= fit.loglik - 1e-12 * std::abs(fit.loglik)) break;
            scale *= 0.5;
        }
        fit.iterations = it + 1;
        const double change = (trial - fit.beta).cwiseAbs().maxCoeff();
        fit.beta = trial;
        fit.loglik = ll;
        if (!fit.beta.allFinite() || fit.beta.cwiseAbs().maxCoeff() > 1e6)
            throw ConvergenceError("probit estimates diverge (the outcome may be perfectly separated)");
        if (change < tol) break;
    }
    return fit;
}

}  // namespace gprobit
