#pragma once

#include "estep.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace gprobit {

/// Sufficient statistics gathered from one E-step.
struct MStepInputs {
    Mat S_bar;   // (1/R) sum_r E[u_r u_r' | y_r]
    Vec Xt_target;  // sum_r X_r' (E[y*_r | y_r] - Z_r E[u_r | y_r])
    Mat XtX;     // sum_r X_r' X_r
    Index R = 0;
};

inline MStepInputs gather_mstep_inputs(const Dataset& data, const ModelParams& params,
                                       const std::vector<EStepState>& states) {
    if (states.size() != data.regions.size()) throw DimensionError("one E-step state per region is required");
    MStepInputs in;
    in.R = data.n_regions();
    in.S_bar = Mat::Zero(data.G, data.G);
    in.Xt_target = Vec::Zero(data.K);
    in.XtX = Mat::Zero(data.K, data.K);
    for (std::size_t r = 0; r < states.size(); ++r) {
        const auto& b = data.regions[r];
        const auto& st = states[r];
        if (st.Eu.size() != data.G) throw Error("E-step state for region " + std::to_string(b.region_id) + " lacks u moments");
        in.S_bar += st.Euu;
        Vec target = st.m1 + b.X * params.beta;
        if (b.one_hot()) {
            for (Index i = 0; i < b.size(); ++i) target(i) -= st.Eu((*b.group_index)[static_cast<std::size_t>(i)]);
        } else {
            target.noalias() -= b.Z * st.Eu;
        }
        in.Xt_target.noalias() += b.X.transpose() * target;
        in.XtX.noalias() += b.X.transpose() * b.X;
    }
    in.S_bar /= static_cast<double>(in.R);
    symmetrize(in.S_bar);
    return in;
}

/// beta = (sum X'X)^{-1} sum X'(E[y*|y] - Z E[u|y]).
inline Vec update_beta(const MStepInputs& in) {
    Eigen::ColPivHouseholderQR<Mat> qr(in.XtX);
    qr.setThreshold(1e-10);
    if (qr.rank() < in.XtX.cols()) {
        std::string cols;
        const auto& perm = qr.colsPermutation().indices();
        for (Index j = qr.rank(); j < in.XtX.cols(); ++j) {
            if (!cols.empty()) cols += ", ";
            cols += "x" + std::to_string(perm(j) + 1);
        }
        throw NumericalError("covariate Gram matrix is singular; collinear column(s): " + cols);
    }
    return qr.solve(in.Xt_target);
}

inline Vec update_beta(const Dataset& data, const ModelParams& params, const std::vector<EStepState>& states) {
    return update_beta(gather_mstep_inputs(data, params, states));
}

/// Unpenalized precision update Phi = S_bar^{-1}.
inline Mat update_phi_ml(const Mat& S_bar) {
    Mat s = S_bar;
    symmetrize(s);
    Eigen::LLT<Mat> llt(s);
    if (llt.info() != Eigen::Success)
        throw InfeasibleError(
            "averaged E[uu'|y] is not positive definite; the unpenalized precision estimate does not exist "
            "(needs R well above G); use the penalized path");
    Mat phi = llt.solve(Mat::Identity(s.rows(), s.cols()));
    symmetrize(phi);
    return phi;
}

struct GlassoConfig {
    int max_iter = 1000;
    double tol = 1e-9;       // target KKT residual
    double kkt_tol = 1e-6;   // failure threshold after max_iter
    int qp_max_iter = 10000;
    double qp_tol = 1e-13;
    bool track_objective = false;
};

struct GlassoResult {
    Mat phi;
    double kkt_residual = 0.0;
    int iterations = 0;
    std::vector<double> objective;  // per cycle, if tracked (starts with the initial value)
};

/// -log|Phi| + tr(S Phi) + lambda * sum_{g != h} |phi_gh|.
inline double glasso_objective(const Mat& S, const Mat& phi, double lambda) {
    double pen = 0.0;
    for (Index j = 0; j < phi.cols(); ++j)
        for (Index i = 0; i < phi.rows(); ++i)
            if (i != j) pen += std::abs(phi(i, j));
    return -spd_logdet(phi) + (S.cwiseProduct(phi)).sum() + lambda * pen;
}

/// Largest violation of the optimality conditions of the unit-scale problem:
/// W_gg = S_gg; W_gh - S_gh = lambda sign(phi_gh) when phi_gh != 0, and
/// |W_gh - S_gh| <= lambda otherwise, with W = Phi^{-1}.
inline double glasso_kkt_residual(const Mat& S, const Mat& phi, double lambda) {
    const Mat W = spd_inverse(phi, "glasso precision");
    double res = 0.0;
    for (Index j = 0; j < S.cols(); ++j) {
        for (Index i = 0; i < S.rows(); ++i) {
            const double d = W(i, j) - S(i, j);
            double v;
            if (i == j) v = std::abs(d);
            else if (phi(i, j) != 0.0) v = std::abs(d - (phi(i, j) > 0 ? lambda : -lambda));
            else v = std::max(0.0, std::abs(d) - lambda);
            res = std::max(res, v);
        }
    }
    return res;
}

namespace detail {

// min_g 0.5 (s + g)' A (s + g) subject to |g_j| <= lambda, by cyclic
// coordinate descent. `g` is a warm start; returns r = A (s + g).
inline Vec box_qp(const Mat& A, const Vec& s, Vec& g, double lambda, int max_iter, double tol) {
    Vec r = A * (s + g);
    const Index n = s.size();
    for (int it = 0; it < max_iter; ++it) {
        double max_step = 0.0;
        for (Index j = 0; j < n; ++j) {
            const double gj = std::clamp(g(j) - r(j) / A(j, j), -lambda, lambda);
            const double step = gj - g(j);
            if (step != 0.0) {
                r.noalias() += step * A.col(j);
                g(j) = gj;
                max_step = std::max(max_step, std::abs(step));
            }
        }
        if (max_step <= tol * std::max(1.0, lambda)) break;
    }
    // Recompute to avoid drift from the incremental updates.
    r.noalias() = A * (s + g);
    return r;
}

inline Mat without(const Mat& m, Index k) {
    const Index n = m.rows();
    Mat out(n - 1, n - 1);
    for (Index j = 0, jj = 0; j < n; ++j) {
        if (j == k) continue;
        for (Index i = 0, ii = 0; i < n; ++i) {
            if (i == k) continue;
            out(ii++, jj) = m(i, j);
        }
        ++jj;
    }
    return out;
}

inline Vec column_without(const Mat& m, Index k) {
    Vec out(m.rows() - 1);
    for (Index i = 0, ii = 0; i < m.rows(); ++i)
        if (i != k) out(ii++) = m(i, k);
    return out;
}

}  // namespace detail

/// Graphical lasso on the unit-scale problem
///   max log|Phi| - tr(S Phi) - lambda * sum_{g != h} |phi_gh|,
/// solved by block coordinate descent over columns of the precision matrix
/// itself (each column is a box-constrained QP, so every iterate stays
/// positive definite). Diagonal entries are not penalized.
inline GlassoResult glasso_unit(const Mat& S_in, double lambda, const GlassoConfig& cfg = {},
                                const std::optional<Mat>& warm = std::nullopt) {
    if (S_in.rows() != S_in.cols()) throw DimensionError("glasso: S must be square");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error("glasso: penalty must be finite and non-negative");
    Mat S = S_in;
    symmetrize(S);
    const Index G = S.rows();
    for (Index g = 0; g < G; ++g)
        if (!(S(g, g) > 0.0)) throw NumericalError("glasso: S must have a positive diagonal");

    GlassoResult res;
    if (warm && warm->rows() == G && Eigen::LLT<Mat>(*warm).info() == Eigen::Success) {
        res.phi = *warm;
        symmetrize(res.phi);
    } else {
        res.phi = Mat::Zero(G, G);
        for (Index g = 0; g < G; ++g) res.phi(g, g) = 1.0 / S(g, g);
    }
    if (G == 1) {
        res.phi(0, 0) = 1.0 / S(0, 0);
        res.kkt_residual = glasso_kkt_residual(S, res.phi, lambda);
        return res;
    }
    if (cfg.track_objective) res.objective.push_back(glasso_objective(S, res.phi, lambda));

    // Dual variables of each column's box QP, kept for warm starts.
    Mat gamma = Mat::Zero(G - 1, G);
    for (int it = 0; it < cfg.max_iter; ++it) {
        for (Index k = 0; k < G; ++k) {
            const Mat A = detail::without(res.phi, k);
            const Vec s12 = detail::column_without(S, k);
            Vec g = gamma.col(k);
            const Vec r = detail::box_qp(A, s12, g, lambda, cfg.qp_max_iter, cfg.qp_tol);
            gamma.col(k) = g;
            const Vec w12 = s12 + g;
            const double w22 = S(k, k);
            // phi12 = -A w12 / w22; coordinates strictly inside the box have
            // zero gradient at the optimum and therefore a zero precision entry.
            Vec phi12 = -r / w22;
            if (lambda > 0.0)
                for (Index j = 0; j < phi12.size(); ++j)
                    if (std::abs(g(j)) < lambda) phi12(j) = 0.0;
            const double phi22 = (1.0 - w12.dot(phi12)) / w22;
            for (Index i = 0, ii = 0; i < G; ++i) {
                if (i == k) continue;
                res.phi(i, k) = phi12(ii);
                res.phi(k, i) = phi12(ii);
                ++ii;
            }
            res.phi(k, k) = phi22;
        }
        res.iterations = it + 1;
        if (cfg.track_objective) res.objective.push_back(glasso_objective(S, res.phi, lambda));
        res.kkt_residual = glasso_kkt_residual(S, res.phi, lambda);
        if (res.kkt_residual <= cfg.tol) break;
    }
    if (res.kkt_residual > cfg.kkt_tol)
        throw ConvergenceError("glasso did not converge in " + std::to_string(cfg.max_iter) +
                               " cycles (KKT residual " + std::to_string(res.kkt_residual) + ")");
    return res;
}

/// Unit-scale penalty corresponding to rho in the penalized expected
/// log-likelihood (R/2) log|Phi| - (R/2) tr(Phi S_bar) - rho * ||Phi||_1,off.
inline double unit_penalty(double rho, Index R) { return 2.0 * rho / static_cast<double>(R); }

/// Smallest rho for which the penalized update is diagonal.
inline double rho_max(const Mat& S_bar, Index R) {
    double m = 0.0;
    for (Index j = 0; j < S_bar.cols(); ++j)
        for (Index i = 0; i < S_bar.rows(); ++i)
            if (i != j) m = std::max(m, std::abs(S_bar(i, j)));
    return m * static_cast<double>(R) / 2.0;
}

inline GlassoResult glasso(const Mat& S_bar, double rho, Index R, const GlassoConfig& cfg = {},
                           const std::optional<Mat>& warm = std::nullopt) {
    if (!(rho >= 0.0)) throw Error("rho must be non-negative");
    return glasso_unit(S_bar, unit_penalty(rho, R), cfg, warm);
}

inline Index count_edges(const Mat& phi, double eps = 0.0) {
    Index n = 0;
    for (Index j = 0; j < phi.cols(); ++j)
        for (Index i = 0; i < j; ++i)
            if (std::abs(phi(i, j)) > eps) ++n;
    return n;
}

}  // namespace gprobit
