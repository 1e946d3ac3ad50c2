#pragma once

// Observed information by Louis's identity,
//   I(theta) = -E[d2 log f_c | y] - Var[d log f_c | y],
// stored as B = E[H | y] + Var[score | y] so that I = -B. The random effects
// are replaced by the group-average proxy u_r ~ M_r^{-1} Z_r' e_r, under
// which every score is a linear or quadratic form in the latent residuals e.
// Residuals are independent given y (mean-field), with per-observation
// skewness and excess kurtosis taken from the last truncated conditional.
//
// Precision parameters are the upper triangle phi_gh, g <= h, in row-major
// order, each perturbing Phi along J^gh (ones at (g,h) and (h,g)).

#include "em.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace gprobit {

struct LambdaDiag {
    Vec lambda3;  // skewness
    Vec lambda4;  // excess kurtosis
};

inline LambdaDiag lambda_matrices(const EStepState& st) {
    const Index n = st.l2c.size();
    LambdaDiag out{Vec(n), Vec(n)};
    for (Index i = 0; i < n; ++i) {
        const double v = st.l2c(i);
        if (!(v > 0.0))
            throw NumericalError("observation " + std::to_string(i + 1) +
                                 " has a degenerate conditional variance (" + std::to_string(v) + ")");
        out.lambda3(i) = st.l3c(i) / (v * std::sqrt(v));
        out.lambda4(i) = st.l4c(i) / (v * v) - 3.0;
    }
    return out;
}

struct QuadformMoments {
    double e_qq;  // E[w'Aw * w'Bw]
    Vec e_qlin;   // E[w'Aw * w]
};

/// Moments of quadratic forms in w = z - x, where z has independent
/// coordinates with mean mu (so that mu - x = `d`), variances `var`,
/// skewness `l3` and excess kurtosis `l4`. A and B are symmetrized.
inline QuadformMoments quadform_expectations(const Vec& d, const Vec& var, const Vec& l3, const Vec& l4,
                                             const Mat& A_in, const Mat& B_in) {
    const Index n = d.size();
    if (var.size() != n || l3.size() != n || l4.size() != n || A_in.rows() != n || A_in.cols() != n ||
        B_in.rows() != n || B_in.cols() != n)
        throw DimensionError("quadform_expectations: inconsistent dimensions");
    const Mat A = 0.5 * (A_in + A_in.transpose());
    const Mat B = 0.5 * (B_in + B_in.transpose());
    const Vec sd = var.array().sqrt();
    // diag(L3 S^1/2 A S^1/2) S^1/2 1 = kappa3 o diag(A) with kappa3 = l3 sd^3.
    const Vec k3 = (l3.array() * var.array() * sd.array()).matrix();
    const Vec k3A = k3.cwiseProduct(A.diagonal());
    const Vec k3B = k3.cwiseProduct(B.diagonal());
    const Vec k4 = (l4.array() * var.array().square()).matrix();
    const Mat SA = var.asDiagonal() * A;
    const Mat SB = var.asDiagonal() * B;
    const double trSA = SA.trace();
    const double trSB = SB.trace();
    const Vec Ad = A * d;
    const Vec Bd = B * d;
    const double dAd = d.dot(Ad);
    const double dBd = d.dot(Bd);

    QuadformMoments out;
    out.e_qq = (k4.array() * A.diagonal().array() * B.diagonal().array()).sum() + trSA * trSB +
               2.0 * (SB * SA).trace() + 2.0 * k3A.dot(Bd) + 2.0 * k3B.dot(Ad) + trSA * dBd + trSB * dAd +
               4.0 * Ad.dot(var.asDiagonal() * Bd) + dAd * dBd;
    out.e_qlin = k3A + trSA * d + 2.0 * (var.asDiagonal() * Ad) + dAd * d;
    return out;
}

/// E[w'Aw] = tr(Sigma A) + d'Ad.
inline double quadform_mean(const Vec& d, const Vec& var, const Mat& A) {
    return (var.asDiagonal() * A).trace() + d.dot(A * d);
}

struct InfoBlocks {
    Mat B_bb;
    Mat B_bphi;    // K x P
    Mat B_phiphi;  // P x P
    Mat assembled; // (K + P) x (K + P), symmetric
    std::vector<std::string> labels;
    std::vector<std::string> warnings;
};

inline std::vector<std::pair<Index, Index>> precision_pairs(Index G) {
    std::vector<std::pair<Index, Index>> out;
    for (Index g = 0; g < G; ++g)
        for (Index h = g; h < G; ++h) out.emplace_back(g, h);
    return out;
}

inline std::vector<std::string> parameter_labels(Index K, Index G) {
    std::vector<std::string> out;
    for (Index k = 0; k < K; ++k) out.push_back("beta" + std::to_string(k + 1));
    for (auto [g, h] : precision_pairs(G)) out.push_back("phi_" + std::to_string(g + 1) + "_" + std::to_string(h + 1));
    return out;
}

enum class InfoMethod { aggregated, dense };

namespace detail {

inline Mat J_matrix(Index G, Index g, Index h) {
    Mat j = Mat::Zero(G, G);
    j(g, h) = 1.0;
    j(h, g) = 1.0;
    return j;
}

struct RegionContribution {
    Mat bb, bphi, phiphi;
    bool had_empty = false;
};

// Raw moments E[X^k], k = 0..4, of a variable with mean mu, variance v,
// third central moment c3 and fourth cumulant c4.
inline std::array<double, 5> raw_moments(double mu, double v, double c3, double c4) {
    const double m4c = c4 + 3.0 * v * v;
    return {1.0, mu, v + mu * mu, c3 + 3.0 * mu * v + mu * mu * mu,
            m4c + 4.0 * mu * c3 + 6.0 * mu * mu * v + mu * mu * mu * mu};
}

// Group sums make the proxy a vector of independent group means, so all
// required moments factor over groups.
inline RegionContribution region_info_aggregated(const RegionBlock& b, const EStepState& st, Index K, Index G) {
    const auto pairs = precision_pairs(G);
    const Index P = static_cast<Index>(pairs.size());
    const LambdaDiag lam = lambda_matrices(st);
    const Vec v = st.variance();
    const auto& grp = *b.group_index;
    const Index n = b.size();

    std::vector<int> m(static_cast<std::size_t>(G), 0);
    for (int g : grp) ++m[static_cast<std::size_t>(g)];
    Vec mean = Vec::Zero(G), V = Vec::Zero(G), C3 = Vec::Zero(G), C4 = Vec::Zero(G);
    Vec k3(n);
    for (Index i = 0; i < n; ++i) {
        const int g = grp[static_cast<std::size_t>(i)];
        k3(i) = lam.lambda3(i) * v(i) * std::sqrt(v(i));
        mean(g) += st.m1(i);
        V(g) += v(i);
        C3(g) += k3(i);
        C4(g) += lam.lambda4(i) * v(i) * v(i);
    }
    std::vector<std::array<double, 5>> mom(static_cast<std::size_t>(G));
    for (Index g = 0; g < G; ++g) {
        const double c = m[static_cast<std::size_t>(g)];
        if (c > 0) {
            mean(g) /= c;
            V(g) /= c * c;
            C3(g) /= c * c * c;
            C4(g) /= c * c * c * c;
        }
        mom[static_cast<std::size_t>(g)] = raw_moments(mean(g), V(g), C3(g), C4(g));
    }

    RegionContribution out;
    out.bphi = Mat::Zero(K, P);
    out.phiphi = Mat::Zero(P, P);

    // Within-group demeaned covariates P X.
    Mat xbar = Mat::Zero(G, K);
    for (Index i = 0; i < n; ++i) xbar.row(grp[static_cast<std::size_t>(i)]) += b.X.row(i);
    for (Index g = 0; g < G; ++g)
        if (m[static_cast<std::size_t>(g)] > 0) xbar.row(g) /= m[static_cast<std::size_t>(g)];
    Mat xt(n, K);
    for (Index i = 0; i < n; ++i) xt.row(i) = b.X.row(i) - xbar.row(grp[static_cast<std::size_t>(i)]);
    out.bb = -b.X.transpose() * b.X + xt.transpose() * v.asDiagonal() * xt;

    auto present = [&](Index g) { return m[static_cast<std::size_t>(g)] > 0; };

    // Cov(e, q_gh) with q_gh = e'A^gh e = c_gh * ebar_g * ebar_h.
    Vec cvec(n);
    for (Index p = 0; p < P; ++p) {
        const auto [g, h] = pairs[static_cast<std::size_t>(p)];
        if (!present(g) || !present(h)) {
            out.had_empty = true;
            continue;
        }
        for (Index i = 0; i < n; ++i) {
            const int a = grp[static_cast<std::size_t>(i)];
            const double ma = m[static_cast<std::size_t>(a)];
            // (A m1)_i = (J ebar)_a / m_a
            double jm = 0.0;
            if (a == g) jm += mean(h);
            if (a == h && g != h) jm += mean(g);
            double c = 2.0 * v(i) * jm / ma;
            if (g == h && a == g) c += k3(i) / (ma * ma);
            cvec(i) = c;
        }
        out.bphi.col(p) = -0.5 * xt.transpose() * cvec;
    }

    // Cov(q_gh, q_kl) from the factorized fourth moments.
    auto prod_moment = [&](std::array<Index, 4> idx, int count) {
        // E[prod of `count` group means], grouping repeated indices.
        double r = 1.0;
        std::array<int, 4> mult{0, 0, 0, 0};
        std::array<Index, 4> uniq{};
        int nu = 0;
        for (int t = 0; t < count; ++t) {
            int pos = -1;
            for (int u = 0; u < nu; ++u)
                if (uniq[static_cast<std::size_t>(u)] == idx[static_cast<std::size_t>(t)]) pos = u;
            if (pos < 0) {
                uniq[static_cast<std::size_t>(nu)] = idx[static_cast<std::size_t>(t)];
                mult[static_cast<std::size_t>(nu)] = 1;
                ++nu;
            } else {
                ++mult[static_cast<std::size_t>(pos)];
            }
        }
        for (int u = 0; u < nu; ++u)
            r *= mom[static_cast<std::size_t>(uniq[static_cast<std::size_t>(u)])][static_cast<std::size_t>(
                mult[static_cast<std::size_t>(u)])];
        return r;
    };
    for (Index p = 0; p < P; ++p) {
        const auto [g, h] = pairs[static_cast<std::size_t>(p)];
        if (!present(g) || !present(h)) continue;
        const double cp = g == h ? 1.0 : 2.0;
        const double mp = prod_moment({g, h, 0, 0}, 2);
        for (Index q = p; q < P; ++q) {
            const auto [k, l] = pairs[static_cast<std::size_t>(q)];
            if (!present(k) || !present(l)) continue;
            const double cq = k == l ? 1.0 : 2.0;
            const double mq = prod_moment({k, l, 0, 0}, 2);
            const double cov = cp * cq * (prod_moment({g, h, k, l}, 4) - mp * mq);
            out.phiphi(p, q) = 0.25 * cov;
            out.phiphi(q, p) = 0.25 * cov;
        }
    }
    return out;
}

// The same contribution assembled from explicit N x N matrices and the
// quadratic-form moment formulas. Cubic in N; used for cross-checks.
inline RegionContribution region_info_dense(const RegionBlock& b, const EStepState& st, Index K, Index G) {
    const auto pairs = precision_pairs(G);
    const Index P = static_cast<Index>(pairs.size());
    const LambdaDiag lam = lambda_matrices(st);
    const Vec v = st.variance();
    const Index n = b.size();
    const std::vector<int> m = b.group_counts();

    RegionContribution out;
    out.bphi = Mat::Zero(K, P);
    out.phiphi = Mat::Zero(P, P);
    Vec minv = Vec::Zero(G);
    for (Index g = 0; g < G; ++g)
        if (m[static_cast<std::size_t>(g)] > 0) minv(g) = 1.0 / m[static_cast<std::size_t>(g)];
    const Mat ZM = b.Z * minv.asDiagonal();
    const Mat Pm = Mat::Identity(n, n) - ZM * b.Z.transpose();
    out.bb = -b.X.transpose() * b.X + b.X.transpose() * Pm * v.asDiagonal() * Pm.transpose() * b.X;

    std::vector<Mat> A(static_cast<std::size_t>(P));
    std::vector<double> qmean(static_cast<std::size_t>(P), 0.0);
    std::vector<bool> ok(static_cast<std::size_t>(P), true);
    for (Index p = 0; p < P; ++p) {
        const auto [g, h] = pairs[static_cast<std::size_t>(p)];
        ok[static_cast<std::size_t>(p)] = m[static_cast<std::size_t>(g)] > 0 && m[static_cast<std::size_t>(h)] > 0;
        if (!ok[static_cast<std::size_t>(p)]) {
            out.had_empty = true;
            continue;
        }
        A[static_cast<std::size_t>(p)] = ZM * J_matrix(G, g, h) * ZM.transpose();
        qmean[static_cast<std::size_t>(p)] = quadform_mean(st.m1, v, A[static_cast<std::size_t>(p)]);
    }
    for (Index p = 0; p < P; ++p) {
        if (!ok[static_cast<std::size_t>(p)]) continue;
        const auto& Ap = A[static_cast<std::size_t>(p)];
        const auto qm = quadform_expectations(st.m1, v, lam.lambda3, lam.lambda4, Ap, Ap);
        const Vec cov_e = qm.e_qlin - qmean[static_cast<std::size_t>(p)] * st.m1;
        out.bphi.col(p) = -0.5 * b.X.transpose() * Pm * cov_e;
        for (Index q = p; q < P; ++q) {
            if (!ok[static_cast<std::size_t>(q)]) continue;
            const auto e = quadform_expectations(st.m1, v, lam.lambda3, lam.lambda4, Ap, A[static_cast<std::size_t>(q)]);
            const double cov = e.e_qq - qmean[static_cast<std::size_t>(p)] * qmean[static_cast<std::size_t>(q)];
            out.phiphi(p, q) = 0.25 * cov;
            out.phiphi(q, p) = 0.25 * cov;
        }
    }
    return out;
}

}  // namespace detail

/// Observed information blocks at fitted parameters. `states` must come from
/// an E-step at `params` (they carry the truncated central moments).
inline InfoBlocks observed_information(const Dataset& data, const ModelParams& params,
                                       const std::vector<EStepState>& states, InfoMethod method = InfoMethod::aggregated,
                                       unsigned threads = 1) {
    if (!data.one_hot())
        throw UnsupportedError("standard errors need one-hot group loadings (group counts are undefined for dense Z)");
    if (states.size() != data.regions.size()) throw DimensionError("one E-step state per region is required");
    const Index K = data.K, G = data.G;
    const auto pairs = precision_pairs(G);
    const Index P = static_cast<Index>(pairs.size());
    const Index R = data.n_regions();

    std::vector<detail::RegionContribution> parts(states.size());
    parallel_for(R, threads, [&](Index r) {
        const auto& b = data.regions[static_cast<std::size_t>(r)];
        const auto& st = states[static_cast<std::size_t>(r)];
        try {
            parts[static_cast<std::size_t>(r)] = method == InfoMethod::dense ? detail::region_info_dense(b, st, K, G)
                                                                             : detail::region_info_aggregated(b, st, K, G);
        } catch (const NumericalError& e) {
            throw NumericalError("region " + std::to_string(b.region_id) + ": " + e.what());
        }
    });

    InfoBlocks info;
    info.B_bb = Mat::Zero(K, K);
    info.B_bphi = Mat::Zero(K, P);
    info.B_phiphi = Mat::Zero(P, P);
    Index empty_regions = 0;
    for (const auto& c : parts) {
        info.B_bb += c.bb;
        info.B_bphi += c.bphi;
        info.B_phiphi += c.phiphi;
        if (c.had_empty) ++empty_regions;
    }
    if (empty_regions > 0)
        info.warnings.push_back(std::to_string(empty_regions) +
                                " region(s) have empty groups; their terms for those groups are omitted");
    const Mat& S = params.sigma();
    for (Index p = 0; p < P; ++p) {
        const Mat SJp = S * detail::J_matrix(G, pairs[static_cast<std::size_t>(p)].first, pairs[static_cast<std::size_t>(p)].second);
        for (Index q = p; q < P; ++q) {
            const Mat SJq = S * detail::J_matrix(G, pairs[static_cast<std::size_t>(q)].first, pairs[static_cast<std::size_t>(q)].second);
            const double h = -0.5 * static_cast<double>(R) * (SJp * SJq).trace();
            info.B_phiphi(p, q) += h;
            if (q != p) info.B_phiphi(q, p) += h;
        }
    }
    symmetrize(info.B_bb);
    symmetrize(info.B_phiphi);
    info.assembled = Mat::Zero(K + P, K + P);
    info.assembled.topLeftCorner(K, K) = info.B_bb;
    info.assembled.topRightCorner(K, P) = info.B_bphi;
    info.assembled.bottomLeftCorner(P, K) = info.B_bphi.transpose();
    info.assembled.bottomRightCorner(P, P) = info.B_phiphi;
    info.labels = parameter_labels(K, G);
    return info;
}

/// sqrt(diag((-B)^{-1})).
inline Vec standard_errors(const Mat& B) {
    const Mat negB = -B;
    Eigen::LLT<Mat> llt(negB);
    if (llt.info() != Eigen::Success) {
        throw NumericalError("negative observed-information matrix is not positive definite (smallest eigenvalue " +
                             std::to_string(min_eigenvalue(negB)) + ")");
    }
    const Mat inv = llt.solve(Mat::Identity(B.rows(), B.cols()));
    return inv.diagonal().cwiseMax(0.0).cwiseSqrt();
}

inline Vec standard_errors(const InfoBlocks& info) {
    const Mat negB = -info.assembled;
    if (Eigen::LLT<Mat>(negB).info() != Eigen::Success) {
        std::string block = "joint";
        if (Eigen::LLT<Mat>(Mat(-info.B_bb)).info() != Eigen::Success) block = "beta-beta";
        else if (Eigen::LLT<Mat>(Mat(-info.B_phiphi)).info() != Eigen::Success) block = "phi-phi";
        throw NumericalError("negative observed-information matrix is not positive definite (smallest eigenvalue " +
                             std::to_string(min_eigenvalue(negB)) + ", offending block: " + block + "); the fit may not have converged or sits on a boundary");
    }
    return standard_errors(info.assembled);
}

struct SeReport {
    Vec se;
    std::vector<std::string> labels;
    std::vector<std::string> warnings;
};

/// Standard errors for a mean-field or MCEM fit. The information matrix is
/// built on the group-average proxy, so the latent moments are recomputed
/// with that map at the fitted parameters (sweeps run to convergence).
inline SeReport fit_standard_errors(const Dataset& data, const FitResult& fit, const EMConfig& cfg) {
    if (!fit.random_effects) throw UnsupportedError("standard errors are implemented for the mixed model only");
    // The closed forms substitute the group-average proxy for u; evaluating them at an
    // exact-map fixed point mixes two different approximations and -B is often indefinite.
    if (fit.estimator != Estimator::mcem && fit.moment_map_used != MomentMap::group_average)
        throw UnsupportedError("standard errors need a fit with the group-average moment map");
    std::vector<EStepState> states;
    if (fit.estimator != Estimator::mcem && fit.states.size() == data.regions.size()) states = fit.states;
    const EStepConfig ec{std::max(cfg.inner_sweeps, 200), std::min(cfg.inner_tol, 1e-10), MomentMap::group_average};
    estep(data, fit.params, ec, states, resolve_threads(cfg.threads));
    const InfoBlocks info = observed_information(data, fit.params, states, InfoMethod::aggregated, resolve_threads(cfg.threads));
    return {standard_errors(info), info.labels, info.warnings};
}

}  // namespace gprobit
