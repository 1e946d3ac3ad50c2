#pragma once

// Mean-field E-step for one region.
//
// All latent moments are kept centred: e_i = y*_i - beta' x_i. The
// leave-one-out conditional of e_i given e_{-i} only needs G x G algebra:
// with C = Phi_G + Z'Z and q_i = z_i' C^{-1} z_i,
//
//   E[e_i | e_{-i}]   = z_i' C^{-1} (Z'e - z_i e_i) / (1 - q_i)
//   Var[e_i | e_{-i}] = 1 / (1 - q_i)
//
// which is the matrix-inversion-lemma form of Sigma_{i,-i} Sigma_{-i,-i}^{-1}
// followed by a Sherman-Morrison downdate of C^{-1}.

#include "model.hpp"
#include "parallel.hpp"
#include "truncnorm.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace gprobit {

enum class MomentMap { exact, group_average };

inline const char* to_string(MomentMap m) { return m == MomentMap::exact ? "exact" : "group-average"; }

struct EStepConfig {
    int inner_sweeps = 1;
    double inner_tol = 1e-6;
    MomentMap moment_map = MomentMap::exact;
};

struct EStepState {
    Vec m1;   // E[e_i | y]
    Vec m2;   // E[e_i^2 | y]
    Vec l2c;  // central moments of the last truncated conditional
    Vec l3c;
    Vec l4c;
    Vec Eu;     // E[u | y]
    Mat Euu;    // E[u u' | y]
    double cross = 0.0;  // E[e' Z u | y], used by the Q-function
    int sweeps = 0;
    bool converged = false;

    bool initialized() const { return m1.size() > 0; }
    Vec variance() const { return (m2.array() - m1.array().square()).matrix(); }
};

/// Per-(region, parameter) quantities shared by every sweep: C^{-1}.
struct RegionSystem {
    Mat Cinv;
};

inline RegionSystem make_region_system(const RegionBlock& block, const ModelParams& params) {
    check_dimensions(block, params);
    Mat c = params.phi();
    if (block.one_hot()) {
        for (int g : *block.group_index) c(g, g) += 1.0;
    } else {
        c.noalias() += block.Z.transpose() * block.Z;
    }
    return {spd_inverse(c, "Phi_G + Z'Z")};
}

/// Independent-probit start: each latent uses its marginal variance 1 + z' Sigma_G z.
inline EStepState init_state(const RegionBlock& block, const ModelParams& params) {
    check_dimensions(block, params);
    const Index n = block.size();
    EStepState st;
    st.m1.resize(n);
    st.m2.resize(n);
    st.l2c.resize(n);
    st.l3c.resize(n);
    st.l4c.resize(n);
    const Vec xb = block.X * params.beta;
    for (Index i = 0; i < n; ++i) {
        const double var = 1.0 + block.Z.row(i).dot(params.sigma() * block.Z.row(i).transpose());
        const auto tm = truncnorm::trunc_moments(xb(i), std::sqrt(var), block.y(i) == 1);
        st.m1(i) = tm.lambda1 - xb(i);
        st.m2(i) = tm.l2c + st.m1(i) * st.m1(i);
        st.l2c(i) = tm.l2c;
        st.l3c(i) = tm.l3c;
        st.l4c(i) = tm.l4c;
    }
    return st;
}

struct LooConditional {
    double mu_tilde;
    double sigma_tilde2;
};

/// Conditional mean and variance of y*_i given the current moments of the
/// other latents in the block (plug-in of m1 for e_{-i}).
inline LooConditional loo_conditional(const RegionBlock& block, const ModelParams& params, Index i,
                                      const EStepState& state, const RegionSystem* sys = nullptr) {
    check_dimensions(block, params);
    if (i < 0 || i >= block.size()) throw DimensionError("loo_conditional: observation index out of range");
    RegionSystem local;
    if (!sys) {
        local = make_region_system(block, params);
        sys = &local;
    }
    const Vec z = block.Z.row(i).transpose();
    const Vec c = sys->Cinv * z;
    const double q = z.dot(c);
    if (!(q < 1.0)) throw NumericalError("loo_conditional: singular leave-one-out system");
    const Vec s = block.Z.transpose() * state.m1 - z * state.m1(i);
    const double r = 1.0 / (1.0 - q);
    return {block.X.row(i).dot(params.beta) + c.dot(s) * r, r};
}

enum class SweepKernel { dense, membership };

namespace detail {

// Sequential (Gauss-Seidel) pass over the block. Second moments follow the
// plug-in recursion with the mean-field second-moment matrix of e_{-i}:
//   m2_i = Var_trunc + m1_i^2 + sum_{j != i} a_j^2 Var(e_j),  a_j = z_i' C_i^{-1} z_j.
// Returns max |delta m1|.
inline double sweep_dense(const RegionBlock& block, const ModelParams& params, const RegionSystem& sys,
                          EStepState& st) {
    const Index n = block.size();
    const Mat& Z = block.Z;
    const Vec xb = block.X * params.beta;
    Vec t = sys.Cinv * (Z.transpose() * st.m1);
    Mat V = Z.transpose() * st.variance().asDiagonal() * Z;
    double max_delta = 0.0;
    Vec c(Z.cols());
    for (Index i = 0; i < n; ++i) {
        const auto z = Z.row(i).transpose();
        c.noalias() = sys.Cinv * z;
        const double q = z.dot(c);
        const double r = 1.0 / (1.0 - q);
        const double v_old = st.m2(i) - st.m1(i) * st.m1(i);
        const double mean = (z.dot(t) - q * st.m1(i)) * r;
        const double spread = (c.dot(V * c) - v_old * q * q) * r * r;
        const auto tm = truncnorm::trunc_moments(xb(i) + mean, std::sqrt(r), block.y(i) == 1);
        const double m1_new = tm.lambda1 - xb(i);
        const double v_new = tm.l2c + std::max(spread, 0.0);
        const double delta = m1_new - st.m1(i);
        t.noalias() += delta * c;
        V.noalias() += (v_new - v_old) * z * z.transpose();
        st.m1(i) = m1_new;
        st.m2(i) = v_new + m1_new * m1_new;
        st.l2c(i) = tm.l2c;
        st.l3c(i) = tm.l3c;
        st.l4c(i) = tm.l4c;
        max_delta = std::max(max_delta, std::abs(delta));
    }
    return max_delta;
}

// Same recursion exploiting one-hot loadings: C^{-1} z_i is a column of C^{-1}
// and Z' diag(v) Z is diagonal, so each observation costs O(G).
inline double sweep_membership(const RegionBlock& block, const ModelParams& params,
                               const RegionSystem& sys, EStepState& st) {
    const Index n = block.size();
    const Index G = block.n_groups();
    const auto& groups = *block.group_index;
    const Vec xb = block.X * params.beta;
    Vec s = Vec::Zero(G);
    Vec v = Vec::Zero(G);
    for (Index i = 0; i < n; ++i) {
        const int g = groups[static_cast<std::size_t>(i)];
        s(g) += st.m1(i);
        v(g) += st.m2(i) - st.m1(i) * st.m1(i);
    }
    Vec t = sys.Cinv * s;
    double max_delta = 0.0;
    for (Index i = 0; i < n; ++i) {
        const int g = groups[static_cast<std::size_t>(i)];
        const auto c = sys.Cinv.col(g);
        const double q = c(g);
        const double r = 1.0 / (1.0 - q);
        const double v_old = st.m2(i) - st.m1(i) * st.m1(i);
        const double mean = (t(g) - q * st.m1(i)) * r;
        const double spread = (c.array().square() * v.array()).sum() - v_old * q * q;
        const auto tm = truncnorm::trunc_moments(xb(i) + mean, std::sqrt(r), block.y(i) == 1);
        const double m1_new = tm.lambda1 - xb(i);
        const double v_new = tm.l2c + std::max(spread * r * r, 0.0);
        const double delta = m1_new - st.m1(i);
        t.noalias() += delta * c;
        v(g) += v_new - v_old;
        st.m1(i) = m1_new;
        st.m2(i) = v_new + m1_new * m1_new;
        st.l2c(i) = tm.l2c;
        st.l3c(i) = tm.l3c;
        st.l4c(i) = tm.l4c;
        max_delta = std::max(max_delta, std::abs(delta));
    }
    return max_delta;
}

inline double run_sweep(const RegionBlock& block, const ModelParams& params, const RegionSystem& sys,
                        EStepState& st, SweepKernel kernel) {
    try {
        if (kernel == SweepKernel::membership) {
            if (!block.one_hot()) throw UnsupportedError("membership sweep needs one-hot loadings");
            return sweep_membership(block, params, sys, st);
        }
        return sweep_dense(block, params, sys, st);
    } catch (const NumericalError& e) {
        throw NumericalError("region " + std::to_string(block.region_id) + ": " + e.what());
    }
}

}  // namespace detail

/// One full in-place pass i = 1..N_r of the conditional-moment recursion.
inline EStepState mean_field_sweep(const RegionBlock& block, const ModelParams& params, EStepState state,
                                   SweepKernel kernel = SweepKernel::dense) {
    const RegionSystem sys = make_region_system(block, params);
    if (!state.initialized()) state = init_state(block, params);
    detail::run_sweep(block, params, sys, state, kernel);
    ++state.sweeps;
    return state;
}

struct UMoments {
    Vec Eu;
    Mat Euu;
    double cross = 0.0;
};

/// E[u | y] = C^{-1} Z' m1 and
/// E[u u' | y] = C^{-1} Z' E[e e'] Z C^{-1} + C^{-1},
/// with E[e e'] = m1 m1' + diag(m2 - m1^2) under the mean-field factorization.
/// These are the conditional-normal maps with Sigma_r^{-1} applied through
/// the Woodbury identity; loadings are treated as general (dense).
inline UMoments u_moments_exact(const RegionBlock& block, const ModelParams& params, const EStepState& state,
                                const RegionSystem* sys = nullptr) {
    RegionSystem local;
    if (!sys) {
        local = make_region_system(block, params);
        sys = &local;
    }
    const Mat& Z = block.Z;
    const Vec zm = Z.transpose() * state.m1;
    const Mat zdz = Z.transpose() * state.variance().asDiagonal() * Z;
    UMoments out;
    out.Eu = sys->Cinv * zm;
    out.Euu = out.Eu * out.Eu.transpose() + sys->Cinv * zdz * sys->Cinv + sys->Cinv;
    symmetrize(out.Euu);
    out.cross = zm.dot(out.Eu) + (sys->Cinv * zdz).trace();
    return out;
}

/// Group averages of the latent residual moments as a proxy for u.
/// Empty groups fall back to the prior: E[u_g] = 0, E[u_g u_.] = Sigma_G row.
inline UMoments u_moments_groupavg(const RegionBlock& block, const ModelParams& params,
                                   const EStepState& state) {
    if (!block.one_hot())
        throw UnsupportedError("group-average moments need one-hot loadings; use the exact moment map");
    const Index G = block.n_groups();
    const auto& groups = *block.group_index;
    Vec sum = Vec::Zero(G);
    Vec var = Vec::Zero(G);
    std::vector<int> count(static_cast<std::size_t>(G), 0);
    for (Index i = 0; i < block.size(); ++i) {
        const int g = groups[static_cast<std::size_t>(i)];
        sum(g) += state.m1(i);
        var(g) += state.m2(i) - state.m1(i) * state.m1(i);
        ++count[static_cast<std::size_t>(g)];
    }
    UMoments out;
    out.Eu = Vec::Zero(G);
    for (Index g = 0; g < G; ++g)
        if (count[static_cast<std::size_t>(g)] > 0) out.Eu(g) = sum(g) / count[static_cast<std::size_t>(g)];
    out.Euu = out.Eu * out.Eu.transpose();
    for (Index g = 0; g < G; ++g) {
        const int m = count[static_cast<std::size_t>(g)];
        if (m > 0) {
            out.Euu(g, g) += var(g) / (static_cast<double>(m) * m);
        } else {
            out.Euu.row(g) = params.sigma().row(g);
            out.Euu.col(g) = params.sigma().col(g);
        }
    }
    for (Index g = 0; g < G; ++g) {
        const int m = count[static_cast<std::size_t>(g)];
        if (m > 0) out.cross += m * out.Euu(g, g);
    }
    return out;
}

/// Runs up to cfg.inner_sweeps sweeps (stopping early once max |delta m1| is
/// below cfg.inner_tol) and fills the random-effect moments. A state from a
/// previous call is used as a warm start.
inline EStepState estep_region(const RegionBlock& block, const ModelParams& params, const EStepConfig& cfg,
                               EStepState state = {}) {
    if (cfg.inner_sweeps < 1) throw Error("inner_sweeps must be at least 1");
    const RegionSystem sys = make_region_system(block, params);
    if (!state.initialized() || state.m1.size() != block.size()) state = init_state(block, params);
    const SweepKernel kernel =
        cfg.moment_map == MomentMap::group_average ? SweepKernel::membership : SweepKernel::dense;
    state.sweeps = 0;
    state.converged = false;
    for (int s = 0; s < cfg.inner_sweeps; ++s) {
        const double delta = detail::run_sweep(block, params, sys, state, kernel);
        ++state.sweeps;
        if (delta < cfg.inner_tol) {
            state.converged = true;
            break;
        }
    }
    UMoments um = cfg.moment_map == MomentMap::group_average ? u_moments_groupavg(block, params, state)
                                                            : u_moments_exact(block, params, state, &sys);
    state.Eu = std::move(um.Eu);
    state.Euu = std::move(um.Euu);
    state.cross = um.cross;
    return state;
}

/// E-step over all regions. `states` is read as a warm start and overwritten.
inline void estep(const Dataset& data, const ModelParams& params, const EStepConfig& cfg,
                  std::vector<EStepState>& states, unsigned threads) {
    states.resize(data.regions.size());
    parallel_for(data.n_regions(), threads, [&](Index r) {
        auto& st = states[static_cast<std::size_t>(r)];
        st = estep_region(data.regions[static_cast<std::size_t>(r)], params, cfg, std::move(st));
    });
}

}  // namespace gprobit
