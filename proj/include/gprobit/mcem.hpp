#pragma once

// Monte Carlo EM: the E-step moments are estimated from a systematic-scan
// Gibbs sampler on the truncated multivariate normal of y*_r | y_r.

#include "em.hpp"
#include "rng.hpp"

#include <cmath>
#include <memory>
#include <string>
#include <vector>

namespace gprobit {

struct GibbsConfig {
    int n_samples = 500;
    int burn_in = 100;
    int thin = 1;
    std::uint64_t seed = 0;
    // MCEM schedule: sample size grows by this factor per outer iteration, up to max_samples.
    double growth = 1.1;
    int max_samples = 20000;

    void validate() const {
        if (n_samples < 1) throw Error("n_samples must be at least 1");
        if (burn_in < 0) throw Error("burn_in must be non-negative");
        if (thin < 1) throw Error("thin must be at least 1");
        if (!(growth >= 1.0)) throw Error("sample growth factor must be at least 1");
    }
};

namespace detail {

// Precomputed leave-one-out coefficients: row i of CZ is (C^{-1} z_i)'.
struct GibbsSystem {
    Mat Cinv;
    Mat CZ;
    Vec q;
};

inline GibbsSystem make_gibbs_system(const RegionBlock& block, const ModelParams& params) {
    GibbsSystem s;
    s.Cinv = make_region_system(block, params).Cinv;
    s.CZ = block.Z * s.Cinv;
    s.q = (s.CZ.cwiseProduct(block.Z)).rowwise().sum();
    return s;
}

// One systematic scan (in place) over the latent vector ys and its centred
// copy e = ys - X beta; t = C^{-1} Z' e is kept consistent with e. The raw
// draws are kept separately so that rounding in the centring step can never
// move a value across zero.
inline void gibbs_scan(const RegionBlock& block, const Vec& xb, const GibbsSystem& sys, Vec& ys, Vec& e, Vec& t,
                       Rng& rng) {
    for (Index i = 0; i < block.size(); ++i) {
        const double q = sys.q(i);
        const double r = 1.0 / (1.0 - q);
        const double mean = (block.Z.row(i).dot(t) - q * e(i)) * r;
        const bool pos = block.y(i) == 1;
        const double ystar = sample_truncated(xb(i) + mean, std::sqrt(r), pos, rng);
        const double e_new = ystar - xb(i);
        t.noalias() += (e_new - e(i)) * sys.CZ.row(i).transpose();
        e(i) = e_new;
        ys(i) = ystar;
    }
}

}  // namespace detail

/// Draws of y*_r | y_r (rows are retained samples). `chain`, when given and
/// sized N_r, is the latent vector y* to start from; on return it holds the
/// final state, so a chain can be continued after a parameter update.
inline Mat gibbs_latent(const RegionBlock& block, const ModelParams& params, const GibbsConfig& cfg,
                        Vec* chain = nullptr) {
    cfg.validate();
    const auto sys = detail::make_gibbs_system(block, params);
    const Vec xb = block.X * params.beta;
    Vec ys;
    if (chain && chain->size() == block.size()) ys = *chain;
    else ys = init_state(block, params).m1 + xb;
    Vec e = ys - xb;
    Vec t = sys.Cinv * (block.Z.transpose() * e);
    Rng rng(cfg.seed);
    for (int s = 0; s < cfg.burn_in; ++s) detail::gibbs_scan(block, xb, sys, ys, e, t, rng);
    Mat out(cfg.n_samples, block.size());
    for (int s = 0; s < cfg.n_samples; ++s) {
        for (int k = 0; k < cfg.thin; ++k) detail::gibbs_scan(block, xb, sys, ys, e, t, rng);
        // Refresh t to keep rounding drift bounded on long chains.
        if ((s & 255) == 255) t = sys.Cinv * (block.Z.transpose() * e);
        for (Index i = 0; i < block.size(); ++i) {
            if ((block.y(i) == 1) != (ys(i) >= 0.0))
                throw NumericalError("Gibbs draw violates the outcome sign in region " +
                                     std::to_string(block.region_id) + ", observation " + std::to_string(i + 1));
        }
        out.row(s) = ys.transpose();
    }
    if (chain) *chain = ys;
    return out;
}

/// Empirical E-step moments from latent draws: m1, m2 and the central moments
/// per coordinate, and the random-effect moments from the exact conditional
/// maps applied to the empirical (non-factorized) second moments:
///   E[u|y] = mean_s C^{-1} Z' e_s,  E[uu'|y] = mean_s b_s b_s' + C^{-1}.
inline EStepState mc_moments(const Mat& samples, const RegionBlock& block, const ModelParams& params) {
    check_dimensions(block, params);
    if (samples.cols() != block.size() || samples.rows() < 1) throw DimensionError("mc_moments: sample matrix shape");
    const Index S = samples.rows();
    const Index n = block.size();
    const Vec xb = block.X * params.beta;
    const Mat E = samples.rowwise() - xb.transpose();  // centred draws
    const Mat Cinv = make_region_system(block, params).Cinv;

    EStepState st;
    st.m1 = E.colwise().mean().transpose();
    st.m2 = E.array().square().colwise().mean().transpose();
    st.l2c.resize(n);
    st.l3c.resize(n);
    st.l4c.resize(n);
    for (Index i = 0; i < n; ++i) {
        const auto d = (E.col(i).array() - st.m1(i));
        st.l2c(i) = d.square().mean();
        st.l3c(i) = d.cube().mean();
        st.l4c(i) = d.square().square().mean();
    }
    const Mat ZE = E * block.Z;          // S x G, rows (Z' e_s)'
    const Mat Bm = ZE * Cinv;            // rows b_s'
    st.Eu = Bm.colwise().mean().transpose();
    st.Euu = Bm.transpose() * Bm / static_cast<double>(S) + Cinv;
    symmetrize(st.Euu);
    st.cross = ZE.cwiseProduct(Bm).sum() / static_cast<double>(S);
    st.sweeps = static_cast<int>(S);
    st.converged = true;
    return st;
}

/// Empirical E[(y* - X beta)(y* - X beta)' | y] (N x N).
inline Mat mc_cross_moments(const Mat& samples, const RegionBlock& block, const ModelParams& params) {
    const Vec xb = block.X * params.beta;
    const Mat E = samples.rowwise() - xb.transpose();
    return E.transpose() * E / static_cast<double>(samples.rows());
}

inline int mcem_sample_size(const GibbsConfig& g, int iteration) {
    const double n = g.n_samples * std::pow(g.growth, iteration - 1);
    return static_cast<int>(std::min<double>(std::max<double>(g.n_samples, std::round(n)), std::max(g.max_samples, g.n_samples)));
}

/// MCEM fit. Each region's chain is seeded from (seed, region id, iteration)
/// and continues from where the previous iteration left it.
inline FitResult mcem_fit(const Dataset& data, const EMConfig& cfg, const GibbsConfig& gcfg,
                          PhiRule rule = {PhiRule::ml, 0.0}) {
    gcfg.validate();
    if (rule.kind == PhiRule::ml && data.n_regions() <= data.G)
        throw InfeasibleError("unpenalized estimation needs more regions than groups (R > G)");
    const auto t0 = std::chrono::steady_clock::now();
    auto chains = std::make_shared<std::vector<Vec>>(data.regions.size());
    const unsigned threads = resolve_threads(cfg.threads);
    EStepFn fn = [&data, gcfg, chains, threads](const ModelParams& p, std::vector<EStepState>& states, int it) {
        states.resize(data.regions.size());
        GibbsConfig g = gcfg;
        g.n_samples = mcem_sample_size(gcfg, it);
        parallel_for(data.n_regions(), threads, [&](Index r) {
            const auto& b = data.regions[static_cast<std::size_t>(r)];
            GibbsConfig gr = g;
            gr.seed = derive_seed(gcfg.seed, static_cast<std::uint64_t>(b.region_id), static_cast<std::uint64_t>(it));
            Vec& chain = (*chains)[static_cast<std::size_t>(r)];
            const Mat draws = gibbs_latent(b, p, gr, &chain);
            states[static_cast<std::size_t>(r)] = mc_moments(draws, b, p);
        });
    };
    FitResult fit = run_em(data, cfg, rule, fn, default_start(data));
    fit.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    fit.estimator = Estimator::mcem;
    fit.moment_map_used = MomentMap::exact;
    return fit;
}

}  // namespace gprobit
