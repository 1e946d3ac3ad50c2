#pragma once

#include "estep.hpp"
#include "mstep.hpp"
#include "probit.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace gprobit {

struct EMConfig {
    int max_outer = 500;
    double outer_tol = 1e-5;
    int inner_sweeps = 1;
    double inner_tol = 1e-6;
    // Unset: group-average when loadings are one-hot and regions average more
    // than 200 observations, exact otherwise.
    std::optional<MomentMap> moment_map;
    std::uint64_t seed = 0;
    unsigned threads = 0;  // 0: GPROBIT_THREADS or hardware
    GlassoConfig glasso;

    void validate() const {
        if (max_outer < 1) throw Error("max_outer must be at least 1");
        if (!(outer_tol > 0.0) || !(inner_tol > 0.0)) throw Error("tolerances must be positive");
        if (inner_sweeps < 1) throw Error("inner_sweeps must be at least 1");
    }
};

inline MomentMap resolve_moment_map(const Dataset& data, const EMConfig& cfg) {
    if (cfg.moment_map) return *cfg.moment_map;
    const double mean_n = static_cast<double>(data.n_obs()) / static_cast<double>(data.n_regions());
    return data.one_hot() && mean_n > 200.0 ? MomentMap::group_average : MomentMap::exact;
}

enum class Estimator { graphical, diagonal, probit, mcem };

inline const char* to_string(Estimator e) {
    switch (e) {
        case Estimator::graphical: return "graphical";
        case Estimator::diagonal: return "diagonal";
        case Estimator::probit: return "probit";
        case Estimator::mcem: return "mcem";
    }
    return "?";
}

struct FitResult {
    ModelParams params;
    std::vector<double> q_trajectory;
    int outer_iters = 0;
    bool converged = false;
    double last_change = 0.0;
    double wall_time = 0.0;
    std::optional<Vec> se;
    MomentMap moment_map_used = MomentMap::exact;
    Estimator estimator = Estimator::graphical;
    double rho = 0.0;            // penalty on the expected log-likelihood scale
    double lambda_unit = 0.0;    // 2 rho / R, the penalty seen by the glasso solver
    double q_final = 0.0;
    std::vector<std::string> warnings;
    std::vector<EStepState> states;  // E-step at the returned parameters
    bool random_effects = true;
};

/// Expected complete-data log-likelihood (additive constants dropped):
///   (R/2) log|Phi| - 1/2 tr(Phi sum_r E[uu'|y]) - 1/2 sum_r E[|e_r - Z_r u_r|^2 | y].
inline double q_function(const Dataset& data, const ModelParams& params, const std::vector<EStepState>& states) {
    if (states.size() != data.regions.size()) throw DimensionError("one E-step state per region is required");
    const double logdet = spd_logdet(params.phi(), "precision matrix");
    const Index R = data.n_regions();
    double q = 0.5 * static_cast<double>(R) * logdet;
    for (std::size_t r = 0; r < states.size(); ++r) {
        const auto& b = data.regions[r];
        const auto& st = states[r];
        double zz = 0.0;
        if (b.one_hot()) {
            for (int g : *b.group_index) zz += st.Euu(g, g);
        } else {
            zz = (b.Z.transpose() * b.Z).cwiseProduct(st.Euu).sum();
        }
        q -= 0.5 * params.phi().cwiseProduct(st.Euu).sum();
        q -= 0.5 * (st.m2.sum() - 2.0 * st.cross + zz);
    }
    return q;
}

/// How the precision is updated in the M-step.
struct PhiRule {
    enum Kind { ml, diagonal, penalized, fixed } kind = ml;
    double lambda_unit = 0.0;
};

inline Mat apply_phi_rule(const PhiRule& rule, const Mat& S_bar, const Mat& phi_current, const GlassoConfig& gcfg) {
    switch (rule.kind) {
        case PhiRule::ml: return update_phi_ml(S_bar);
        case PhiRule::diagonal: {
            Mat phi = Mat::Zero(S_bar.rows(), S_bar.cols());
            for (Index g = 0; g < S_bar.rows(); ++g) {
                if (!(S_bar(g, g) > 0.0)) throw NumericalError("averaged E[u_g^2|y] is not positive");
                phi(g, g) = 1.0 / S_bar(g, g);
            }
            return phi;
        }
        case PhiRule::penalized: return glasso_unit(S_bar, rule.lambda_unit, gcfg, phi_current).phi;
        case PhiRule::fixed: return phi_current;
    }
    return phi_current;
}

/// E-step callback: fill `states` (warm starts allowed) at `params`.
using EStepFn = std::function<void(const ModelParams&, std::vector<EStepState>&, int iteration)>;

inline double max_abs_change(const ModelParams& a, const ModelParams& b) {
    return std::max((a.beta - b.beta).cwiseAbs().maxCoeff(), (a.phi() - b.phi()).cwiseAbs().maxCoeff());
}

/// Generic EM loop. Alternates the supplied E-step with the closed-form beta
/// update and the precision rule until the largest absolute parameter change
/// falls below cfg.outer_tol. A final E-step at the returned parameters
/// provides the reported Q value and the stored states.
inline FitResult run_em(const Dataset& data, const EMConfig& cfg, const PhiRule& rule, const EStepFn& estep_fn,
                        ModelParams start, std::vector<EStepState> states = {}) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    FitResult fit;
    ModelParams params = std::move(start);
    if (params.G() != data.G || params.K() != data.K) throw DimensionError("starting values do not match the data");
    std::string trace;
    for (int it = 1; it <= cfg.max_outer; ++it) {
        estep_fn(params, states, it);
        const double q = q_function(data, params, states);
        if (!std::isfinite(q)) throw ConvergenceError("Q-function is not finite at iteration " + std::to_string(it) + trace);
        if (!fit.q_trajectory.empty() && q < fit.q_trajectory.back() - 1e-9 * std::abs(q))
            fit.warnings.push_back("Q decreased at iteration " + std::to_string(it));
        fit.q_trajectory.push_back(q);

        const MStepInputs in = gather_mstep_inputs(data, params, states);
        ModelParams next;
        next.beta = update_beta(in);
        Mat phi = apply_phi_rule(rule, in.S_bar, params.phi(), cfg.glasso);
        if (!next.beta.allFinite() || !phi.allFinite())
            throw ConvergenceError("non-finite parameters at iteration " + std::to_string(it) + trace);
        next.set_precision(std::move(phi));
        fit.last_change = max_abs_change(params, next);
        params = std::move(next);
        fit.outer_iters = it;
        if (it <= 5 || it % 50 == 0)
            trace += "\n  iteration " + std::to_string(it) + ": beta[0]=" + std::to_string(params.beta(0)) +
                     " change=" + std::to_string(fit.last_change);
        if (fit.last_change < cfg.outer_tol) {
            fit.converged = true;
            break;
        }
    }
    estep_fn(params, states, fit.outer_iters + 1);
    fit.q_final = q_function(data, params, states);
    fit.params = std::move(params);
    fit.states = std::move(states);
    fit.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return fit;
}

inline EStepFn meanfield_estep(const Dataset& data, const EMConfig& cfg, MomentMap map) {
    EStepConfig ec{cfg.inner_sweeps, cfg.inner_tol, map};
    const unsigned threads = resolve_threads(cfg.threads);
    return [&data, ec, threads](const ModelParams& p, std::vector<EStepState>& st, int) {
        estep(data, p, ec, st, threads);
    };
}

inline ModelParams default_start(const Dataset& data) {
    return ModelParams::from_precision(fit_probit(data).beta, Mat::Identity(data.G, data.G));
}

namespace detail {

inline FitResult fit_meanfield(const Dataset& data, const EMConfig& cfg, const PhiRule& rule, Estimator tag,
                               std::optional<ModelParams> start = std::nullopt,
                               std::vector<EStepState> states = {}) {
    const MomentMap map = resolve_moment_map(data, cfg);
    const auto t0 = std::chrono::steady_clock::now();
    ModelParams p = start ? *start : default_start(data);
    FitResult fit = run_em(data, cfg, rule, meanfield_estep(data, cfg, map), std::move(p), std::move(states));
    fit.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    fit.moment_map_used = map;
    fit.estimator = tag;
    return fit;
}

}  // namespace detail

/// Maximum-likelihood fit of beta and an unrestricted precision matrix.
inline FitResult fit_ml(const Dataset& data, const EMConfig& cfg = {}) {
    if (data.n_regions() <= data.G)
        throw InfeasibleError("unpenalized estimation needs more regions than groups (R > G; here R = " +
                              std::to_string(data.n_regions()) + ", G = " + std::to_string(data.G) +
                              "); use the penalized path");
    return detail::fit_meanfield(data, cfg, {PhiRule::ml, 0.0}, Estimator::graphical);
}

/// Mixed probit with independent group effects (diagonal precision).
inline FitResult fit_diagonal(const Dataset& data, const EMConfig& cfg = {}) {
    return detail::fit_meanfield(data, cfg, {PhiRule::diagonal, 0.0}, Estimator::diagonal);
}

/// Penalized fit at a single rho.
inline FitResult fit_glasso(const Dataset& data, const EMConfig& cfg, double rho,
                            std::optional<ModelParams> start = std::nullopt, std::vector<EStepState> states = {}) {
    if (!(rho >= 0.0)) throw Error("rho must be non-negative");
    const double lam = unit_penalty(rho, data.n_regions());
    FitResult fit = detail::fit_meanfield(data, cfg, {PhiRule::penalized, lam}, Estimator::graphical, std::move(start),
                                          std::move(states));
    fit.rho = rho;
    fit.lambda_unit = lam;
    return fit;
}

/// Plain probit wrapped as a fit result (no random effects).
inline FitResult fit_plain_probit(const Dataset& data) {
    const auto t0 = std::chrono::steady_clock::now();
    const ProbitFit pf = fit_probit(data);
    FitResult fit;
    fit.params = ModelParams::from_precision(pf.beta, Mat::Identity(data.G, data.G));
    fit.q_trajectory = {pf.loglik};
    fit.q_final = pf.loglik;
    fit.outer_iters = pf.iterations;
    fit.converged = true;
    fit.estimator = Estimator::probit;
    fit.random_effects = false;
    fit.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return fit;
}

struct PathResult {
    std::vector<double> rho_grid;
    std::vector<FitResult> fits;
    std::vector<double> bic;
    Index selected_index = 0;
};

inline double bic_value(const FitResult& fit, Index R) {
    const Index df = fit.params.K() + fit.params.G() + count_edges(fit.params.phi());
    return -2.0 * fit.q_final + static_cast<double>(df) * std::log(static_cast<double>(R));
}

/// Default grid: 20 log-spaced values from rho_max (the smallest rho that
/// makes the first penalized update diagonal) down to rho_max / 100.
inline std::vector<double> default_rho_grid(const Dataset& data, const EMConfig& cfg, int n = 20, double ratio = 100.0) {
    const ModelParams start = default_start(data);
    std::vector<EStepState> states;
    const MomentMap map = resolve_moment_map(data, cfg);
    estep(data, start, {cfg.inner_sweeps, cfg.inner_tol, map}, states, resolve_threads(cfg.threads));
    const MStepInputs in = gather_mstep_inputs(data, start, states);
    const double top = rho_max(in.S_bar, data.n_regions());
    if (!(top > 0.0)) return {0.0};
    std::vector<double> grid;
    for (int k = 0; k < n; ++k) {
        const double f = n == 1 ? 0.0 : static_cast<double>(k) / (n - 1);
        grid.push_back(top * std::pow(ratio, -f));
    }
    return grid;
}

/// Penalized path over a strictly decreasing rho grid, each fit warm-started
/// from the previous one; the model minimizing the Q-based BIC is selected
/// (ties go to the larger rho).
inline PathResult fit_penalized(const Dataset& data, const EMConfig& cfg, std::vector<double> rho_grid = {}) {
    if (rho_grid.empty()) rho_grid = default_rho_grid(data, cfg);
    for (std::size_t k = 0; k < rho_grid.size(); ++k) {
        if (!(rho_grid[k] >= 0.0) || !std::isfinite(rho_grid[k])) throw Error("rho values must be finite and non-negative");
        if (k > 0 && !(rho_grid[k] < rho_grid[k - 1])) throw Error("rho grid must be strictly decreasing");
    }
    PathResult path;
    path.rho_grid = rho_grid;
    std::optional<ModelParams> start;
    std::vector<EStepState> states;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < rho_grid.size(); ++k) {
        FitResult fit = fit_glasso(data, cfg, rho_grid[k], start, states);
        start = fit.params;
        states = fit.states;
        const double b = bic_value(fit, data.n_regions());
        path.bic.push_back(b);
        if (b < best) {
            best = b;
            path.selected_index = static_cast<Index>(k);
        }
        path.fits.push_back(std::move(fit));
    }
    return path;
}

// ---------------------------------------------------------------- prediction

/// Marginal P(y = 1) with u integrated out: Phi(beta'x / sqrt(1 + z' Sigma_G z)).
inline Vec predict(const ModelParams& params, const RegionBlock& block) {
    check_dimensions(block, params);
    Vec p(block.size());
    const Vec xb = block.X * params.beta;
    for (Index i = 0; i < block.size(); ++i) {
        const double s2 = 1.0 + block.Z.row(i).dot(params.sigma() * block.Z.row(i).transpose());
        p(i) = truncnorm::normal_cdf(xb(i) / std::sqrt(s2));
    }
    return p;
}

/// Posterior of one region's effects at fitted parameters.
struct RegionPosterior {
    Vec mean;
    Mat cov;
};

using PosteriorMap = std::map<std::int64_t, RegionPosterior>;

/// Posterior moments of u_r for every fitted region, using the exact moment
/// map (which propagates the estimated correlation between groups).
inline PosteriorMap region_posteriors(const Dataset& data, const ModelParams& params, const EMConfig& cfg,
                                      const std::vector<EStepState>* warm = nullptr) {
    std::vector<EStepState> states = warm ? *warm : std::vector<EStepState>{};
    // Sweeps are run to convergence here; this is a one-off pass.
    EStepConfig ec{std::max(cfg.inner_sweeps, 100), std::min(cfg.inner_tol, 1e-8), MomentMap::exact};
    estep(data, params, ec, states, resolve_threads(cfg.threads));
    PosteriorMap out;
    for (std::size_t r = 0; r < states.size(); ++r) {
        RegionPosterior post;
        post.mean = states[r].Eu;
        post.cov = states[r].Euu - post.mean * post.mean.transpose();
        symmetrize(post.cov);
        out.emplace(data.regions[r].region_id, std::move(post));
    }
    return out;
}

/// Probabilities for rows of a fitted region, conditioning on the region's
/// posterior: Phi((beta'x + z'E[u|y]) / sqrt(1 + z' Var(u|y) z)).
inline Vec predict_conditional(const ModelParams& params, const RegionBlock& block, const RegionPosterior& post) {
    check_dimensions(block, params);
    Vec p(block.size());
    const Vec xb = block.X * params.beta;
    for (Index i = 0; i < block.size(); ++i) {
        const auto z = block.Z.row(i).transpose();
        const double s2 = 1.0 + z.dot(post.cov * z);
        p(i) = truncnorm::normal_cdf((xb(i) + z.dot(post.mean)) / std::sqrt(std::max(s2, 1.0)));
    }
    return p;
}

/// Everything needed to score new rows.
struct Predictor {
    ModelParams params;
    bool random_effects = true;
    PosteriorMap posterior;

    Vec operator()(const RegionBlock& block) const {
        if (!random_effects) {
            check_dimensions(block, params);
            Vec p(block.size());
            const Vec xb = block.X * params.beta;
            for (Index i = 0; i < block.size(); ++i) p(i) = truncnorm::normal_cdf(xb(i));
            return p;
        }
        const auto it = posterior.find(block.region_id);
        return it == posterior.end() ? predict(params, block) : predict_conditional(params, block, it->second);
    }
};

inline Predictor make_predictor(const Dataset& train, const FitResult& fit, const EMConfig& cfg) {
    Predictor pr;
    pr.params = fit.params;
    pr.random_effects = fit.random_effects;
    if (fit.random_effects)
        pr.posterior = region_posteriors(train, fit.params, cfg, fit.states.size() == train.regions.size() ? &fit.states : nullptr);
    return pr;
}

}  // namespace gprobit
