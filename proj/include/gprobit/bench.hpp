#pragma once

// Simulation design, evaluation statistics and the replication harnesses.

#include "em.hpp"
#include "mcem.hpp"
#include "rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace gprobit {

struct SimDesign {
    Index N = 50;
    Index G = 10;
    Index R = 200;
    double beta = 1.0;
    double edge_prob_scale = 3.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (N < 1 || G < 1 || R < 1) throw Error("N, G and R must be at least 1");
        if (!(edge_prob_scale > 0.0) || edge_prob_scale / static_cast<double>(G) > 1.0 ||
            edge_prob_scale / static_cast<double>(N) > 1.0)
            throw Error("edge probability scale / G (and / N) must lie in (0, 1]");
    }
};

struct PrecisionDraw {
    Eigen::MatrixXi support;  // symmetric 0/1 off-diagonal pattern, zero diagonal
    Mat theta;                // repaired precision
    Mat sigma;                // its inverse
    double shift = 0.0;       // diagonal loading added for positive definiteness
};

/// Random sparse precision: off-diagonal entries Bernoulli(scale / G), unit
/// diagonal, then the smallest loading delta in {0, 0.1, 0.2, ...} with
/// min eig(Theta + delta I) >= 0.1.
inline PrecisionDraw gen_precision(Index G, double scale, Rng& rng) {
    const double p = scale / static_cast<double>(G);
    if (!(p > 0.0) || p > 1.0) throw Error("gen_precision: scale / G must lie in (0, 1]");
    PrecisionDraw d;
    d.support = Eigen::MatrixXi::Zero(G, G);
    Mat theta = Mat::Identity(G, G);
    for (Index g = 0; g < G; ++g)
        for (Index h = g + 1; h < G; ++h)
            if (rng.bernoulli(p)) {
                d.support(g, h) = d.support(h, g) = 1;
                theta(g, h) = theta(h, g) = 1.0;
            }
    const double lmin = min_eigenvalue(theta);
    int steps = 0;
    while (lmin + 0.1 * steps < 0.1 - 1e-12) ++steps;
    d.shift = 0.1 * steps;
    theta.diagonal().array() += d.shift;
    d.theta = theta;
    d.sigma = spd_inverse(theta, "generated precision");
    return d;
}

inline PrecisionDraw gen_precision(Index G, double scale, std::uint64_t seed) {
    Rng rng(seed);
    return gen_precision(G, scale, rng);
}

struct SimTruth {
    double beta = 1.0;
    PrecisionDraw groups;   // Theta_G and Sigma_G
    Mat sigma_x;            // N x N covariance of each region's covariate vector
    Mat chol_g, chol_x;     // lower Cholesky factors
};

inline SimTruth gen_truth(const SimDesign& d) {
    d.validate();
    Rng rng(derive_seed(d.seed, 0, 0x7472757468ULL));
    SimTruth t;
    t.beta = d.beta;
    t.groups = gen_precision(d.G, d.edge_prob_scale, rng);
    t.sigma_x = gen_precision(d.N, d.edge_prob_scale, rng).sigma;
    t.chol_g = Eigen::LLT<Mat>(t.groups.sigma).matrixL();
    t.chol_x = Eigen::LLT<Mat>(t.sigma_x).matrixL();
    return t;
}

inline std::vector<int> cyclic_groups(Index N, Index G) {
    std::vector<int> g(static_cast<std::size_t>(N));
    for (Index i = 0; i < N; ++i) g[static_cast<std::size_t>(i)] = static_cast<int>(i % G);
    return g;
}

struct SimSample {
    Dataset train;
    Dataset test;  // same regions and effects u_r, fresh covariates and noise
    std::vector<Vec> u;
};

/// Draw one sample from the design. With `with_test`, every region also gets
/// an independent second set of N rows sharing its random effects.
inline SimSample gen_sample(const SimDesign& d, const SimTruth& t, std::uint64_t stream, bool with_test = false) {
    const std::vector<int> groups = cyclic_groups(d.N, d.G);
    SimSample s;
    s.train.K = s.test.K = 1;
    s.train.G = s.test.G = d.G;
    for (Index r = 0; r < d.R; ++r) {
        Rng rng(derive_seed(d.seed, static_cast<std::uint64_t>(r), 0x73616d70ULL + stream));
        Vec eps_u(d.G);
        for (Index g = 0; g < d.G; ++g) eps_u(g) = rng.normal();
        const Vec u = t.chol_g * eps_u;
        auto draw_block = [&](Rng& gen) {
            Vec ex(d.N);
            for (Index i = 0; i < d.N; ++i) ex(i) = gen.normal();
            const Vec x = t.chol_x * ex;
            Eigen::VectorXi y(d.N);
            for (Index i = 0; i < d.N; ++i) {
                const double ystar = t.beta * x(i) + u(groups[static_cast<std::size_t>(i)]) + gen.normal();
                y(i) = ystar >= 0.0 ? 1 : 0;
            }
            return make_one_hot_block(r + 1, y, Mat(x), groups, d.G);
        };
        s.train.regions.push_back(draw_block(rng));
        if (with_test) s.test.regions.push_back(draw_block(rng));
        s.u.push_back(u);
    }
    return s;
}

inline std::pair<Dataset, SimTruth> gen_dataset(const SimDesign& d) {
    SimTruth t = gen_truth(d);
    SimSample s = gen_sample(d, t, 0);
    return {std::move(s.train), std::move(t)};
}

// ------------------------------------------------------------- statistics

struct BiasRmse {
    double bias;
    double rmse;
};

inline BiasRmse bias_rmse(const std::vector<double>& est, double truth) {
    if (est.empty()) throw Error("bias_rmse: no estimates");
    double s = 0.0, s2 = 0.0;
    for (double e : est) {
        s += e - truth;
        s2 += (e - truth) * (e - truth);
    }
    const double n = static_cast<double>(est.size());
    return {s / n, std::sqrt(s2 / n)};
}

struct RocPoint {
    double threshold;
    double fpr;
    double tpr;
};

struct RocCurve {
    std::vector<RocPoint> points;
    double auc = 0.0;
};

inline void check_two_classes(const std::vector<int>& labels) {
    bool pos = false, neg = false;
    for (int l : labels) {
        if (l != 0 && l != 1) throw Error("labels must be 0 or 1");
        (l == 1 ? pos : neg) = true;
    }
    if (!pos || !neg) throw Error("both outcome classes must be present");
}

/// Threshold sweep from +inf downwards; tied scores enter together.
inline RocCurve roc_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw DimensionError("roc_curve: scores and labels differ in length");
    check_two_classes(labels);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double P = 0, Nn = 0;
    for (int l : labels) (l == 1 ? P : Nn) += 1;
    RocCurve c;
    c.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    double tp = 0, fp = 0;
    for (std::size_t k = 0; k < order.size();) {
        const double s = scores[order[k]];
        while (k < order.size() && scores[order[k]] == s) {
            (labels[order[k]] == 1 ? tp : fp) += 1;
            ++k;
        }
        const RocPoint prev = c.points.back();
        c.points.push_back({s, fp / Nn, tp / P});
        c.auc += (c.points.back().fpr - prev.fpr) * (c.points.back().tpr + prev.tpr) / 2.0;
    }
    return c;
}

/// Edge-recovery ROC over a path of precision estimates: one point per
/// estimate, calling an off-diagonal entry an edge when |phi_gh| > 1e-8.
inline std::vector<RocPoint> network_roc(const std::vector<Mat>& path, const Eigen::MatrixXi& support,
                                         const std::vector<double>& rho = {}) {
    const Index G = support.rows();
    double P = 0, Nn = 0;
    for (Index j = 0; j < G; ++j)
        for (Index i = 0; i < j; ++i) (support(i, j) ? P : Nn) += 1;
    std::vector<RocPoint> out;
    for (std::size_t k = 0; k < path.size(); ++k) {
        const Mat& phi = path[k];
        if (phi.rows() != G || phi.cols() != G) throw DimensionError("network_roc: precision size differs from truth");
        double tp = 0, fp = 0;
        for (Index j = 0; j < G; ++j)
            for (Index i = 0; i < j; ++i)
                if (std::abs(phi(i, j)) > 1e-8) (support(i, j) ? tp : fp) += 1;
        out.push_back({k < rho.size() ? rho[k] : static_cast<double>(k), Nn > 0 ? fp / Nn : 0.0, P > 0 ? tp / P : 1.0});
    }
    return out;
}

/// Area under a set of ROC points completed with (0,0) and (1,1); points are
/// ordered by (fpr, tpr) and joined by straight lines.
inline double roc_points_auc(std::vector<RocPoint> pts) {
    pts.push_back({0.0, 0.0, 0.0});
    pts.push_back({0.0, 1.0, 1.0});
    std::sort(pts.begin(), pts.end(),
              [](const RocPoint& a, const RocPoint& b) { return a.fpr < b.fpr || (a.fpr == b.fpr && a.tpr < b.tpr); });
    double auc = 0.0;
    for (std::size_t k = 1; k < pts.size(); ++k)
        auc += (pts[k].fpr - pts[k - 1].fpr) * (pts[k].tpr + pts[k - 1].tpr) / 2.0;
    return auc;
}

struct ClassTable {
    double pct_correct_nonfailed;
    double pct_correct_failed;
};

/// Class-conditional accuracy, predicting a failure when score > threshold.
inline ClassTable classification_table(const std::vector<double>& scores, const std::vector<int>& labels,
                                       double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw Error("threshold must lie in (0, 1)");
    if (scores.size() != labels.size()) throw DimensionError("classification_table: scores and labels differ in length");
    check_two_classes(labels);
    double n0 = 0, n1 = 0, c0 = 0, c1 = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] > threshold;
        if (labels[i] == 1) {
            n1 += 1;
            if (pred) c1 += 1;
        } else {
            n0 += 1;
            if (!pred) c0 += 1;
        }
    }
    return {100.0 * c0 / n0, 100.0 * c1 / n1};
}

inline std::vector<int> labels_of(const Dataset& d) {
    std::vector<int> out;
    for (const auto& b : d.regions)
        for (Index i = 0; i < b.size(); ++i) out.push_back(b.y(i));
    return out;
}

inline std::vector<double> scores_of(const Dataset& d, const Predictor& pr) {
    std::vector<double> out;
    for (const auto& b : d.regions) {
        const Vec p = pr(b);
        out.insert(out.end(), p.data(), p.data() + p.size());
    }
    return out;
}

// --------------------------------------------------------------- harnesses

struct BenchConfig {
    int reps = 10;
    EMConfig em;
    GibbsConfig gibbs;
    double mcem_tol = 1e-3;
    int mcem_max_outer = 500;
    unsigned threads = 0;  // workers across replications
};

struct Table2Row {
    Index N, G, R;
    std::string estimator;
    double bias, rmse, seconds;
    std::vector<double> estimates;
};

inline std::uint64_t replication_seed(std::uint64_t seed, int rep) { return derive_seed(seed, static_cast<std::uint64_t>(rep), 0x726570ULL); }

/// One row per estimator: group-average mean-field, exact mean-field, MCEM.
inline std::vector<Table2Row> run_table2(const SimDesign& design, const BenchConfig& bc,
                                         const std::vector<std::string>& estimators = {"group-average", "exact", "mcem"}) {
    const int S = bc.reps;
    std::vector<std::vector<double>> est(estimators.size(), std::vector<double>(static_cast<std::size_t>(S)));
    std::vector<std::vector<double>> secs = est;
    parallel_for(S, resolve_threads(bc.threads), [&](Index s) {
        SimDesign d = design;
        d.seed = replication_seed(design.seed, static_cast<int>(s));
        const auto [data, truth] = gen_dataset(d);
        for (std::size_t e = 0; e < estimators.size(); ++e) {
            EMConfig cfg = bc.em;
            cfg.threads = 1;
            FitResult fit;
            if (estimators[e] == "group-average" || estimators[e] == "exact") {
                cfg.moment_map = estimators[e] == "exact" ? MomentMap::exact : MomentMap::group_average;
                fit = fit_ml(data, cfg);
            } else if (estimators[e] == "mcem") {
                cfg.outer_tol = bc.mcem_tol;
                cfg.max_outer = bc.mcem_max_outer;
                GibbsConfig g = bc.gibbs;
                g.seed = derive_seed(d.seed, 0, 0x6d63656dULL);
                fit = mcem_fit(data, cfg, g);
            } else {
                throw Error("unknown estimator '" + estimators[e] + "'");
            }
            est[e][static_cast<std::size_t>(s)] = fit.params.beta(0);
            secs[e][static_cast<std::size_t>(s)] = fit.wall_time;
        }
    });
    std::vector<Table2Row> rows;
    for (std::size_t e = 0; e < estimators.size(); ++e) {
        const auto br = bias_rmse(est[e], design.beta);
        const double t = std::accumulate(secs[e].begin(), secs[e].end(), 0.0) / S;
        rows.push_back({design.N, design.G, design.R, estimators[e], br.bias, br.rmse, t, est[e]});
    }
    return rows;
}

struct RocComparison {
    std::vector<std::string> estimators;       // graphical, diagonal, probit
    std::vector<std::vector<double>> auc;      // [estimator][replication]
    std::vector<RocCurve> pooled;              // pooled over replications' test sets
};

/// Test-set ROC of the correlated fit against the diagonal fit and plain
/// probit. Test rows share each region's effects with the training rows.
inline RocComparison run_roc(const SimDesign& design, const BenchConfig& bc) {
    const int S = bc.reps;
    RocComparison out;
    out.estimators = {"graphical", "diagonal", "probit"};
    out.auc.assign(3, std::vector<double>(static_cast<std::size_t>(S)));
    std::vector<std::vector<std::vector<double>>> scores(3, std::vector<std::vector<double>>(static_cast<std::size_t>(S)));
    std::vector<std::vector<int>> labels(static_cast<std::size_t>(S));
    parallel_for(S, resolve_threads(bc.threads), [&](Index s) {
        SimDesign d = design;
        d.seed = replication_seed(design.seed, static_cast<int>(s));
        const SimTruth truth = gen_truth(d);
        const SimSample smp = gen_sample(d, truth, 0, true);
        EMConfig cfg = bc.em;
        cfg.threads = 1;
        const std::vector<FitResult> fits = {fit_ml(smp.train, cfg), fit_diagonal(smp.train, cfg),
                                             fit_plain_probit(smp.train)};
        labels[static_cast<std::size_t>(s)] = labels_of(smp.test);
        for (std::size_t e = 0; e < 3; ++e) {
            const Predictor pr = make_predictor(smp.train, fits[e], cfg);
            auto sc = scores_of(smp.test, pr);
            out.auc[e][static_cast<std::size_t>(s)] = roc_curve(sc, labels[static_cast<std::size_t>(s)]).auc;
            scores[e][static_cast<std::size_t>(s)] = std::move(sc);
        }
    });
    for (std::size_t e = 0; e < 3; ++e) {
        std::vector<double> all;
        std::vector<int> lab;
        for (int s = 0; s < S; ++s) {
            all.insert(all.end(), scores[e][static_cast<std::size_t>(s)].begin(), scores[e][static_cast<std::size_t>(s)].end());
            lab.insert(lab.end(), labels[static_cast<std::size_t>(s)].begin(), labels[static_cast<std::size_t>(s)].end());
        }
        out.pooled.push_back(roc_curve(all, lab));
    }
    return out;
}

struct NetRocResult {
    std::vector<std::vector<RocPoint>> points;  // per replication, one per rho
    std::vector<double> auc;
};

inline NetRocResult run_netroc(const SimDesign& design, const BenchConfig& bc, int grid_points = 20) {
    const int S = bc.reps;
    NetRocResult out;
    out.points.resize(static_cast<std::size_t>(S));
    out.auc.resize(static_cast<std::size_t>(S));
    parallel_for(S, resolve_threads(bc.threads), [&](Index s) {
        SimDesign d = design;
        d.seed = replication_seed(design.seed, static_cast<int>(s));
        const auto [data, truth] = gen_dataset(d);
        EMConfig cfg = bc.em;
        cfg.threads = 1;
        const PathResult path = fit_penalized(data, cfg, default_rho_grid(data, cfg, grid_points));
        std::vector<Mat> phis;
        for (const auto& f : path.fits) phis.push_back(f.params.phi());
        auto pts = network_roc(phis, truth.groups.support, path.rho_grid);
        out.auc[static_cast<std::size_t>(s)] = roc_points_auc(pts);
        out.points[static_cast<std::size_t>(s)] = std::move(pts);
    });
    return out;
}

}  // namespace gprobit
