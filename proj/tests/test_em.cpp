#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace gprobit;

namespace {

// Probit data with two covariates and all-zero loadings on G = 2 groups.
Dataset zero_loading_data(Index R, Index n, std::uint64_t seed) {
    Rng rng(seed);
    Dataset d;
    d.K = 2;
    d.G = 2;
    for (Index r = 0; r < R; ++r) {
        RegionBlock b;
        b.region_id = r + 1;
        b.y = Eigen::VectorXi(n);
        b.X = Mat(n, 2);
        b.Z = Mat::Zero(n, 2);
        for (Index i = 0; i < n; ++i) {
            b.X(i, 0) = 1.0;
            b.X(i, 1) = rng.normal();
            b.y(i) = -0.3 + 0.8 * b.X(i, 1) + rng.normal() >= 0.0 ? 1 : 0;
        }
        d.regions.push_back(std::move(b));
    }
    return d;
}

}  // namespace

TEST(QFunction, HandComputedSingleObservation) {
    Dataset d;
    d.K = 1;
    d.G = 1;
    Eigen::VectorXi y(1);
    y << 1;
    d.regions.push_back(make_one_hot_block(1, y, Mat::Ones(1, 1), {0}, 1));
    const ModelParams p = ModelParams::from_precision(Vec::Ones(1), Mat::Constant(1, 1, 2.0));
    EStepState st;
    st.m1 = Vec::Constant(1, 0.4);
    st.m2 = Vec::Constant(1, 1.5);
    st.Eu = Vec::Constant(1, 0.2);
    st.Euu = Mat::Constant(1, 1, 0.5);
    st.cross = 0.3;
    // (1/2) log 2 - (1/2)(2)(0.5) - (1/2)(1.5 - 0.6 + 0.5)
    EXPECT_NEAR(q_function(d, p, {st}), 0.5 * std::log(2.0) - 0.5 - 0.7, 1e-14);
}

TEST(QFunction, ZeroLatentMomentsGiveTheLinearPredictorSquared) {
    // E[y*] = E[y*^2] = 0 in raw terms is m1 = -x'b, m2 = (x'b)^2 for the centred latent.
    Dataset d;
    d.K = 1;
    d.G = 1;
    Eigen::VectorXi y(1);
    y << 0;
    d.regions.push_back(make_one_hot_block(1, y, Mat::Constant(1, 1, 1.3), {0}, 1));
    const ModelParams p = ModelParams::from_precision(Vec::Constant(1, 0.8), Mat::Identity(1, 1));
    const double xb = 1.3 * 0.8;
    EStepState st;
    st.m1 = Vec::Constant(1, -xb);
    st.m2 = Vec::Constant(1, xb * xb);
    st.Eu = Vec::Zero(1);
    st.Euu = Mat::Zero(1, 1);
    st.cross = 0.0;
    EXPECT_NEAR(q_function(d, p, {st}), -0.5 * xb * xb, 1e-14);
}

TEST(QFunction, DuplicatedRegionsDoubleTheValue) {
    const Dataset d = fixture::small_design(8, 3, 6, 9);
    const ModelParams p = ModelParams::from_precision(Vec::Constant(1, 0.9), Mat::Identity(3, 3) * 1.5);
    std::vector<EStepState> st;
    estep(d, p, {50, 1e-10, MomentMap::exact}, st, 1);
    Dataset twice = d;
    for (const auto& b : d.regions) twice.regions.push_back(b);
    std::vector<EStepState> st2 = st;
    st2.insert(st2.end(), st.begin(), st.end());
    EXPECT_NEAR(q_function(twice, p, st2), 2.0 * q_function(d, p, st), 1e-10);
}

TEST(QFunction, DenseLoadingsUseFullQuadraticForm) {
    std::mt19937_64 gen(3);
    Dataset d;
    d.K = 1;
    d.G = 2;
    d.regions.push_back(fixture::random_dense_block(4, 2, gen));
    const ModelParams p = ModelParams::from_covariance(Vec::Ones(1), oracle::random_spd(2, gen));
    std::vector<EStepState> st;
    estep(d, p, {10, 1e-10, MomentMap::exact}, st, 1);
    const auto& b = d.regions[0];
    const double expected = 0.5 * std::log(p.phi().determinant()) - 0.5 * (p.phi() * st[0].Euu).trace() -
                            0.5 * (st[0].m2.sum() - 2.0 * st[0].cross + (b.Z.transpose() * b.Z * st[0].Euu).trace());
    EXPECT_NEAR(q_function(d, p, st), expected, 1e-12);
}

TEST(FitMl, ZeroLoadingsReduceToPlainProbit) {
    const Dataset d = zero_loading_data(40, 25, 8);
    EMConfig cfg;
    cfg.moment_map = MomentMap::exact;
    cfg.outer_tol = 1e-10;
    cfg.max_outer = 5000;
    const FitResult fit = fit_ml(d, cfg);
    const ProbitFit pf = fit_probit(d);
    EXPECT_TRUE(fit.converged);
    EXPECT_LT((fit.params.beta - pf.beta).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(FitMl, RecoversSlopeOnSimulatedData) {
    const Dataset d = fixture::small_design(50, 3, 150, 4);
    for (MomentMap map : {MomentMap::exact, MomentMap::group_average}) {
        EMConfig cfg;
        cfg.moment_map = map;
        const FitResult fit = fit_ml(d, cfg);
        EXPECT_TRUE(fit.converged);
        EXPECT_NEAR(fit.params.beta(0), 1.0, 0.15) << to_string(map);
        EXPECT_EQ(fit.moment_map_used, map);
        EXPECT_EQ(fit.states.size(), d.regions.size());
    }
}

TEST(FitMl, NeedsMoreRegionsThanGroups) {
    const Dataset d = fixture::small_design(20, 5, 5, 1);
    EXPECT_THROW(fit_ml(d), InfeasibleError);
    // The penalized update stays well defined.
    const double top = default_rho_grid(d, {}, 1)[0];
    EXPECT_NO_THROW(fit_penalized(d, {}, {top, 0.5 * top, 0.25 * top}));
}

TEST(FitMl, ReportsNonConvergence) {
    const Dataset d = fixture::small_design(20, 3, 40, 2);
    EMConfig cfg;
    cfg.max_outer = 2;
    const FitResult fit = fit_ml(d, cfg);
    EXPECT_FALSE(fit.converged);
    EXPECT_EQ(fit.outer_iters, 2);
    EXPECT_EQ(fit.q_trajectory.size(), 2u);
}

TEST(FitMl, SameResultForAnyThreadCount) {
    const Dataset d = fixture::small_design(20, 4, 40, 6);
    EMConfig a, b;
    a.threads = 1;
    b.threads = 4;
    const FitResult fa = fit_ml(d, a), fb = fit_ml(d, b);
    EXPECT_EQ(fa.params.beta, fb.params.beta);
    EXPECT_EQ(fa.params.phi(), fb.params.phi());
    EXPECT_EQ(fa.q_trajectory, fb.q_trajectory);
}

TEST(FitDiagonal, PrecisionStaysDiagonal) {
    const Dataset d = fixture::small_design(20, 4, 40, 7, 3.0);
    const FitResult fit = fit_diagonal(d);
    EXPECT_EQ(count_edges(fit.params.phi()), 0);
    EXPECT_EQ(fit.estimator, Estimator::diagonal);
}

TEST(ConfigValidation, RejectsBadSettings) {
    const Dataset d = fixture::small_design(10, 2, 10, 1);
    EMConfig c;
    c.max_outer = 0;
    EXPECT_THROW(fit_ml(d, c), Error);
    c = {};
    c.outer_tol = 0.0;
    EXPECT_THROW(fit_ml(d, c), Error);
    EXPECT_THROW(fit_glasso(d, {}, -1.0), Error);
}

TEST(PenalizedPath, BicSelectsTheMinimum) {
    const Dataset d = fixture::small_design(30, 5, 60, 3, 2.0);
    const auto grid = default_rho_grid(d, {}, 6, 50.0);
    ASSERT_EQ(grid.size(), 6u);
    for (std::size_t k = 1; k < grid.size(); ++k) EXPECT_LT(grid[k], grid[k - 1]);
    EXPECT_NEAR(grid.front() / grid.back(), 50.0, 1e-9);
    const PathResult path = fit_penalized(d, {}, grid);
    ASSERT_EQ(path.fits.size(), 6u);
    const auto best = std::min_element(path.bic.begin(), path.bic.end()) - path.bic.begin();
    EXPECT_EQ(path.selected_index, best);
    for (std::size_t k = 0; k < path.fits.size(); ++k) {
        EXPECT_NEAR(path.bic[k], bic_value(path.fits[k], 60), 1e-12);
        EXPECT_NEAR(path.fits[k].lambda_unit, 2.0 * grid[k] / 60.0, 1e-15);
        EXPECT_GT(min_eigenvalue(path.fits[k].params.phi()), 0.0);
    }
    EXPECT_THROW(fit_penalized(d, {}, {0.1, 0.2}), Error);
}

TEST(Bic, CountsFreeParameters) {
    FitResult f;
    Mat phi = Mat::Identity(3, 3);
    phi(0, 1) = phi(1, 0) = 0.2;
    f.params = ModelParams::from_precision(Vec::Ones(2), phi);
    f.q_final = -10.0;
    // K + G + edges = 2 + 3 + 1
    EXPECT_NEAR(bic_value(f, 50), 20.0 + 6.0 * std::log(50.0), 1e-12);
}

TEST(Predict, MarginalProbabilities) {
    Eigen::VectorXi y(2);
    y << 1, 0;
    Mat X(2, 1);
    X << 0.5, -1.0;
    const RegionBlock b = make_one_hot_block(1, y, X, {0, 1}, 2);
    Mat S(2, 2);
    S << 0.5, 0.1, 0.1, 2.0;
    const ModelParams p = ModelParams::from_covariance(Vec::Constant(1, 1.2), S);
    const Vec pr = predict(p, b);
    EXPECT_NEAR(pr(0), truncnorm::normal_cdf(0.6 / std::sqrt(1.5)), 1e-15);
    EXPECT_NEAR(pr(1), truncnorm::normal_cdf(-1.2 / std::sqrt(3.0)), 1e-15);
}

TEST(Predict, ConditionalUsesPosteriorOfKnownRegions) {
    Eigen::VectorXi y(1);
    y << 1;
    const RegionBlock b = make_one_hot_block(7, y, Mat::Constant(1, 1, 0.3), {1}, 2);
    const ModelParams p = ModelParams::from_precision(Vec::Ones(1), Mat::Identity(2, 2));
    RegionPosterior post{Vec(2), Mat::Zero(2, 2)};
    post.mean << -0.4, 0.9;
    post.cov(1, 1) = 0.44;
    EXPECT_NEAR(predict_conditional(p, b, post)(0), truncnorm::normal_cdf(1.2 / std::sqrt(1.44)), 1e-15);
    Predictor pr;
    pr.params = p;
    pr.posterior.emplace(7, post);
    EXPECT_NEAR(pr(b)(0), truncnorm::normal_cdf(1.2 / 1.2), 1e-15);
    RegionBlock other = b;
    other.region_id = 8;
    EXPECT_NEAR(pr(other)(0), truncnorm::normal_cdf(0.3 / std::sqrt(2.0)), 1e-15);
    pr.random_effects = false;
    EXPECT_NEAR(pr(b)(0), truncnorm::normal_cdf(0.3), 1e-15);
}

TEST(PlainProbit, MatchesNewtonSolution) {
    const Dataset d = zero_loading_data(10, 30, 2);
    const FitResult f = fit_plain_probit(d);
    EXPECT_FALSE(f.random_effects);
    // The score vanishes at the MLE.
    Vec score = Vec::Zero(2);
    for (const auto& b : d.regions)
        for (Index i = 0; i < b.size(); ++i) {
            const double eta = b.X.row(i).dot(f.params.beta);
            const double pdf = std::exp(-0.5 * eta * eta) / std::sqrt(2.0 * std::numbers::pi);
            const double cdf = truncnorm::normal_cdf(eta);
            const double w = b.y(i) == 1 ? pdf / cdf : -pdf / (1.0 - cdf);
            score += w * b.X.row(i).transpose();
        }
    EXPECT_LT(score.cwiseAbs().maxCoeff(), 1e-7);
}
