#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace gprobit;

namespace {

ModelParams random_params(Index G, std::mt19937_64& gen) {
    return ModelParams::from_covariance(Vec::Constant(1, 0.8), oracle::random_spd(G, gen, 0.3));
}

EStepState converged(const RegionBlock& b, const ModelParams& p, MomentMap map) {
    return estep_region(b, p, {2000, 1e-13, map});
}

}  // namespace

TEST(LooConditional, MatchesDenseConditional) {
    std::mt19937_64 gen(11);
    for (int k = 0; k < 10; ++k) {
        const RegionBlock b = fixture::random_dense_block(7, 3, gen);
        const ModelParams p = random_params(3, gen);
        EStepState st = init_state(b, p);
        std::normal_distribution<double> nd;
        for (Index i = 0; i < b.size(); ++i) st.m1(i) = nd(gen);
        const Mat Sr = region_covariance(b, p);
        for (Index i = 0; i < b.size(); ++i) {
            const auto o = oracle::dense_loo(Sr, i);
            const auto c = loo_conditional(b, p, i, st);
            EXPECT_NEAR(c.mu_tilde, b.X.row(i).dot(p.beta) + o.coef.dot(st.m1), 1e-10);
            EXPECT_NEAR(c.sigma_tilde2, o.var, 1e-10);
        }
    }
}

TEST(LooConditional, RejectsBadIndex) {
    std::mt19937_64 gen(1);
    const RegionBlock b = fixture::random_dense_block(3, 2, gen);
    const ModelParams p = random_params(2, gen);
    EXPECT_THROW(loo_conditional(b, p, 3, init_state(b, p)), DimensionError);
}

TEST(MeanField, SingleObservationIsExact) {
    std::mt19937_64 gen(2);
    for (int k = 0; k < 5; ++k) {
        const RegionBlock b = fixture::random_dense_block(1, 3, gen);
        const ModelParams p = random_params(3, gen);
        const EStepState st = estep_region(b, p, {1, 1e-12, MomentMap::exact});
        const double xb = b.X.row(0).dot(p.beta);
        const double var = 1.0 + b.Z.row(0).dot(p.sigma() * b.Z.row(0).transpose());
        const auto q = oracle::truncated_moments(xb, std::sqrt(var), b.y(0) == 1);
        EXPECT_NEAR(st.m1(0), q.m1 - xb, 1e-8);
        EXPECT_NEAR(st.m2(0) - st.m1(0) * st.m1(0), q.c2, 1e-8);
        Mat M(1, 1);
        M(0, 0) = st.m2(0);
        const auto [Eu, Euu] = oracle::dense_u_moments(b.Z, p.sigma(), st.m1, M);
        EXPECT_LT((st.Eu - Eu).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_LT((st.Euu - Euu).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(MeanField, KernelsAgreeOnOneHotBlocks) {
    std::mt19937_64 gen(3);
    for (int k = 0; k < 5; ++k) {
        const RegionBlock b = fixture::random_one_hot_block(40, 4, gen);
        const ModelParams p = random_params(4, gen);
        EStepState a = init_state(b, p), c = a;
        for (int s = 0; s < 5; ++s) {
            a = mean_field_sweep(b, p, a, SweepKernel::dense);
            c = mean_field_sweep(b, p, c, SweepKernel::membership);
        }
        EXPECT_LT((a.m1 - c.m1).cwiseAbs().maxCoeff(), 1e-11);
        EXPECT_LT((a.m2 - c.m2).cwiseAbs().maxCoeff(), 1e-11);
    }
}

TEST(MeanField, MembershipKernelNeedsOneHot) {
    std::mt19937_64 gen(4);
    const RegionBlock b = fixture::random_dense_block(5, 2, gen);
    const ModelParams p = random_params(2, gen);
    EXPECT_THROW(mean_field_sweep(b, p, {}, SweepKernel::membership), UnsupportedError);
    EXPECT_THROW(estep_region(b, p, {1, 1e-6, MomentMap::group_average}), UnsupportedError);
}

TEST(MeanField, FixedPointIsStable) {
    std::mt19937_64 gen(5);
    const RegionBlock b = fixture::random_one_hot_block(60, 5, gen);
    const ModelParams p = random_params(5, gen);
    for (MomentMap map : {MomentMap::exact, MomentMap::group_average}) {
        const EStepState st = converged(b, p, map);
        EXPECT_TRUE(st.converged);
        const EStepState again = mean_field_sweep(b, p, st);
        EXPECT_LT((again.m1 - st.m1).cwiseAbs().maxCoeff(), 1e-11);
        EXPECT_LT((again.m2 - st.m2).cwiseAbs().maxCoeff(), 1e-11);
        EXPECT_TRUE((st.variance().array() > 0.0).all());
    }
}

TEST(MeanField, WarmStartFromFixedPointStopsAfterOneSweep) {
    std::mt19937_64 gen(6);
    const RegionBlock b = fixture::random_one_hot_block(30, 3, gen);
    const ModelParams p = random_params(3, gen);
    const EStepState st = converged(b, p, MomentMap::exact);
    const EStepState warm = estep_region(b, p, {50, 1e-10, MomentMap::exact}, st);
    EXPECT_EQ(warm.sweeps, 1);
    EXPECT_TRUE(warm.converged);
}

TEST(MeanField, FixedPointDoesNotDependOnRowOrder) {
    std::mt19937_64 gen(7);
    const RegionBlock b = fixture::random_one_hot_block(25, 3, gen);
    const ModelParams p = random_params(3, gen);
    std::vector<int> perm(25);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen);
    Eigen::VectorXi y(25);
    Mat X(25, 1);
    std::vector<int> groups(25);
    for (int i = 0; i < 25; ++i) {
        y(i) = b.y(perm[static_cast<std::size_t>(i)]);
        X(i, 0) = b.X(perm[static_cast<std::size_t>(i)], 0);
        groups[static_cast<std::size_t>(i)] = (*b.group_index)[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    }
    const RegionBlock pb = make_one_hot_block(1, y, X, groups, 3);
    for (MomentMap map : {MomentMap::exact, MomentMap::group_average}) {
        const EStepState a = converged(b, p, map);
        const EStepState c = converged(pb, p, map);
        for (int i = 0; i < 25; ++i) {
            EXPECT_NEAR(c.m1(i), a.m1(perm[static_cast<std::size_t>(i)]), 1e-10);
            EXPECT_NEAR(c.m2(i), a.m2(perm[static_cast<std::size_t>(i)]), 1e-10);
        }
        EXPECT_LT((a.Eu - c.Eu).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_LT((a.Euu - c.Euu).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(MeanField, SecondMomentIncludesNeighbourSpread) {
    // With correlated neighbours the recursion adds sum_j a_j^2 Var(e_j) on
    // top of the truncated variance, so m2 - m1^2 exceeds l2c.
    std::mt19937_64 gen(8);
    const RegionBlock b = fixture::random_one_hot_block(20, 2, gen);
    const ModelParams p = ModelParams::from_covariance(Vec::Ones(1), Mat::Identity(2, 2) * 2.0);
    const EStepState st = converged(b, p, MomentMap::exact);
    EXPECT_TRUE(((st.variance() - st.l2c).array() > 1e-6).all());
}

TEST(MeanField, ZeroLoadingsGiveIndependentHalfNormals) {
    std::mt19937_64 gen(21);
    RegionBlock b = fixture::random_dense_block(5, 2, gen);
    b.Z.setZero();
    const ModelParams p = ModelParams::from_precision(Vec::Zero(1), Mat::Identity(2, 2));
    const EStepState st = estep_region(b, p, {1, 1e-12, MomentMap::exact});
    for (Index i = 0; i < 5; ++i) {
        EXPECT_NEAR(st.m1(i), b.y(i) == 1 ? 0.7978845608 : -0.7978845608, 1e-9);
        EXPECT_NEAR(st.m2(i), 1.0, 1e-12);
    }
    EXPECT_EQ(st.Eu.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_LT((st.Euu - p.sigma()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(MeanField, OneConfiguredSweepIsOneSweep) {
    std::mt19937_64 gen(22);
    const RegionBlock b = fixture::random_one_hot_block(12, 3, gen);
    const ModelParams p = random_params(3, gen);
    const EStepState one = estep_region(b, p, {1, 0.0, MomentMap::exact});
    const EStepState manual = mean_field_sweep(b, p, init_state(b, p));
    EXPECT_LT((one.m1 - manual.m1).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((one.m2 - manual.m2).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_EQ(one.sweeps, 1);
}

TEST(UMoments, SingletonGroupsCopyTheirMember) {
    Eigen::VectorXi y(3);
    y << 1, 0, 1;
    Mat X(3, 1);
    X << 0.4, -0.1, 0.9;
    const RegionBlock b = make_one_hot_block(1, y, X, {2, 0, 1}, 3);
    std::mt19937_64 gen(23);
    const ModelParams p = random_params(3, gen);
    const EStepState st = converged(b, p, MomentMap::group_average);
    EXPECT_NEAR(st.Eu(2), st.m1(0), 1e-15);
    EXPECT_NEAR(st.Eu(0), st.m1(1), 1e-15);
    EXPECT_NEAR(st.Eu(1), st.m1(2), 1e-15);
    EXPECT_NEAR(st.Euu(2, 2), st.m2(0), 1e-15);
}

TEST(UMoments, ExactMapMatchesDenseFormulas) {
    std::mt19937_64 gen(9);
    for (int k = 0; k < 10; ++k) {
        const RegionBlock b = k % 2 ? fixture::random_dense_block(8, 3, gen) : fixture::random_one_hot_block(8, 3, gen);
        const ModelParams p = random_params(3, gen);
        const EStepState st = converged(b, p, MomentMap::exact);
        const Mat M = st.m1 * st.m1.transpose() + Mat(st.variance().asDiagonal());
        const auto [Eu, Euu] = oracle::dense_u_moments(b.Z, p.sigma(), st.m1, M);
        EXPECT_LT((st.Eu - Eu).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_LT((st.Euu - Euu).cwiseAbs().maxCoeff(), 1e-10);
        // E[e'Zu] with E[u|e] linear in e.
        Mat Sr = b.Z * p.sigma() * b.Z.transpose();
        Sr.diagonal().array() += 1.0;
        const Mat Kmat = p.sigma() * b.Z.transpose() * Sr.inverse();
        EXPECT_NEAR(st.cross, (b.Z * Kmat * M).trace(), 1e-9);
    }
}

TEST(UMoments, GroupAverageMatchesDoubleSum) {
    std::mt19937_64 gen(10);
    const RegionBlock b = fixture::random_one_hot_block(30, 4, gen);
    const ModelParams p = random_params(4, gen);
    const EStepState st = converged(b, p, MomentMap::group_average);
    const auto& grp = *b.group_index;
    const auto counts = b.group_counts();
    for (Index g = 0; g < 4; ++g) {
        for (Index h = 0; h < 4; ++h) {
            double s = 0.0, mean_g = 0.0;
            for (Index i = 0; i < b.size(); ++i) {
                if (grp[static_cast<std::size_t>(i)] != g) continue;
                mean_g += st.m1(i);
                for (Index j = 0; j < b.size(); ++j) {
                    if (grp[static_cast<std::size_t>(j)] != h) continue;
                    s += i == j ? st.m2(i) : st.m1(i) * st.m1(j);
                }
            }
            const double mg = counts[static_cast<std::size_t>(g)], mh = counts[static_cast<std::size_t>(h)];
            if (mg == 0 || mh == 0) continue;
            EXPECT_NEAR(st.Euu(g, h), s / (mg * mh), 1e-12);
            if (h == 0) {
                EXPECT_NEAR(st.Eu(g), mean_g / mg, 1e-13);
            }
        }
    }
}

TEST(UMoments, EmptyGroupFallsBackToPrior) {
    Eigen::VectorXi y(4);
    y << 1, 0, 1, 1;
    Mat X(4, 1);
    X << 0.2, -0.5, 1.0, 0.1;
    const RegionBlock b = make_one_hot_block(1, y, X, {0, 0, 2, 2}, 3);
    std::mt19937_64 gen(12);
    const ModelParams p = random_params(3, gen);
    const EStepState st = converged(b, p, MomentMap::group_average);
    EXPECT_EQ(st.Eu(1), 0.0);
    EXPECT_TRUE(st.Euu.row(1).isApprox(p.sigma().row(1), 0.0));
    EXPECT_TRUE(st.Euu.col(1).isApprox(p.sigma().col(1), 0.0));
}

TEST(EStep, ResultDoesNotDependOnThreadCount) {
    const Dataset d = fixture::small_design(20, 4, 30, 5);
    std::mt19937_64 gen(13);
    const ModelParams p = random_params(4, gen);
    for (MomentMap map : {MomentMap::exact, MomentMap::group_average}) {
        std::vector<EStepState> one, many;
        estep(d, p, {4, 1e-8, map}, one, 1);
        estep(d, p, {4, 1e-8, map}, many, 3);
        for (std::size_t r = 0; r < one.size(); ++r) {
            EXPECT_EQ(one[r].m1, many[r].m1);
            EXPECT_EQ(one[r].Euu, many[r].Euu);
        }
    }
}

TEST(EStep, RejectsZeroSweeps) {
    std::mt19937_64 gen(14);
    const RegionBlock b = fixture::random_one_hot_block(5, 2, gen);
    EXPECT_THROW(estep_region(b, random_params(2, gen), {0, 1e-6, MomentMap::exact}), Error);
}

TEST(EStep, MeanFieldTracksGibbsOnSmallBlock) {
    // Weakly correlated latents: the factorized fixed point is close to the
    // exact posterior means.
    std::mt19937_64 gen(15);
    const RegionBlock b = fixture::random_one_hot_block(3, 2, gen);
    const ModelParams p = ModelParams::from_covariance(Vec::Constant(1, 0.5), Mat::Identity(2, 2) * 0.2);
    const EStepState st = converged(b, p, MomentMap::exact);
    GibbsConfig g;
    g.n_samples = 200000;
    g.burn_in = 200;
    g.seed = 99;
    const EStepState mc = mc_moments(gibbs_latent(b, p, g), b, p);
    EXPECT_LT((st.m1 - mc.m1).cwiseAbs().maxCoeff(), 0.03);
}
