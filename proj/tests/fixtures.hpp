#pragma once

// Small random inputs shared by the suites.

#include <gprobit/gprobit.hpp>

#include <random>
#include <vector>

namespace fixture {

using namespace gprobit;

inline RegionBlock random_one_hot_block(Index n, Index G, std::mt19937_64& gen, std::int64_t id = 1, Index K = 1) {
    std::normal_distribution<double> nd;
    Eigen::VectorXi y(n);
    Mat X(n, K);
    std::vector<int> groups(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        y(i) = static_cast<int>(gen() & 1);
        for (Index k = 0; k < K; ++k) X(i, k) = nd(gen);
        groups[static_cast<std::size_t>(i)] = static_cast<int>(gen() % static_cast<std::uint64_t>(G));
    }
    return make_one_hot_block(id, y, X, groups, G);
}

inline RegionBlock random_dense_block(Index n, Index G, std::mt19937_64& gen, std::int64_t id = 1) {
    std::normal_distribution<double> nd;
    RegionBlock b;
    b.region_id = id;
    b.y = Eigen::VectorXi(n);
    b.X = Mat(n, 1);
    b.Z = Mat(n, G);
    for (Index i = 0; i < n; ++i) {
        b.y(i) = static_cast<int>(gen() & 1);
        b.X(i, 0) = nd(gen);
        for (Index g = 0; g < G; ++g) b.Z(i, g) = 0.7 * nd(gen);
    }
    return b;
}

inline Dataset small_design(Index N, Index G, Index R, std::uint64_t seed, double edge_scale = 1.0) {
    SimDesign d;
    d.N = N;
    d.G = G;
    d.R = R;
    d.edge_prob_scale = edge_scale;
    d.seed = seed;
    return gen_dataset(d).first;
}

}  // namespace fixture
