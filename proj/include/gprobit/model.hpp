#pragma once

#include "common.hpp"

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace gprobit {

/// Observations of one sampling unit (region). Rows are observations.
///
/// `Z` is always stored densely. When the loadings are one-hot group
/// memberships, `group_index` holds the 0-based group of every row and
/// `Z` is its indicator matrix; estimators may use either view.
struct RegionBlock {
    std::int64_t region_id = 0;
    Eigen::VectorXi y;
    Mat X;
    Mat Z;
    std::optional<std::vector<int>> group_index;

    Index size() const { return y.size(); }
    Index n_covariates() const { return X.cols(); }
    Index n_groups() const { return Z.cols(); }
    bool one_hot() const { return group_index.has_value(); }

    /// Members per group (m_gr). Requires one-hot loadings.
    std::vector<int> group_counts() const {
        if (!group_index) throw UnsupportedError("group counts need one-hot loadings");
        std::vector<int> counts(static_cast<std::size_t>(n_groups()), 0);
        for (int g : *group_index) ++counts[static_cast<std::size_t>(g)];
        return counts;
    }
};

struct Dataset {
    std::vector<RegionBlock> regions;
    Index K = 0;
    Index G = 0;

    Index n_regions() const { return static_cast<Index>(regions.size()); }
    Index n_obs() const {
        Index n = 0;
        for (const auto& b : regions) n += b.size();
        return n;
    }
    bool one_hot() const {
        return std::all_of(regions.begin(), regions.end(),
                           [](const RegionBlock& b) { return b.one_hot(); });
    }
};

/// Regression coefficients and the group precision with its cached inverse.
class ModelParams {
public:
    ModelParams() = default;

    static ModelParams from_precision(Vec beta, Mat phi) {
        ModelParams p;
        p.beta = std::move(beta);
        p.set_precision(std::move(phi));
        return p;
    }

    static ModelParams from_covariance(Vec beta, Mat sigma) {
        ModelParams p;
        p.beta = std::move(beta);
        p.set_covariance(std::move(sigma));
        return p;
    }

    void set_precision(Mat phi) {
        symmetrize(phi);
        sigma_ = spd_inverse(phi, "precision matrix");
        phi_ = std::move(phi);
    }

    void set_covariance(Mat sigma) {
        symmetrize(sigma);
        phi_ = spd_inverse(sigma, "random-effect covariance");
        sigma_ = std::move(sigma);
    }

    const Mat& phi() const { return phi_; }
    const Mat& sigma() const { return sigma_; }
    Index K() const { return beta.size(); }
    Index G() const { return phi_.rows(); }

    Vec beta;

private:
    Mat phi_;
    Mat sigma_;
};

inline void check_dimensions(const RegionBlock& block, const ModelParams& params) {
    if (block.X.cols() != params.K() || block.Z.cols() != params.G() ||
        block.X.rows() != block.size() || block.Z.rows() != block.size()) {
        throw DimensionError("region " + std::to_string(block.region_id) +
                             ": block dimensions (N=" + std::to_string(block.size()) +
                             ", K=" + std::to_string(block.X.cols()) +
                             ", G=" + std::to_string(block.Z.cols()) +
                             ") do not match parameters (K=" + std::to_string(params.K()) +
                             ", G=" + std::to_string(params.G()) + ")");
    }
}

/// Model-implied covariance of the latent vector: Z Sigma_G Z' + I.
/// Dense N x N; intended for small blocks and oracles.
inline Mat region_covariance(const RegionBlock& block, const ModelParams& params) {
    check_dimensions(block, params);
    Mat s = block.Z * params.sigma() * block.Z.transpose();
    s.diagonal().array() += 1.0;
    symmetrize(s);
    return s;
}

/// One parsed CSV row before grouping. `group` is 1-based when present;
/// otherwise `z` carries the dense loadings.
struct RawRow {
    std::int64_t region = 0;
    double y = 0.0;
    std::optional<int> group;
    std::vector<double> z;
    std::vector<double> x;
    std::size_t line = 0;
};

namespace detail {
inline std::string row_tag(const RawRow& r) { return "row " + std::to_string(r.line); }
}  // namespace detail

/// Group rows by region (ascending region id, file order within a region)
/// and enforce the data invariants. `n_groups` is required for one-hot rows
/// and ignored for dense rows (taken from the loading width).
inline Dataset validate_dataset(const std::vector<RawRow>& rows, std::optional<int> n_groups = {}) {
    if (rows.empty()) throw DataError("dataset has no rows");

    const bool one_hot = rows.front().group.has_value();
    const std::size_t K = rows.front().x.size();
    std::size_t G = 0;
    if (one_hot) {
        if (!n_groups) {
            int gmax = 0;
            for (const auto& r : rows)
                if (r.group) gmax = std::max(gmax, *r.group);
            n_groups = gmax;
        }
        if (*n_groups < 1) throw DataError("number of groups must be at least 1");
        G = static_cast<std::size_t>(*n_groups);
    } else {
        G = rows.front().z.size();
    }
    if (K == 0) throw DataError("at least one covariate column is required");

    std::map<std::int64_t, std::vector<const RawRow*>> by_region;
    for (const auto& r : rows) {
        if (r.y != 0.0 && r.y != 1.0) throw DataError(detail::row_tag(r) + ": outcome must be 0 or 1");
        if (r.x.size() != K)
            throw DataError(detail::row_tag(r) + ": expected " + std::to_string(K) +
                            " covariates, found " + std::to_string(r.x.size()));
        if (r.group.has_value() != one_hot)
            throw DataError(detail::row_tag(r) + ": mixed one-hot and dense loading rows");
        if (one_hot) {
            if (*r.group < 1 || static_cast<std::size_t>(*r.group) > G)
                throw DataError(detail::row_tag(r) + ": group index " + std::to_string(*r.group) +
                                " outside 1.." + std::to_string(G));
        } else if (r.z.size() != G) {
            throw DataError(detail::row_tag(r) + ": expected " + std::to_string(G) +
                            " loadings, found " + std::to_string(r.z.size()));
        }
        for (double v : r.x)
            if (!std::isfinite(v)) throw DataError(detail::row_tag(r) + ": non-finite covariate");
        for (double v : r.z)
            if (!std::isfinite(v)) throw DataError(detail::row_tag(r) + ": non-finite loading");
        by_region[r.region].push_back(&r);
    }

    Dataset ds;
    ds.K = static_cast<Index>(K);
    ds.G = static_cast<Index>(G);
    for (const auto& [id, members] : by_region) {
        RegionBlock b;
        b.region_id = id;
        const auto n = static_cast<Index>(members.size());
        b.y.resize(n);
        b.X.resize(n, ds.K);
        b.Z = Mat::Zero(n, ds.G);
        if (one_hot) b.group_index.emplace(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) {
            const RawRow& r = *members[static_cast<std::size_t>(i)];
            b.y(i) = static_cast<int>(r.y);
            for (Index k = 0; k < ds.K; ++k) b.X(i, k) = r.x[static_cast<std::size_t>(k)];
            if (one_hot) {
                const int g = *r.group - 1;
                (*b.group_index)[static_cast<std::size_t>(i)] = g;
                b.Z(i, g) = 1.0;
            } else {
                for (Index g = 0; g < ds.G; ++g) b.Z(i, g) = r.z[static_cast<std::size_t>(g)];
            }
        }
        ds.regions.push_back(std::move(b));
    }
    return ds;
}

/// Build a one-hot block from 0-based group labels.
inline RegionBlock make_one_hot_block(std::int64_t id, Eigen::VectorXi y, Mat X,
                                      const std::vector<int>& groups, Index G) {
    RegionBlock b;
    b.region_id = id;
    b.y = std::move(y);
    b.X = std::move(X);
    b.Z = Mat::Zero(b.y.size(), G);
    for (Index i = 0; i < b.y.size(); ++i) b.Z(i, groups[static_cast<std::size_t>(i)]) = 1.0;
    b.group_index = groups;
    return b;
}

}  // namespace gprobit
