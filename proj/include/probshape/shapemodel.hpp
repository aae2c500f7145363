#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>

#include <Eigen/Core>

#include "probshape/supershapes.hpp"

namespace probshape {

// Linear point-distribution-model subspace: x = U z + mu.
struct PcaSubspace {
    Eigen::VectorXd mean;        // length 3M (or D for generic data)
    Eigen::MatrixXd basis;       // D x L, orthonormal columns
    Eigen::VectorXd eigenvalues; // L, strictly decreasing, > 0
    // Fraction of total variance captured by the L modes. Not persisted.
    std::optional<double> variance_retained;

    std::size_t modes() const { return static_cast<std::size_t>(basis.cols()); }
    std::size_t dimension() const { return static_cast<std::size_t>(mean.size()); }
    std::size_t point_count() const { return dimension() / 3; }
};

struct PcaOptions {
    // Used when fixed_modes is empty: smallest L with retained fraction >= target.
    double variance_target = 0.95;
    std::optional<std::size_t> fixed_modes;
    // Accept rank-0 data and return L = 0 instead of throwing.
    bool allow_empty = false;
};

struct ScoreVector {
    Eigen::VectorXd z;
    bool whitened = false;
};

// Columns of `samples` are the observations. Eigenvalues use 1/(N-1); the
// N x N Gram matrix is decomposed when N < D. Eigenvector signs make the
// largest-magnitude component positive.
PcaSubspace fit_pca(const Eigen::MatrixXd &samples, const PcaOptions &options = {});
PcaSubspace fit_pca(std::span<const ShapeSample> shapes, const PcaOptions &options = {});

ScoreVector encode(const PcaSubspace &sub, const Eigen::VectorXd &x);
ScoreVector encode(const PcaSubspace &sub, const ShapeSample &x);
// Unwhitens first when the flag says so.
ShapeSample decode(const PcaSubspace &sub, const ScoreVector &z);

ScoreVector whiten(const PcaSubspace &sub, const ScoreVector &z);
ScoreVector unwhiten(const PcaSubspace &sub, const ScoreVector &z);
// Per-mode variances in whitened units -> unwhitened units (times delta_l).
Eigen::VectorXd unwhiten_variance(const PcaSubspace &sub, const Eigen::VectorXd &var);

// Squared Mahalanobis distance sum_l (a_l - b_l)^2 / delta_l; both unwhitened.
double mahalanobis_sq(const PcaSubspace &sub, const ScoreVector &a, const ScoreVector &b);

// PSPCA1 container: magic, M, L (u32 LE), mu, delta, U column-major (f64 LE).
void write_pca(const std::filesystem::path &path, const PcaSubspace &sub);
PcaSubspace read_pca(const std::filesystem::path &path);

} // namespace probshape
