#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "probshape/shapemodel.hpp"
#include "probshape/supershapes.hpp"
#include "probshape/volume.hpp"

namespace probshape {

// Kernel covariance of each KDE component. Mahalanobis is sigma^2 * Delta
// (isotropic in whitened coordinates, consistent with the bandwidth metric);
// Isotropic is the literal sigma^2 * I over raw scores.
enum class KernelCovariance { Mahalanobis, Isotropic };

struct KdeModel {
    Eigen::VectorXd eigenvalues; // Delta of the owning subspace
    Eigen::MatrixXd centers;     // L x N unwhitened training scores
    double sigma2 = 0.0;
    KernelCovariance covariance = KernelCovariance::Mahalanobis;

    std::size_t kernels() const { return static_cast<std::size_t>(centers.cols()); }
};

// Mean over samples of the squared Mahalanobis distance to the nearest other
// sample. Throws DataError for N < 2 or a zero result.
double kde_bandwidth(const PcaSubspace &sub, std::span<const ScoreVector> scores);

KdeModel make_kde(const PcaSubspace &sub, std::span<const ScoreVector> scores,
                  KernelCovariance covariance = KernelCovariance::Mahalanobis);

// Mixture density at z (unwhitened) under the model's kernel covariance.
double kde_density(const KdeModel &kde, const Eigen::VectorXd &z);

struct KdeDraw {
    ScoreVector z; // unwhitened
    std::size_t kernel = 0;
};

std::vector<KdeDraw> sample_kde(const KdeModel &kde, std::size_t count, std::uint64_t seed);

// 3D thin-plate spline with kernel phi(r) = r and an affine term.
class TpsWarp {
public:
    // Control points are columns. Throws NumericalError for fewer than 5
    // points, duplicate or coplanar sources, or a singular system.
    static TpsWarp fit(const Eigen::Matrix3Xd &source, const Eigen::Matrix3Xd &target, double lambda);

    Eigen::Vector3d operator()(const Eigen::Vector3d &p) const;

    const Eigen::Matrix3Xd &source() const { return source_; }
    const Eigen::Matrix3Xd &target() const { return target_; }
    // [translation | linear] as a 3 x 4 block: f(p) = A.col(0) + A.rightCols<3>() p + ...
    const Eigen::Matrix<double, 3, 4> &affine() const { return affine_; }
    const Eigen::Matrix3Xd &weights() const { return weights_; }
    double lambda() const { return lambda_; }

private:
    Eigen::Matrix3Xd source_;
    Eigen::Matrix3Xd target_;
    Eigen::Matrix<double, 3, 4> affine_;
    Eigen::Matrix3Xd weights_;
    double lambda_ = 0.0;
};

// Default regularization: 1e-6 times the source bounding-box diagonal.
double default_tps_lambda(const Eigen::Matrix3Xd &source);

Eigen::Matrix3Xd as_matrix(const ShapeSample &shape);

// Backward warp: each output voxel's world position is mapped through `warp`
// (new shape -> original shape) and trilinearly sampled from `image`.
Volume3D warp_image(const TpsWarp &warp, const Volume3D &image);

struct AugmentedPair {
    Volume3D image;
    ShapeSample shape;
    ScoreVector scores; // encode(shape), unwhitened
    std::size_t provenance = 0;
    std::uint64_t seed = 0;
};

struct OriginalSample {
    const ShapeSample *shape = nullptr;
    const Volume3D *image = nullptr;
};

std::vector<AugmentedPair> build_augmented_set(const PcaSubspace &sub, const KdeModel &kde,
                                               std::span<const OriginalSample> originals, std::size_t count,
                                               std::uint64_t seed);

// One line per pair: image path, shape path, provenance index, seed.
void write_augmented_manifest(const std::filesystem::path &path, std::span<const AugmentedPair> pairs,
                              const std::vector<std::string> &image_paths,
                              const std::vector<std::string> &shape_paths);

} // namespace probshape
