#include "probshape/augment.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include <Eigen/Dense>

#include "probshape/binary_io.hpp"
#include "probshape/error.hpp"
#include "probshape/rng.hpp"

namespace probshape {

double kde_bandwidth(const PcaSubspace &sub, std::span<const ScoreVector> scores) {
    const std::size_t n = scores.size();
    if (n < 2) throw DataError("KDE bandwidth needs at least 2 training scores");
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < n; ++k) {
            if (k != i) best = std::min(best, mahalanobis_sq(sub, scores[i], scores[k]));
        }
        sum += best;
    }
    const double sigma2 = sum / static_cast<double>(n);
    if (!(sigma2 > 0.0)) throw DataError("KDE bandwidth is zero (duplicate training scores)");
    return sigma2;
}

KdeModel make_kde(const PcaSubspace &sub, std::span<const ScoreVector> scores, KernelCovariance covariance) {
    KdeModel kde;
    kde.sigma2 = kde_bandwidth(sub, scores);
    kde.eigenvalues = sub.eigenvalues;
    kde.covariance = covariance;
    kde.centers.resize(static_cast<Eigen::Index>(sub.modes()), static_cast<Eigen::Index>(scores.size()));
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (scores[i].whitened) throw DataError("KDE centers must be unwhitened scores");
        kde.centers.col(static_cast<Eigen::Index>(i)) = scores[i].z;
    }
    return kde;
}

namespace {

// Per-mode kernel standard deviations.
Eigen::VectorXd kernel_sd(const KdeModel &kde) {
    if (kde.covariance == KernelCovariance::Mahalanobis) return (kde.sigma2 * kde.eigenvalues).cwiseSqrt();
    return Eigen::VectorXd::Constant(kde.eigenvalues.size(), std::sqrt(kde.sigma2));
}

} // namespace

double kde_density(const KdeModel &kde, const Eigen::VectorXd &z) {
    const Eigen::VectorXd sd = kernel_sd(kde);
    const double l = static_cast<double>(sd.size());
    const double log_norm = -0.5 * l * std::log(2.0 * std::numbers::pi) - sd.array().log().sum();
    double acc = 0.0;
    for (Eigen::Index n = 0; n < kde.centers.cols(); ++n) {
        const double q = (z - kde.centers.col(n)).cwiseQuotient(sd).squaredNorm();
        acc += std::exp(log_norm - 0.5 * q);
    }
    return acc / static_cast<double>(kde.centers.cols());
}

std::vector<KdeDraw> sample_kde(const KdeModel &kde, std::size_t count, std::uint64_t seed) {
    if (kde.kernels() == 0) throw DataError("KDE has no kernels");
    const Eigen::VectorXd sd = kernel_sd(kde);
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, kde.kernels() - 1);
    std::normal_distribution<double> unit(0.0, 1.0);
    std::vector<KdeDraw> out(count);
    for (auto &draw : out) {
        draw.kernel = pick(rng);
        draw.z.whitened = false;
        draw.z.z = kde.centers.col(static_cast<Eigen::Index>(draw.kernel));
        for (Eigen::Index l = 0; l < sd.size(); ++l) draw.z.z[l] += sd[l] * unit(rng);
    }
    return out;
}

TpsWarp TpsWarp::fit(const Eigen::Matrix3Xd &source, const Eigen::Matrix3Xd &target, double lambda) {
    const Eigen::Index m = source.cols();
    if (m != target.cols()) throw NumericalError("TPS: source and target point counts differ");
    if (m < 5) throw NumericalError("TPS: need at least 5 control points, got " + std::to_string(m));
    if (lambda < 0.0) throw ConfigError("TPS: lambda must be >= 0");

    // Coplanar or collinear sources leave the affine block rank-deficient.
    const Eigen::Vector3d centroid = source.rowwise().mean();
    const Eigen::Matrix3Xd centered = source.colwise() - centroid;
    Eigen::JacobiSVD<Eigen::Matrix3Xd> svd(centered);
    const auto sv = svd.singularValues();
    if (!(sv[2] > 1e-12 * std::max(sv[0], 1e-300))) {
        throw NumericalError("TPS: source control points are coplanar (affine term undetermined)");
    }

    const Eigen::Index n = m + 4;
    Eigen::MatrixXd sys = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < m; ++i) {
        for (Eigen::Index j = i + 1; j < m; ++j) {
            const double r = (source.col(i) - source.col(j)).norm();
            if (r == 0.0) {
                throw NumericalError("TPS: duplicate source control points " + std::to_string(i) + " and " +
                                     std::to_string(j));
            }
            sys(i, j) = r;
            sys(j, i) = r;
        }
        sys(i, i) = lambda;
        sys(i, m) = 1.0;
        sys(m, i) = 1.0;
        for (int a = 0; a < 3; ++a) {
            sys(i, m + 1 + a) = source(a, i);
            sys(m + 1 + a, i) = source(a, i);
        }
    }
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n, 3);
    rhs.topRows(m) = target.transpose();

    Eigen::PartialPivLU<Eigen::MatrixXd> lu(sys);
    const Eigen::MatrixXd sol = lu.solve(rhs);
    if (!sol.allFinite()) throw NumericalError("TPS: singular system");
    const double resid = (sys * sol - rhs).norm();
    if (resid > 1e-6 * std::max(1.0, rhs.norm())) throw NumericalError("TPS: singular or ill-conditioned system");

    TpsWarp w;
    w.source_ = source;
    w.target_ = target;
    w.lambda_ = lambda;
    w.weights_ = sol.topRows(m).transpose();
    w.affine_ = sol.bottomRows(4).transpose();
    return w;
}

Eigen::Vector3d TpsWarp::operator()(const Eigen::Vector3d &p) const {
    Eigen::Vector3d out = affine_.col(0) + affine_.rightCols<3>() * p;
    const Eigen::Index m = source_.cols();
    for (Eigen::Index i = 0; i < m; ++i) out += weights_.col(i) * (source_.col(i) - p).norm();
    return out;
}

double default_tps_lambda(const Eigen::Matrix3Xd &source) {
    const Eigen::Vector3d extent = source.rowwise().maxCoeff() - source.rowwise().minCoeff();
    return 1e-6 * extent.norm();
}

Eigen::Matrix3Xd as_matrix(const ShapeSample &shape) {
    return Eigen::Map<const Eigen::Matrix3Xd>(shape.x.data(), 3, static_cast<Eigen::Index>(shape.point_count()));
}

Volume3D warp_image(const TpsWarp &warp, const Volume3D &image) {
    Volume3D out = image;
    for (std::size_t z = 0; z < image.dims[2]; ++z) {
        for (std::size_t y = 0; y < image.dims[1]; ++y) {
            for (std::size_t x = 0; x < image.dims[0]; ++x) {
                const Eigen::Vector3d w = image.world_of(Eigen::Vector3d(double(x), double(y), double(z)));
                const Eigen::Vector3d v = image.voxel_of(warp(w));
                out.at(x, y, z) = static_cast<float>(trilinear_sample(image, v));
            }
        }
    }
    return out;
}

std::vector<AugmentedPair> build_augmented_set(const PcaSubspace &sub, const KdeModel &kde,
                                               std::span<const OriginalSample> originals, std::size_t count,
                                               std::uint64_t seed) {
    if (originals.empty()) throw DataError("augmentation needs at least one original sample");
    if (originals.size() != kde.kernels()) throw DataError("augmentation: originals and KDE kernels differ in count");
    const auto draws = sample_kde(kde, count, derive_seed(seed, "kde"));
    std::vector<AugmentedPair> out;
    out.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        const auto &draw = draws[s];
        const auto &orig = originals[draw.kernel];
        AugmentedPair pair;
        pair.shape = decode(sub, draw.z);
        pair.scores = encode(sub, pair.shape);
        pair.provenance = draw.kernel;
        pair.seed = derive_seed(seed, s);
        const Eigen::Matrix3Xd src = as_matrix(pair.shape);
        const auto warp = TpsWarp::fit(src, as_matrix(*orig.shape), default_tps_lambda(src));
        pair.image = warp_image(warp, *orig.image);
        out.push_back(std::move(pair));
    }
    return out;
}

void write_augmented_manifest(const std::filesystem::path &path, std::span<const AugmentedPair> pairs,
                              const std::vector<std::string> &image_paths,
                              const std::vector<std::string> &shape_paths) {
    if (image_paths.size() != pairs.size() || shape_paths.size() != pairs.size()) {
        throw DataError("augmented manifest: path lists do not match the pair count");
    }
    auto os = io::open_output(path);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        os << image_paths[i] << ' ' << shape_paths[i] << ' ' << pairs[i].provenance << ' ' << pairs[i].seed << '\n';
    }
}

} // namespace probshape
