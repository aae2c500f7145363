#include "probshape/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <Eigen/LU>

#include "probshape/binary_io.hpp"
#include "probshape/error.hpp"
#include "probshape/rng.hpp"

namespace probshape {

using Eigen::VectorXd;

VectorXd population_variance(std::span<const VectorXd> samples) {
    if (samples.empty()) throw DataError("population_variance: no samples");
    // Welford updates: identical samples give exactly zero.
    VectorXd mean = samples.front();
    VectorXd m2 = VectorXd::Zero(mean.size());
    double k = 1.0;
    for (std::size_t i = 1; i < samples.size(); ++i) {
        k += 1.0;
        const VectorXd d = samples[i] - mean;
        mean += d / k;
        m2.array() += d.array() * (samples[i] - mean).array();
    }
    return m2 / k;
}

McPrediction aggregate_predictions(const PcaSubspace &sub, std::vector<Prediction> samples) {
    if (samples.size() < 2) throw DataError("MC inference needs at least 2 dropout samples");
    const auto l = static_cast<Eigen::Index>(sub.modes());
    const VectorXd sd = sub.eigenvalues.cwiseSqrt();
    std::vector<VectorXd> unwhitened;
    unwhitened.reserve(samples.size());
    VectorXd aleatoric = VectorXd::Zero(l);
    for (const auto &p : samples) {
        if (p.z_bar.size() != l) throw DataError("MC inference: prediction length does not match the subspace");
        unwhitened.push_back(p.z_bar.cwiseProduct(sd));
        aleatoric += p.log_var.array().exp().matrix();
    }
    McPrediction out;
    const double v = static_cast<double>(samples.size());
    out.z_mean = VectorXd::Zero(l);
    for (const auto &z : unwhitened) out.z_mean += z;
    out.z_mean /= v;
    out.aleatoric_var = unwhiten_variance(sub, aleatoric / v);
    out.epistemic_var = population_variance(unwhitened);
    out.samples = std::move(samples);
    return out;
}

McPrediction mc_infer(const Network &net, const NetParams &params, const PcaSubspace &sub, const Volume3D &image,
                      std::size_t passes, std::uint64_t seed) {
    if (passes < 2) throw DataError("MC inference needs V >= 2");
    std::vector<Prediction> samples;
    samples.reserve(passes);
    for (std::size_t v = 0; v < passes; ++v) samples.push_back(net.forward(params, image, true, derive_seed(seed, v)));
    return aggregate_predictions(sub, std::move(samples));
}

PointGaussians point_distributions(const PcaSubspace &sub, const VectorXd &z_mean, const VectorXd &var,
                                   std::size_t draws, std::uint64_t seed) {
    if (draws < 10) throw ConfigError("point_distributions needs at least 10 draws");
    if ((var.array() < 0.0).any()) throw DataError("point_distributions: negative variance");
    const std::size_t m = sub.point_count();
    const VectorXd sd = var.cwiseSqrt();
    Rng rng(seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    std::vector<VectorXd> decoded;
    decoded.reserve(draws);
    for (std::size_t j = 0; j < draws; ++j) {
        VectorXd z = z_mean;
        for (Eigen::Index l = 0; l < z.size(); ++l) z[l] += sd[l] * unit(rng);
        decoded.push_back(decode(sub, {z, false}).x);
    }
    PointGaussians g;
    g.means.assign(m, Eigen::Vector3d::Zero());
    g.covariances.assign(m, Eigen::Matrix3d::Zero());
    const double n = static_cast<double>(draws);
    for (std::size_t k = 0; k < m; ++k) {
        const auto off = 3 * static_cast<Eigen::Index>(k);
        Eigen::Vector3d mean = Eigen::Vector3d::Zero();
        for (const auto &x : decoded) mean += x.segment<3>(off);
        mean /= n;
        Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
        for (const auto &x : decoded) {
            const Eigen::Vector3d d = x.segment<3>(off) - mean;
            cov += d * d.transpose();
        }
        g.means[k] = mean;
        g.covariances[k] = cov / (n - 1.0);
    }
    // Zero variance must give exactly the decoded mean and a zero covariance.
    if ((var.array() == 0.0).all()) {
        const VectorXd x = decode(sub, {z_mean, false}).x;
        for (std::size_t k = 0; k < m; ++k) {
            g.means[k] = x.segment<3>(3 * static_cast<Eigen::Index>(k));
            g.covariances[k].setZero();
        }
    }
    return g;
}

std::vector<Eigen::Matrix3d> exact_point_covariances(const PcaSubspace &sub, const VectorXd &var) {
    std::vector<Eigen::Matrix3d> out(sub.point_count(), Eigen::Matrix3d::Zero());
    for (std::size_t k = 0; k < out.size(); ++k) {
        const auto block = sub.basis.middleRows(3 * static_cast<Eigen::Index>(k), 3);
        out[k] = block * var.asDiagonal() * block.transpose();
    }
    return out;
}

double gaussian_entropy(const Eigen::Matrix3d &cov) {
    const double eps = 1e-12 * std::max(cov.trace() / 3.0, 1e-300);
    const Eigen::Matrix3d reg = 0.5 * (cov + cov.transpose()) + eps * Eigen::Matrix3d::Identity();
    const double det = reg.determinant();
    const double two_pi_e = 2.0 * std::numbers::pi * std::numbers::e;
    return 0.5 * (3.0 * std::log(two_pi_e) + std::log(std::max(det, 1e-300)));
}

UncertaintyField entropy_field(const PointGaussians &g, UncertaintyKind kind) {
    UncertaintyField f;
    f.kind = kind;
    f.entropy.reserve(g.covariances.size());
    for (const auto &c : g.covariances) f.entropy.push_back(gaussian_entropy(c));
    return f;
}

std::vector<double> interpolate_to_mesh(std::span<const double> values, std::span<const Eigen::Vector3d> points,
                                        const TriMesh &mesh) {
    if (values.size() != points.size() || points.empty()) throw DataError("interpolate_to_mesh: field/point count mismatch");
    constexpr std::size_t kNeighbours = 4;
    const std::size_t k = std::min(kNeighbours, points.size());
    std::vector<double> out;
    out.reserve(mesh.vertices.size());
    std::vector<std::pair<double, std::size_t>> dist(points.size());
    for (const auto &v : mesh.vertices) {
        for (std::size_t i = 0; i < points.size(); ++i) dist[i] = {(points[i] - v).squaredNorm(), i};
        std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
        if (dist.front().first == 0.0) {
            out.push_back(values[dist.front().second]);
            continue;
        }
        double wsum = 0.0;
        double acc = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            const double w = 1.0 / dist[i].first; // power 2 on the distance
            wsum += w;
            acc += w * values[dist[i].second];
        }
        out.push_back(acc / wsum);
    }
    return out;
}

void write_field(const std::filesystem::path &path, const UncertaintyField &field) {
    auto os = io::open_output(path);
    os.precision(10);
    for (double v : field.entropy) os << v << '\n';
}

} // namespace probshape
