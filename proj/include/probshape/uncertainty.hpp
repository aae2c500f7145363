#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "probshape/mesh.hpp"
#include "probshape/network.hpp"
#include "probshape/shapemodel.hpp"

namespace probshape {

struct McPrediction {
    std::vector<Prediction> samples; // raw network outputs, whitened basis
    Eigen::VectorXd z_mean;          // unwhitened
    Eigen::VectorXd aleatoric_var;   // unwhitened
    Eigen::VectorXd epistemic_var;   // unwhitened
    std::size_t passes() const { return samples.size(); }
};

// Population variance (1/V) sum x^2 - ((1/V) sum x)^2 per component,
// accumulated with Welford updates.
Eigen::VectorXd population_variance(std::span<const Eigen::VectorXd> samples);

// Aggregates V dropout predictions (whitened) into unwhitened mean scores,
// aleatoric variance (mean of exp(log_var), times delta) and epistemic
// variance (population variance of the unwhitened means).
McPrediction aggregate_predictions(const PcaSubspace &sub, std::vector<Prediction> samples);

// V stochastic forward passes with per-pass mask seeds derived from `seed`.
McPrediction mc_infer(const Network &net, const NetParams &params, const PcaSubspace &sub, const Volume3D &image,
                      std::size_t passes, std::uint64_t seed);

struct PointGaussians {
    std::vector<Eigen::Vector3d> means;
    std::vector<Eigen::Matrix3d> covariances;
};

// Monte-Carlo pushforward of N(z_mean, diag(var)) through the decoder.
PointGaussians point_distributions(const PcaSubspace &sub, const Eigen::VectorXd &z_mean, const Eigen::VectorXd &var,
                                   std::size_t draws, std::uint64_t seed);

// Closed-form per-point covariance sum_l var_l u_l^(k) u_l^(k)T.
std::vector<Eigen::Matrix3d> exact_point_covariances(const PcaSubspace &sub, const Eigen::VectorXd &var);

enum class UncertaintyKind { Aleatoric, Epistemic };

struct UncertaintyField {
    std::vector<double> entropy; // nats, one per correspondence point
    UncertaintyKind kind = UncertaintyKind::Aleatoric;
};

// 0.5 ln((2 pi e)^3 det(S + eps I)), eps = 1e-12 * max(trace(S) / 3, 1e-300).
double gaussian_entropy(const Eigen::Matrix3d &cov);

UncertaintyField entropy_field(const PointGaussians &g, UncertaintyKind kind);

// Inverse-distance weighting (power 2) over the 4 nearest points; exact at
// coincident vertices.
std::vector<double> interpolate_to_mesh(std::span<const double> values, std::span<const Eigen::Vector3d> points,
                                        const TriMesh &mesh);

// Plain text: one scalar per line.
void write_field(const std::filesystem::path &path, const UncertaintyField &field);

} // namespace probshape
