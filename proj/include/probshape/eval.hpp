#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "probshape/mesh.hpp"
#include "probshape/shapemodel.hpp"
#include "probshape/volume.hpp"

namespace probshape {

// Warps the mean mesh with a TPS from the mean points to decode(z). Faces are
// unchanged. lambda < 0 selects the default regularization.
TriMesh reconstruct_surface(const PcaSubspace &sub, const TriMesh &mean_mesh, const ScoreVector &z,
                            double lambda = -1.0);

// Mean of the training meshes' vertices (shared topology).
TriMesh mean_mesh(std::span<const TriMesh> meshes);

// Exact Euclidean distance from p to triangle (a, b, c).
double point_triangle_distance(const Eigen::Vector3d &p, const Eigen::Vector3d &a, const Eigen::Vector3d &b,
                               const Eigen::Vector3d &c);

// Mean over `from` vertices of the distance to the `to` surface.
double one_sided_distance(const TriMesh &from, const TriMesh &to);

// Symmetric mean surface-to-surface distance; throws DataError on empty meshes.
double surface_distance(const TriMesh &pred, const TriMesh &truth);

// Exact Euclidean distance transform (world units) to the nearest voxel with
// value > 0.5. Voxels that are themselves foreground get 0.
Volume3D distance_transform(const Volume3D &mask);

// Negative inside, positive outside, built from two exact EDTs.
Volume3D signed_distance(const Volume3D &mask);

// Atypicality of every column of `data` relative to the other columns: PCA of
// the rest with `variance_target`, within-subspace Mahalanobis distance to
// their mean plus off-subspace reconstruction MSE, each min-max normalized,
// then summed. Leaving the sample out keeps a gross outlier from defining its
// own subspace. Needs at least 3 columns.
struct AtypicalityScores {
    std::vector<double> within;
    std::vector<double> off;
    std::vector<double> combined;
};

AtypicalityScores atypicality_scores(const Eigen::MatrixXd &data, double variance_target = 0.95);

// Indices sorted by descending score; ties keep ascending index order.
std::vector<std::size_t> rank_descending(std::span<const double> scores);

struct TestSplit {
    std::vector<std::size_t> control;
    std::vector<std::size_t> aleatoric;
    std::vector<std::size_t> epistemic;
    std::vector<std::size_t> overlap;   // in both aleatoric and epistemic
    std::vector<std::size_t> remainder; // training pool
    AtypicalityScores image_scores;
    AtypicalityScores shape_scores;
};

// Aleatoric set from raw-image atypicality, epistemic set from signed-distance
// atypicality of the masks, control drawn at random from what is left.
// Throws DataError when the pool holds fewer than 3 * set_size samples.
TestSplit select_test_sets(std::span<const Volume3D> images, std::span<const Volume3D> masks, std::size_t set_size,
                           std::uint64_t seed);

// Per-set distribution summary. std uses N - 1; quartiles interpolate
// linearly between order statistics.
struct Stats {
    double mean = 0.0;
    double std = 0.0;
    double min = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
    double max = 0.0;
};

Stats describe(std::span<const double> values);

struct SampleResult {
    std::string set;
    std::size_t index = 0;
    double distance = 0.0;  // world units
    double aleatoric = 0.0; // mean over modes, unwhitened score variance
    double epistemic = 0.0; // same units
};

struct SetSummary {
    std::string set;
    std::size_t count = 0;
    Stats distance;
    Stats aleatoric;
    Stats epistemic;
};

struct EvalReport {
    std::string model; // "uncertain" or "baseline"
    std::vector<SampleResult> samples;
    std::vector<SetSummary> sets; // first-appearance order of sample sets

    const SetSummary &set(const std::string &name) const; // DataError if absent
};

// Fills `sets` from `samples`. Throws DataError on a negative distance.
void summarize(EvalReport &report);

// model,set,index,distance,aleatoric,epistemic
void write_report_csv(const std::filesystem::path &path, std::span<const EvalReport> reports);
// Per-model, per-set aggregates, quartiles and scatter pairs.
void write_report_json(const std::filesystem::path &path, std::span<const EvalReport> reports);
std::vector<EvalReport> read_report_csv(const std::filesystem::path &path);

} // namespace probshape
