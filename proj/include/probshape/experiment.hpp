#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "probshape/augment.hpp"
#include "probshape/eval.hpp"
#include "probshape/network.hpp"
#include "probshape/shapemodel.hpp"
#include "probshape/supershapes.hpp"
#include "probshape/uncertainty.hpp"
#include "probshape/volume.hpp"

namespace probshape {

enum class SplitMode {
    Synthetic, // control / heavier blur / other lobe group
    Selection, // atypicality ranking over one generated pool
};

struct DataConfig {
    Dims3 dims{48, 48, 48};
    Lattice lattice{};
    ExponentPrior prior{4.0, 3.0};
    ImagingConfig imaging{};
    double aleatoric_blur = 2.0; // blur sigma of the aleatoric test set
    int train_lobes = 3;
    int epistemic_lobes = 5;
    std::size_t train_count = 60; // original training shapes
    std::size_t test_size = 30;
    // Synthetic mode: the aleatoric and epistemic sets reuse the control
    // exponents and image seeds, changing only the blur or the lobe count.
    bool paired_tests = true;
    SplitMode split = SplitMode::Synthetic;
    std::size_t pool_count = 150; // Selection mode only

    void validate() const; // ConfigError
};

struct GeneratedSet {
    std::string name;
    std::vector<SupershapeParams> params;
    std::vector<std::uint64_t> image_seeds;
    std::vector<double> blur;       // imaging blur sigma per sample
    std::vector<std::size_t> origin; // index in the generated pool (Selection) or own index
    std::vector<ShapeSample> shapes;
    std::vector<Volume3D> images;   // raw intensities

    std::size_t size() const { return params.size(); }
};

struct Dataset {
    GeneratedSet train;
    std::vector<GeneratedSet> tests; // control, aleatoric, epistemic
    std::optional<TestSplit> split;  // Selection mode
};

// Shapes and images of a set from its parameters and seeds alone.
GeneratedSet regenerate_set(std::string name, std::vector<SupershapeParams> params,
                            std::vector<std::uint64_t> image_seeds, std::vector<double> blur,
                            std::vector<std::size_t> origin, const DataConfig &cfg);

Dataset generate_dataset(const DataConfig &cfg, std::uint64_t seed);

struct AugmentConfig {
    double variance_target = 0.95;
    std::optional<std::size_t> fixed_modes;
    KernelCovariance covariance = KernelCovariance::Mahalanobis;
    std::size_t train_count = 160; // augmented training pairs
    std::size_t val_count = 40;    // augmented validation pairs
    double train_fraction = 1.0;   // share of originals feeding KDE and training
    bool scale_with_fraction = true; // augmented counts scale with the fraction

    void validate() const; // ConfigError
};

struct TrainingData {
    PcaSubspace sub;       // fitted on every original
    KdeModel kde;          // fitted on the used originals
    std::vector<std::size_t> used; // indices of originals in training
    std::vector<AugmentedPair> augmented_train;
    std::vector<AugmentedPair> augmented_val;
    IntensityStats stats;  // over used originals and augmented training images
};

TrainingData prepare_training(const GeneratedSet &train, const AugmentConfig &cfg, std::uint64_t seed);

// Number of originals used for a fraction: ceil(f * N), at least 2.
std::size_t used_count(std::size_t total, double fraction);

struct ModelConfig {
    NetConfig net;     // input_dims and output_dim are overwritten from the data
    TrainConfig train; // schedule and dropout are set per model
    std::size_t mc_passes = 30;
    bool baseline = true;
    bool baseline_dropout = false; // the deterministic baseline trains without dropout

    void validate() const; // ConfigError
};

struct TrainedModels {
    NetConfig config;
    TrainResult uncertain;
    std::optional<TrainResult> baseline;
};

NetConfig network_for(const ModelConfig &cfg, const DataConfig &data, const PcaSubspace &sub);

TrainedModels train_models(const GeneratedSet &train, const TrainingData &data, const NetConfig &net,
                           const ModelConfig &cfg, std::uint64_t seed);

struct SetPredictions {
    std::string set;
    std::vector<Eigen::VectorXd> z_mean;    // unwhitened
    std::vector<Eigen::VectorXd> aleatoric; // unwhitened variances
    std::vector<Eigen::VectorXd> epistemic;
};

// MC-dropout predictions (uncertain model) for every sample of a set.
SetPredictions predict_uncertain(const Network &net, const NetParams &params, const PcaSubspace &sub,
                                 const IntensityStats &stats, const GeneratedSet &set, std::size_t passes,
                                 std::uint64_t seed);
// Single deterministic pass; variances are zero.
SetPredictions predict_baseline(const Network &net, const NetParams &params, const PcaSubspace &sub,
                                const IntensityStats &stats, const GeneratedSet &set);

TriMesh training_mean_mesh(const GeneratedSet &train, const Lattice &lattice);

EvalReport evaluate_predictions(const std::string &model, std::span<const SetPredictions> preds,
                                std::span<const GeneratedSet> sets, const PcaSubspace &sub,
                                const TriMesh &mean_mesh, const Lattice &lattice);

struct ExperimentConfig {
    DataConfig data;
    AugmentConfig augment;
    ModelConfig model;
};

struct ExperimentResult {
    TrainingData training;
    TrainedModels models;
    std::vector<SetPredictions> uncertain_predictions;
    EvalReport uncertain;
    std::optional<EvalReport> baseline;
};

// Generate (or reuse `dataset`), augment, train, infer and evaluate.
ExperimentResult run_experiment(const ExperimentConfig &cfg, std::uint64_t seed,
                                const Dataset *dataset = nullptr);

} // namespace probshape
