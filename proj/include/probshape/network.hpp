#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "probshape/error.hpp"
#include "probshape/volume.hpp"

namespace probshape {

struct ConvStage {
    std::size_t channels = 8;
    std::size_t kernel = 3; // odd; padding is (kernel - 1) / 2
    std::size_t stride = 2;
};

struct NetConfig {
    Dims3 input_dims{48, 48, 48};
    std::vector<ConvStage> conv{{8}, {16}, {16}, {32}, {32}};
    std::vector<std::size_t> fc{96, 48};
    double dropout = 0.2;
    std::size_t output_dim = 1;

    // Five conv and two fully connected stages.
    bool full_depth() const { return conv.size() == 5 && fc.size() == 2; }
    void validate() const; // ConfigError

    std::string to_text() const;
    static NetConfig from_text(const std::string &text);
};

// Flat parameter vector plus Adam state, in declaration order.
struct NetParams {
    std::vector<double> values;
    std::vector<double> adam_m;
    std::vector<double> adam_v;
    std::uint64_t step = 0;
};

struct Prediction {
    Eigen::VectorXd z_bar;    // mean scores (whitened during training)
    Eigen::VectorXd log_var;  // log aleatoric variances
};

// Parameter block of one layer, for inspection and tests.
struct LayerBlock {
    std::string name;
    std::size_t weight_offset = 0;
    std::size_t weight_count = 0;
    std::size_t bias_offset = 0;
    std::size_t bias_count = 0;
    std::size_t slope_offset = 0; // PReLU slopes; slope_count == 0 for heads
    std::size_t slope_count = 0;
    std::size_t fan_in = 0;
    std::size_t fan_out = 0;
};

class Network {
public:
    explicit Network(NetConfig config);

    const NetConfig &config() const { return config_; }
    std::size_t parameter_count() const { return parameter_count_; }
    const std::vector<LayerBlock> &layers() const { return layers_; }

    // Xavier-uniform weights, zero biases, PReLU slopes 0.25.
    NetParams init(std::uint64_t seed) const;

    // Dropout (inverted, after every conv and hidden FC layer) is active when
    // `dropout` is true and kappa > 0; masks come from `mask_seed`.
    Prediction forward(const NetParams &params, const Volume3D &image, bool dropout, std::uint64_t mask_seed) const;

    // Forward pass followed by backprop of (d_mean, d_log_var) into `grad`
    // (accumulated, same layout as params.values). `grad_fn` receives the
    // prediction and fills the two output gradients.
    template <typename GradFn>
    Prediction forward_backward(const NetParams &params, const Volume3D &image, bool dropout, std::uint64_t mask_seed,
                                std::vector<double> &grad, GradFn &&grad_fn) const {
        Tape tape;
        Prediction pred = run_forward(params, image, dropout, mask_seed, &tape);
        Eigen::VectorXd d_mean = Eigen::VectorXd::Zero(pred.z_bar.size());
        Eigen::VectorXd d_log_var = Eigen::VectorXd::Zero(pred.log_var.size());
        grad_fn(pred, d_mean, d_log_var);
        run_backward(params, tape, d_mean, d_log_var, grad);
        return pred;
    }

    // Stored activations of one forward pass.
    struct Tape {
        std::vector<Eigen::MatrixXd> cols;  // im2col matrices per conv stage
        std::vector<Eigen::MatrixXd> pre;   // pre-activations per stage (conv then fc)
        std::vector<Eigen::MatrixXd> mask;  // dropout multipliers (empty when off)
        std::vector<Eigen::VectorXd> fc_in; // inputs to each FC layer and to the heads
    };

private:
    struct ConvGeometry {
        Dims3 in{};
        Dims3 out{};
        std::size_t in_channels = 0;
        std::size_t out_channels = 0;
        std::size_t kernel = 3;
        std::size_t stride = 2;
        std::size_t pad = 1;
    };

    Prediction run_forward(const NetParams &params, const Volume3D &image, bool dropout, std::uint64_t mask_seed,
                           Tape *tape) const;
    void run_backward(const NetParams &params, const Tape &tape, const Eigen::VectorXd &d_mean,
                      const Eigen::VectorXd &d_log_var, std::vector<double> &grad) const;

    static void im2col(const Eigen::MatrixXd &in, const ConvGeometry &g, Eigen::MatrixXd &col);
    static void col2im(const Eigen::MatrixXd &col, const ConvGeometry &g, Eigen::MatrixXd &in);

    NetConfig config_;
    std::vector<ConvGeometry> geometry_;
    std::vector<LayerBlock> layers_; // conv..., fc..., head_mean, head_log_var
    std::size_t flat_size_ = 0;
    std::size_t parameter_count_ = 0;
};

// Losses over a batch of I predictions with L modes. Gradients are w.r.t.
// the prediction outputs.
struct LossResult {
    double value = 0.0;
    std::vector<Eigen::VectorXd> d_mean;
    std::vector<Eigen::VectorXd> d_log_var;
};

// (1 / 2LI) sum_i [ sum_l (z - zbar)^2 exp(-a) + sum_l a ]
LossResult bayesian_loss(std::span<const Prediction> preds, std::span<const Eigen::VectorXd> targets);
// (1 / LI) sum_i sum_l (z - zbar)^2; no gradient reaches the variance head.
LossResult l2_loss(std::span<const Prediction> preds, std::span<const Eigen::VectorXd> targets);

enum class LossKind { L2, Bayesian };
enum class LossSchedule {
    L2ThenBayesian, // first epoch L2, Bayesian afterwards
    L2Only,         // deterministic baseline
};

std::string to_string(LossKind kind);

struct TrainConfig {
    double lr = 1e-4;
    std::size_t batch_size = 8;
    std::size_t epochs = 20;
    std::uint64_t seed = 0;
    bool dropout = true;
    LossSchedule schedule = LossSchedule::L2ThenBayesian;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const; // ConfigError
};

struct TrainingSample {
    const Volume3D *image = nullptr; // normalized
    Eigen::VectorXd target;          // whitened scores
};

struct EpochRecord {
    std::size_t epoch = 0; // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    LossKind kind = LossKind::L2;
};

struct TrainResult {
    NetParams params;     // best-validation parameters
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
};

// Thrown when a loss or parameter turns non-finite; carries the parameters
// from the last completed epoch.
class TrainingDiverged : public NumericalError {
public:
    TrainingDiverged(const std::string &what, NetParams last_good)
        : NumericalError(what), last_good_(std::move(last_good)) {}
    const NetParams &last_good() const { return last_good_; }

private:
    NetParams last_good_;
};

LossKind loss_for_epoch(const TrainConfig &cfg, std::size_t epoch);

TrainResult train(const Network &net, NetParams params, std::span<const TrainingSample> train_set,
                  std::span<const TrainingSample> val_set, const TrainConfig &cfg);

// Mean loss over a dataset with dropout off.
double evaluate_loss(const Network &net, const NetParams &params, std::span<const TrainingSample> data,
                     LossKind kind);

// PSNET1 checkpoint: magic, u32 length + config text, u32 parameter count,
// parameters as f32 LE.
void write_checkpoint(const std::filesystem::path &path, const NetConfig &config, const NetParams &params);
std::pair<NetConfig, NetParams> read_checkpoint(const std::filesystem::path &path);

// epoch,train_loss,val_loss,loss_kind
void write_history_csv(const std::filesystem::path &path, std::span<const EpochRecord> history);

} // namespace probshape
