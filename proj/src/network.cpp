#include "probshape/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "probshape/binary_io.hpp"
#include "probshape/rng.hpp"

namespace probshape {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

std::vector<std::string> split(const std::string &s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream ss(s);
    while (std::getline(ss, item, sep)) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::size_t parse_size(const std::string &s, const std::string &key) {
    try {
        std::size_t pos = 0;
        const auto v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return static_cast<std::size_t>(v);
    } catch (const std::exception &) {
        throw ConfigError("network config: bad integer '" + s + "' for '" + key + "'");
    }
}

Eigen::Map<const MatrixXd> cmat(const std::vector<double> &v, std::size_t off, std::size_t rows, std::size_t cols) {
    return {v.data() + off, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

Eigen::Map<MatrixXd> mmat(std::vector<double> &v, std::size_t off, std::size_t rows, std::size_t cols) {
    return {v.data() + off, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

Eigen::Map<const VectorXd> cvec(const std::vector<double> &v, std::size_t off, std::size_t n) {
    return {v.data() + off, static_cast<Eigen::Index>(n)};
}

Eigen::Map<VectorXd> mvec(std::vector<double> &v, std::size_t off, std::size_t n) {
    return {v.data() + off, static_cast<Eigen::Index>(n)};
}

// PReLU with one slope per row.
void prelu_inplace(MatrixXd &x, const Eigen::Map<const VectorXd> &slope) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            double &v = x(r, c);
            if (v <= 0.0) v *= slope[r];
        }
    }
}

MatrixXd make_mask(Eigen::Index rows, Eigen::Index cols, double kappa, Rng &rng) {
    MatrixXd mask(rows, cols);
    const double keep = 1.0 / (1.0 - kappa);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = uniform01(rng) < kappa ? 0.0 : keep;
    return mask;
}

} // namespace

void NetConfig::validate() const {
    for (auto d : input_dims) {
        if (d == 0) throw ConfigError("net.input_dims must be positive");
    }
    if (conv.empty()) throw ConfigError("net.conv needs at least one stage");
    if (fc.empty()) throw ConfigError("net.fc needs at least one layer");
    for (const auto &s : conv) {
        if (s.channels == 0 || s.stride == 0 || s.kernel == 0 || s.kernel % 2 == 0) {
            throw ConfigError("net.conv stages need channels > 0, stride > 0 and an odd kernel");
        }
    }
    for (auto w : fc) {
        if (w == 0) throw ConfigError("net.fc widths must be positive");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("net.dropout must lie in [0, 1)");
    if (output_dim == 0) throw ConfigError("net.output_dim must be positive");
}

std::string NetConfig::to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "input_dims=" << input_dims[0] << ',' << input_dims[1] << ',' << input_dims[2] << '\n';
    os << "conv=";
    for (std::size_t i = 0; i < conv.size(); ++i) {
        os << (i ? "," : "") << conv[i].channels << ':' << conv[i].kernel << ':' << conv[i].stride;
    }
    os << "\nfc=";
    for (std::size_t i = 0; i < fc.size(); ++i) os << (i ? "," : "") << fc[i];
    os << "\ndropout=" << dropout << "\noutput_dim=" << output_dim << '\n';
    return os.str();
}

NetConfig NetConfig::from_text(const std::string &text) {
    NetConfig cfg;
    for (const auto &line : split(text, '\n')) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("network config: malformed line '" + line + "'");
        const auto key = line.substr(0, eq);
        const auto val = line.substr(eq + 1);
        if (key == "input_dims") {
            const auto parts = split(val, ',');
            if (parts.size() != 3) throw ConfigError("network config: input_dims needs 3 values");
            for (int a = 0; a < 3; ++a) cfg.input_dims[a] = parse_size(parts[a], key);
        } else if (key == "conv") {
            cfg.conv.clear();
            for (const auto &stage : split(val, ',')) {
                const auto f = split(stage, ':');
                if (f.size() != 3) throw ConfigError("network config: conv stage '" + stage + "' needs c:k:s");
                cfg.conv.push_back({parse_size(f[0], key), parse_size(f[1], key), parse_size(f[2], key)});
            }
        } else if (key == "fc") {
            cfg.fc.clear();
            for (const auto &w : split(val, ',')) cfg.fc.push_back(parse_size(w, key));
        } else if (key == "dropout") {
            cfg.dropout = std::stod(val);
        } else if (key == "output_dim") {
            cfg.output_dim = parse_size(val, key);
        } else {
            throw ConfigError("network config: unknown key '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

Network::Network(NetConfig config) : config_(std::move(config)) {
    config_.validate();
    std::size_t off = 0;
    Dims3 dims = config_.input_dims;
    std::size_t channels = 1;
    for (std::size_t s = 0; s < config_.conv.size(); ++s) {
        const auto &stage = config_.conv[s];
        ConvGeometry g;
        g.in = dims;
        g.in_channels = channels;
        g.out_channels = stage.channels;
        g.kernel = stage.kernel;
        g.stride = stage.stride;
        g.pad = (stage.kernel - 1) / 2;
        for (int a = 0; a < 3; ++a) {
            const auto padded = dims[a] + 2 * g.pad;
            if (padded < g.kernel) throw ConfigError("net: input too small for conv stage " + std::to_string(s + 1));
            g.out[a] = (padded - g.kernel) / g.stride + 1;
        }
        geometry_.push_back(g);
        const std::size_t k3 = g.kernel * g.kernel * g.kernel;
        LayerBlock b;
        b.name = "conv" + std::to_string(s + 1);
        b.fan_in = channels * k3;
        b.fan_out = stage.channels * k3;
        b.weight_offset = off;
        b.weight_count = stage.channels * channels * k3;
        off += b.weight_count;
        b.bias_offset = off;
        b.bias_count = stage.channels;
        off += b.bias_count;
        b.slope_offset = off;
        b.slope_count = stage.channels;
        off += b.slope_count;
        layers_.push_back(b);
        dims = g.out;
        channels = stage.channels;
    }
    flat_size_ = channels * dims[0] * dims[1] * dims[2];
    std::size_t width = flat_size_;
    for (std::size_t f = 0; f < config_.fc.size(); ++f) {
        LayerBlock b;
        b.name = "fc" + std::to_string(f + 1);
        b.fan_in = width;
        b.fan_out = config_.fc[f];
        b.weight_offset = off;
        b.weight_count = b.fan_in * b.fan_out;
        off += b.weight_count;
        b.bias_offset = off;
        b.bias_count = b.fan_out;
        off += b.bias_count;
        b.slope_offset = off;
        b.slope_count = b.fan_out;
        off += b.slope_count;
        layers_.push_back(b);
        width = b.fan_out;
    }
    for (const char *name : {"head_mean", "head_log_var"}) {
        LayerBlock b;
        b.name = name;
        b.fan_in = width;
        b.fan_out = config_.output_dim;
        b.weight_offset = off;
        b.weight_count = width * config_.output_dim;
        off += b.weight_count;
        b.bias_offset = off;
        b.bias_count = config_.output_dim;
        off += b.bias_count;
        layers_.push_back(b);
    }
    parameter_count_ = off;
}

NetParams Network::init(std::uint64_t seed) const {
    NetParams p;
    p.values.assign(parameter_count_, 0.0);
    p.adam_m.assign(parameter_count_, 0.0);
    p.adam_v.assign(parameter_count_, 0.0);
    Rng rng(seed);
    for (const auto &b : layers_) {
        const double bound = std::sqrt(6.0 / static_cast<double>(b.fan_in + b.fan_out));
        for (std::size_t i = 0; i < b.weight_count; ++i) {
            p.values[b.weight_offset + i] = bound * (2.0 * uniform01(rng) - 1.0);
        }
        for (std::size_t i = 0; i < b.slope_count; ++i) p.values[b.slope_offset + i] = 0.25;
    }
    return p;
}

void Network::im2col(const MatrixXd &in, const ConvGeometry &g, MatrixXd &col) {
    const std::size_t k = g.kernel;
    const std::size_t cin = g.in_channels;
    const auto rows = static_cast<Eigen::Index>(cin * k * k * k);
    const auto pout = static_cast<Eigen::Index>(g.out[0] * g.out[1] * g.out[2]);
    col.setZero(rows, pout);
    const double *src = in.data();
    double *dst = col.data();
    std::size_t po = 0;
    for (std::size_t oz = 0; oz < g.out[2]; ++oz) {
        for (std::size_t oy = 0; oy < g.out[1]; ++oy) {
            for (std::size_t ox = 0; ox < g.out[0]; ++ox, ++po) {
                double *colp = dst + po * static_cast<std::size_t>(rows);
                for (std::size_t kz = 0; kz < k; ++kz) {
                    const auto iz = static_cast<std::ptrdiff_t>(oz * g.stride + kz) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.in[2])) continue;
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in[1])) continue;
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in[0])) continue;
                            const std::size_t kk = kx + k * (ky + k * kz);
                            const std::size_t pi = static_cast<std::size_t>(ix) +
                                                   g.in[0] * (static_cast<std::size_t>(iy) + g.in[1] * static_cast<std::size_t>(iz));
                            std::memcpy(colp + kk * cin, src + pi * cin, cin * sizeof(double));
                        }
                    }
                }
            }
        }
    }
}

void Network::col2im(const MatrixXd &col, const ConvGeometry &g, MatrixXd &in) {
    const std::size_t k = g.kernel;
    const std::size_t cin = g.in_channels;
    const auto rows = static_cast<std::size_t>(col.rows());
    in.setZero(static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(g.in[0] * g.in[1] * g.in[2]));
    double *dst = in.data();
    const double *src = col.data();
    std::size_t po = 0;
    for (std::size_t oz = 0; oz < g.out[2]; ++oz) {
        for (std::size_t oy = 0; oy < g.out[1]; ++oy) {
            for (std::size_t ox = 0; ox < g.out[0]; ++ox, ++po) {
                const double *colp = src + po * rows;
                for (std::size_t kz = 0; kz < k; ++kz) {
                    const auto iz = static_cast<std::ptrdiff_t>(oz * g.stride + kz) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.in[2])) continue;
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in[1])) continue;
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in[0])) continue;
                            const std::size_t kk = kx + k * (ky + k * kz);
                            const std::size_t pi = static_cast<std::size_t>(ix) +
                                                   g.in[0] * (static_cast<std::size_t>(iy) + g.in[1] * static_cast<std::size_t>(iz));
                            double *d = dst + pi * cin;
                            const double *s = colp + kk * cin;
                            for (std::size_t c = 0; c < cin; ++c) d[c] += s[c];
                        }
                    }
                }
            }
        }
    }
}

Prediction Network::forward(const NetParams &params, const Volume3D &image, bool dropout,
                            std::uint64_t mask_seed) const {
    return run_forward(params, image, dropout, mask_seed, nullptr);
}

Prediction Network::run_forward(const NetParams &params, const Volume3D &image, bool dropout,
                                std::uint64_t mask_seed, Tape *tape) const {
    if (image.dims != config_.input_dims) {
        throw DataError("network input dims " + std::to_string(image.dims[0]) + "x" + std::to_string(image.dims[1]) +
                        "x" + std::to_string(image.dims[2]) + " do not match the configured input");
    }
    if (params.values.size() != parameter_count_) throw DataError("network parameter count mismatch");
    const bool use_dropout = dropout && config_.dropout > 0.0;
    Rng rng(mask_seed);
    const auto &w = params.values;

    MatrixXd act(1, static_cast<Eigen::Index>(image.size()));
    for (std::size_t i = 0; i < image.size(); ++i) act(0, static_cast<Eigen::Index>(i)) = image.data[i];

    MatrixXd col;
    for (std::size_t s = 0; s < geometry_.size(); ++s) {
        const auto &g = geometry_[s];
        const auto &b = layers_[s];
        im2col(act, g, col);
        MatrixXd pre = cmat(w, b.weight_offset, g.out_channels, b.weight_count / g.out_channels) * col;
        pre.colwise() += cvec(w, b.bias_offset, b.bias_count);
        act = pre;
        prelu_inplace(act, cvec(w, b.slope_offset, b.slope_count));
        MatrixXd mask;
        if (use_dropout) {
            mask = make_mask(act.rows(), act.cols(), config_.dropout, rng);
            act.array() *= mask.array();
        }
        if (tape) {
            tape->cols.push_back(std::move(col));
            tape->pre.push_back(std::move(pre));
            tape->mask.push_back(std::move(mask));
        }
    }

    VectorXd h = Eigen::Map<const VectorXd>(act.data(), act.size());
    const std::size_t nconv = geometry_.size();
    for (std::size_t f = 0; f < config_.fc.size(); ++f) {
        const auto &b = layers_[nconv + f];
        if (tape) tape->fc_in.push_back(h);
        MatrixXd pre = cmat(w, b.weight_offset, b.fan_out, b.fan_in) * h + cvec(w, b.bias_offset, b.bias_count);
        MatrixXd a = pre;
        prelu_inplace(a, cvec(w, b.slope_offset, b.slope_count));
        MatrixXd mask;
        if (use_dropout) {
            mask = make_mask(a.rows(), 1, config_.dropout, rng);
            a.array() *= mask.array();
        }
        h = a.col(0);
        if (tape) {
            tape->pre.push_back(std::move(pre));
            tape->mask.push_back(std::move(mask));
        }
    }
    if (tape) tape->fc_in.push_back(h);

    const auto &hm = layers_[layers_.size() - 2];
    const auto &ha = layers_[layers_.size() - 1];
    Prediction pred;
    pred.z_bar = cmat(w, hm.weight_offset, hm.fan_out, hm.fan_in) * h + cvec(w, hm.bias_offset, hm.bias_count);
    pred.log_var = cmat(w, ha.weight_offset, ha.fan_out, ha.fan_in) * h + cvec(w, ha.bias_offset, ha.bias_count);
    return pred;
}

void Network::run_backward(const NetParams &params, const Tape &tape, const VectorXd &d_mean,
                           const VectorXd &d_log_var, std::vector<double> &grad) const {
    if (grad.size() != parameter_count_) grad.assign(parameter_count_, 0.0);
    const auto &w = params.values;
    const std::size_t nconv = geometry_.size();
    const std::size_t nfc = config_.fc.size();

    const VectorXd &h = tape.fc_in.back();
    const auto &hm = layers_[layers_.size() - 2];
    const auto &ha = layers_[layers_.size() - 1];
    mmat(grad, hm.weight_offset, hm.fan_out, hm.fan_in).noalias() += d_mean * h.transpose();
    mvec(grad, hm.bias_offset, hm.bias_count) += d_mean;
    mmat(grad, ha.weight_offset, ha.fan_out, ha.fan_in).noalias() += d_log_var * h.transpose();
    mvec(grad, ha.bias_offset, ha.bias_count) += d_log_var;
    VectorXd dh = cmat(w, hm.weight_offset, hm.fan_out, hm.fan_in).transpose() * d_mean +
                  cmat(w, ha.weight_offset, ha.fan_out, ha.fan_in).transpose() * d_log_var;

    for (std::size_t f = nfc; f-- > 0;) {
        const auto &b = layers_[nconv + f];
        const MatrixXd &pre = tape.pre[nconv + f];
        const MatrixXd &mask = tape.mask[nconv + f];
        VectorXd da = dh;
        if (mask.size()) da.array() *= mask.col(0).array();
        const auto slope = cvec(w, b.slope_offset, b.slope_count);
        auto dslope = mvec(grad, b.slope_offset, b.slope_count);
        VectorXd dpre(da.size());
        for (Eigen::Index i = 0; i < da.size(); ++i) {
            const double p = pre(i, 0);
            if (p > 0.0) {
                dpre[i] = da[i];
            } else {
                dpre[i] = slope[i] * da[i];
                dslope[i] += p * da[i];
            }
        }
        const VectorXd &in = tape.fc_in[f];
        mmat(grad, b.weight_offset, b.fan_out, b.fan_in).noalias() += dpre * in.transpose();
        mvec(grad, b.bias_offset, b.bias_count) += dpre;
        dh = cmat(w, b.weight_offset, b.fan_out, b.fan_in).transpose() * dpre;
    }

    const auto &glast = geometry_.back();
    MatrixXd dact = Eigen::Map<const MatrixXd>(dh.data(), static_cast<Eigen::Index>(glast.out_channels),
                                               static_cast<Eigen::Index>(glast.out[0] * glast.out[1] * glast.out[2]));
    for (std::size_t s = nconv; s-- > 0;) {
        const auto &g = geometry_[s];
        const auto &b = layers_[s];
        const MatrixXd &pre = tape.pre[s];
        const MatrixXd &mask = tape.mask[s];
        if (mask.size()) dact.array() *= mask.array();
        const auto slope = cvec(w, b.slope_offset, b.slope_count);
        auto dslope = mvec(grad, b.slope_offset, b.slope_count);
        MatrixXd &dpre = dact;
        for (Eigen::Index c = 0; c < dpre.cols(); ++c) {
            for (Eigen::Index r = 0; r < dpre.rows(); ++r) {
                const double p = pre(r, c);
                if (p <= 0.0) {
                    dslope[r] += p * dpre(r, c);
                    dpre(r, c) *= slope[r];
                }
            }
        }
        const std::size_t cols_w = b.weight_count / g.out_channels;
        mmat(grad, b.weight_offset, g.out_channels, cols_w).noalias() += dpre * tape.cols[s].transpose();
        mvec(grad, b.bias_offset, b.bias_count) += dpre.rowwise().sum();
        if (s > 0) {
            const MatrixXd dcol = cmat(w, b.weight_offset, g.out_channels, cols_w).transpose() * dpre;
            MatrixXd dprev;
            col2im(dcol, g, dprev);
            dact = std::move(dprev);
        }
    }
}

namespace {

void check_batch(std::span<const Prediction> preds, std::span<const VectorXd> targets) {
    if (preds.size() != targets.size() || preds.empty()) throw DataError("loss: batch sizes differ or are empty");
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i].z_bar.size() != targets[i].size() || preds[i].log_var.size() != targets[i].size()) {
            throw DataError("loss: prediction and target lengths differ");
        }
    }
}

} // namespace

LossResult bayesian_loss(std::span<const Prediction> preds, std::span<const VectorXd> targets) {
    check_batch(preds, targets);
    const double l = static_cast<double>(targets.front().size());
    const double batch = static_cast<double>(preds.size());
    LossResult out;
    double acc = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const VectorXd r = targets[i] - preds[i].z_bar;
        const VectorXd inv_var = (-preds[i].log_var.array()).exp().matrix();
        const VectorXd r2w = r.array().square() * inv_var.array();
        acc += r2w.sum() + preds[i].log_var.sum();
        out.d_mean.push_back(-(r.array() * inv_var.array()).matrix() / (l * batch));
        out.d_log_var.push_back((1.0 - r2w.array()).matrix() / (2.0 * l * batch));
    }
    out.value = acc / (2.0 * l * batch);
    return out;
}

LossResult l2_loss(std::span<const Prediction> preds, std::span<const VectorXd> targets) {
    check_batch(preds, targets);
    const double l = static_cast<double>(targets.front().size());
    const double batch = static_cast<double>(preds.size());
    LossResult out;
    double acc = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const VectorXd r = targets[i] - preds[i].z_bar;
        acc += r.squaredNorm();
        out.d_mean.push_back(-2.0 * r / (l * batch));
        out.d_log_var.push_back(VectorXd::Zero(r.size()));
    }
    out.value = acc / (l * batch);
    return out;
}

std::string to_string(LossKind kind) { return kind == LossKind::L2 ? "l2" : "bayesian"; }

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (epochs < 2) throw ConfigError("train.epochs must be >= 2");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: Adam betas must lie in [0, 1)");
}

LossKind loss_for_epoch(const TrainConfig &cfg, std::size_t epoch) {
    if (cfg.schedule == LossSchedule::L2Only) return LossKind::L2;
    return epoch <= 1 ? LossKind::L2 : LossKind::Bayesian;
}

namespace {

LossResult loss_of(LossKind kind, std::span<const Prediction> preds, std::span<const VectorXd> targets) {
    return kind == LossKind::L2 ? l2_loss(preds, targets) : bayesian_loss(preds, targets);
}

bool all_finite(const std::vector<double> &v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

} // namespace

double evaluate_loss(const Network &net, const NetParams &params, std::span<const TrainingSample> data, LossKind kind) {
    if (data.empty()) throw DataError("evaluate_loss: empty dataset");
    std::vector<Prediction> preds;
    std::vector<VectorXd> targets;
    preds.reserve(data.size());
    for (const auto &s : data) {
        preds.push_back(net.forward(params, *s.image, false, 0));
        targets.push_back(s.target);
    }
    return loss_of(kind, preds, targets).value;
}

TrainResult train(const Network &net, NetParams params, std::span<const TrainingSample> train_set,
                  std::span<const TrainingSample> val_set, const TrainConfig &cfg) {
    cfg.validate();
    if (train_set.empty() || val_set.empty()) throw DataError("train: training and validation sets must be nonempty");
    const std::size_t np = net.parameter_count();
    if (params.values.size() != np) throw DataError("train: parameter count mismatch");
    if (params.adam_m.size() != np) params.adam_m.assign(np, 0.0);
    if (params.adam_v.size() != np) params.adam_v.assign(np, 0.0);

    const LossKind final_kind = loss_for_epoch(cfg, cfg.epochs);
    const std::uint64_t mask_root = derive_seed(cfg.seed, "dropout");
    TrainResult result;
    double best_val = std::numeric_limits<double>::infinity();
    NetParams last_good = params;
    std::vector<double> grad(np);
    std::vector<std::size_t> order(train_set.size());

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const LossKind kind = loss_for_epoch(cfg, epoch);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(derive_seed(derive_seed(cfg.seed, "shuffle"), epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const double batch = static_cast<double>(end - start);
            std::fill(grad.begin(), grad.end(), 0.0);
            for (std::size_t pos = start; pos < end; ++pos) {
                const auto &sample = train_set[order[pos]];
                const auto mask_seed = derive_seed(mask_root, (epoch - 1) * order.size() + pos);
                net.forward_backward(params, *sample.image, cfg.dropout, mask_seed, grad,
                                     [&](const Prediction &pred, VectorXd &d_mean, VectorXd &d_log_var) {
                                         const auto loss = loss_of(kind, std::span(&pred, 1), std::span(&sample.target, 1));
                                         loss_sum += loss.value;
                                         d_mean = loss.d_mean.front() / batch;
                                         d_log_var = loss.d_log_var.front() / batch;
                                     });
            }
            if (!std::isfinite(loss_sum) || !all_finite(grad)) {
                throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + " (non-finite loss or gradient)",
                                       last_good);
            }
            ++params.step;
            const double t = static_cast<double>(params.step);
            const double c1 = 1.0 - std::pow(cfg.beta1, t);
            const double c2 = 1.0 - std::pow(cfg.beta2, t);
            for (std::size_t i = 0; i < np; ++i) {
                const double g = grad[i];
                params.adam_m[i] = cfg.beta1 * params.adam_m[i] + (1.0 - cfg.beta1) * g;
                params.adam_v[i] = cfg.beta2 * params.adam_v[i] + (1.0 - cfg.beta2) * g * g;
                params.values[i] -= cfg.lr * (params.adam_m[i] / c1) / (std::sqrt(params.adam_v[i] / c2) + cfg.epsilon);
            }
            if (!all_finite(params.values)) {
                throw TrainingDiverged("non-finite parameter after update at epoch " + std::to_string(epoch), last_good);
            }
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.kind = kind;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        rec.val_loss = evaluate_loss(net, params, val_set, kind);
        if (!std::isfinite(rec.val_loss)) {
            throw TrainingDiverged("validation loss is non-finite at epoch " + std::to_string(epoch), last_good);
        }
        result.history.push_back(rec);
        if (kind == final_kind && rec.val_loss < best_val) {
            best_val = rec.val_loss;
            result.params = params;
            result.best_epoch = epoch;
        }
        last_good = params;
    }
    return result;
}

void write_checkpoint(const std::filesystem::path &path, const NetConfig &config, const NetParams &params) {
    auto os = io::open_output(path);
    io::write_magic(os, "PSNET1");
    const auto text = config.to_text();
    io::write_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    io::write_u32(os, static_cast<std::uint32_t>(params.values.size()));
    for (double v : params.values) io::write_f32(os, static_cast<float>(v));
    if (!os) throw DataError("failed writing checkpoint '" + path.string() + "'");
}

std::pair<NetConfig, NetParams> read_checkpoint(const std::filesystem::path &path) {
    auto is = io::open_input(path);
    const std::string what = "checkpoint '" + path.string() + "'";
    io::expect_magic(is, "PSNET1", what);
    const auto len = io::read_u32(is, what);
    std::string text(len, '\0');
    if (!is.read(text.data(), len)) throw DataError(what + ": truncated config block");
    NetConfig cfg = NetConfig::from_text(text);
    const auto count = io::read_u32(is, what);
    const Network net(cfg);
    if (count != net.parameter_count()) {
        throw DataError(what + ": parameter count " + std::to_string(count) + " does not match its config (" +
                        std::to_string(net.parameter_count()) + ")");
    }
    NetParams params;
    params.values.resize(count);
    for (auto &v : params.values) v = io::read_f32(is, what);
    params.adam_m.assign(count, 0.0);
    params.adam_v.assign(count, 0.0);
    return {cfg, params};
}

void write_history_csv(const std::filesystem::path &path, std::span<const EpochRecord> history) {
    auto os = io::open_output(path);
    os << "epoch,train_loss,val_loss,loss_kind\n";
    os.precision(10);
    for (const auto &r : history) os << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << to_string(r.kind) << '\n';
}

} // namespace probshape
