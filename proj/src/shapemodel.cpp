#include "probshape/shapemodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "probshape/binary_io.hpp"
#include "probshape/error.hpp"

namespace probshape {

namespace {

void check_length(const PcaSubspace &sub, Eigen::Index n, const char *what) {
    if (static_cast<std::size_t>(n) != sub.dimension()) {
        throw DataError(std::string(what) + ": length " + std::to_string(n) + " does not match subspace dimension " +
                        std::to_string(sub.dimension()));
    }
}

void check_scores(const PcaSubspace &sub, const ScoreVector &z, const char *what) {
    if (static_cast<std::size_t>(z.z.size()) != sub.modes()) {
        throw DataError(std::string(what) + ": score length " + std::to_string(z.z.size()) +
                        " does not match mode count " + std::to_string(sub.modes()));
    }
}

} // namespace

PcaSubspace fit_pca(const Eigen::MatrixXd &samples, const PcaOptions &options) {
    const auto n = samples.cols();
    const auto d = samples.rows();
    if (n < 2) throw DataError("PCA needs at least 2 samples");
    if (d < 1) throw DataError("PCA samples are empty");

    PcaSubspace sub;
    sub.mean = samples.rowwise().mean();
    const Eigen::MatrixXd centered = samples.colwise() - sub.mean;
    const double denom = static_cast<double>(n - 1);

    Eigen::VectorXd evals;
    Eigen::MatrixXd evecs;
    const bool gram = n < d;
    if (gram) {
        const Eigen::MatrixXd g = (centered.transpose() * centered) / denom;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g);
        if (es.info() != Eigen::Success) throw NumericalError("PCA eigendecomposition failed");
        evals = es.eigenvalues();
        evecs = es.eigenvectors();
    } else {
        const Eigen::MatrixXd c = (centered * centered.transpose()) / denom;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
        if (es.info() != Eigen::Success) throw NumericalError("PCA eigendecomposition failed");
        evals = es.eigenvalues();
        evecs = es.eigenvectors();
    }

    const double total = centered.squaredNorm() / denom;
    const double max_eval = evals.size() ? evals.maxCoeff() : 0.0;
    const double tol = std::max(max_eval, 0.0) * 1e-10 * static_cast<double>(std::max(n, d));

    std::vector<Eigen::Index> order(static_cast<std::size_t>(evals.size()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return evals[a] > evals[b]; });
    std::size_t rank = 0;
    while (rank < order.size() && evals[order[rank]] > tol && max_eval > 0.0) ++rank;

    if (rank == 0) {
        if (!options.allow_empty) throw DataError("PCA input has rank 0 (all samples identical)");
        sub.basis.resize(d, 0);
        sub.eigenvalues.resize(0);
        sub.variance_retained = 1.0;
        return sub;
    }

    std::size_t modes = 0;
    if (options.fixed_modes) {
        modes = *options.fixed_modes;
        if (modes > rank) {
            throw DataError("PCA: requested " + std::to_string(modes) + " modes but data rank is " +
                            std::to_string(rank));
        }
    } else {
        if (!(options.variance_target > 0.0 && options.variance_target <= 1.0)) {
            throw ConfigError("pca.variance_target must be in (0, 1]");
        }
        double acc = 0.0;
        while (modes < rank) {
            acc += evals[order[modes]];
            ++modes;
            if (acc >= options.variance_target * total * (1.0 - 1e-12)) break;
        }
    }

    sub.basis.resize(d, static_cast<Eigen::Index>(modes));
    sub.eigenvalues.resize(static_cast<Eigen::Index>(modes));
    double kept = 0.0;
    for (std::size_t l = 0; l < modes; ++l) {
        const auto src = order[l];
        const double lambda = evals[src];
        Eigen::VectorXd u;
        if (gram) {
            u = centered * evecs.col(src);
            u /= u.norm();
        } else {
            u = evecs.col(src);
        }
        Eigen::Index imax = 0;
        u.cwiseAbs().maxCoeff(&imax);
        if (u[imax] < 0.0) u = -u;
        sub.basis.col(static_cast<Eigen::Index>(l)) = u;
        sub.eigenvalues[static_cast<Eigen::Index>(l)] = lambda;
        kept += lambda;
    }
    sub.variance_retained = total > 0.0 ? kept / total : 1.0;
    return sub;
}

PcaSubspace fit_pca(std::span<const ShapeSample> shapes, const PcaOptions &options) {
    if (shapes.size() < 2) throw DataError("PCA needs at least 2 shapes");
    const auto len = shapes.front().x.size();
    Eigen::MatrixXd data(len, static_cast<Eigen::Index>(shapes.size()));
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (shapes[i].x.size() != len) throw DataError("PCA shapes have inconsistent point counts");
        data.col(static_cast<Eigen::Index>(i)) = shapes[i].x;
    }
    return fit_pca(data, options);
}

ScoreVector encode(const PcaSubspace &sub, const Eigen::VectorXd &x) {
    check_length(sub, x.size(), "encode");
    return {sub.basis.transpose() * (x - sub.mean), false};
}

ScoreVector encode(const PcaSubspace &sub, const ShapeSample &x) { return encode(sub, x.x); }

ShapeSample decode(const PcaSubspace &sub, const ScoreVector &z) {
    check_scores(sub, z, "decode");
    const ScoreVector raw = z.whitened ? unwhiten(sub, z) : z;
    return {sub.basis * raw.z + sub.mean};
}

ScoreVector whiten(const PcaSubspace &sub, const ScoreVector &z) {
    check_scores(sub, z, "whiten");
    if (z.whitened) throw DataError("whiten: scores are already whitened");
    return {z.z.cwiseQuotient(sub.eigenvalues.cwiseSqrt()), true};
}

ScoreVector unwhiten(const PcaSubspace &sub, const ScoreVector &z) {
    check_scores(sub, z, "unwhiten");
    if (!z.whitened) throw DataError("unwhiten: scores are not whitened");
    return {z.z.cwiseProduct(sub.eigenvalues.cwiseSqrt()), false};
}

Eigen::VectorXd unwhiten_variance(const PcaSubspace &sub, const Eigen::VectorXd &var) {
    if (static_cast<std::size_t>(var.size()) != sub.modes()) throw DataError("unwhiten_variance: length mismatch");
    return var.cwiseProduct(sub.eigenvalues);
}

double mahalanobis_sq(const PcaSubspace &sub, const ScoreVector &a, const ScoreVector &b) {
    check_scores(sub, a, "mahalanobis");
    check_scores(sub, b, "mahalanobis");
    if (a.whitened || b.whitened) throw DataError("mahalanobis: scores must be unwhitened");
    return (a.z - b.z).array().square().cwiseQuotient(sub.eigenvalues.array()).sum();
}

void write_pca(const std::filesystem::path &path, const PcaSubspace &sub) {
    auto os = io::open_output(path);
    io::write_magic(os, "PSPCA1");
    io::write_u32(os, static_cast<std::uint32_t>(sub.point_count()));
    io::write_u32(os, static_cast<std::uint32_t>(sub.modes()));
    for (Eigen::Index i = 0; i < sub.mean.size(); ++i) io::write_f64(os, sub.mean[i]);
    for (Eigen::Index i = 0; i < sub.eigenvalues.size(); ++i) io::write_f64(os, sub.eigenvalues[i]);
    for (Eigen::Index c = 0; c < sub.basis.cols(); ++c) {
        for (Eigen::Index r = 0; r < sub.basis.rows(); ++r) io::write_f64(os, sub.basis(r, c));
    }
    if (!os) throw DataError("failed writing subspace '" + path.string() + "'");
}

PcaSubspace read_pca(const std::filesystem::path &path) {
    auto is = io::open_input(path);
    const std::string what = "subspace '" + path.string() + "'";
    io::expect_magic(is, "PSPCA1", what);
    const auto m = static_cast<Eigen::Index>(io::read_u32(is, what));
    const auto l = static_cast<Eigen::Index>(io::read_u32(is, what));
    PcaSubspace sub;
    sub.mean.resize(3 * m);
    sub.eigenvalues.resize(l);
    sub.basis.resize(3 * m, l);
    for (Eigen::Index i = 0; i < sub.mean.size(); ++i) sub.mean[i] = io::read_f64(is, what);
    for (Eigen::Index i = 0; i < l; ++i) sub.eigenvalues[i] = io::read_f64(is, what);
    for (Eigen::Index c = 0; c < l; ++c) {
        for (Eigen::Index r = 0; r < 3 * m; ++r) sub.basis(r, c) = io::read_f64(is, what);
    }
    return sub;
}

} // namespace probshape
