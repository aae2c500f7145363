#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "probshape/augment.hpp"
#include "probshape/error.hpp"
#include "test_support.hpp"

using namespace probshape;
using Eigen::Matrix3Xd;
using Eigen::MatrixXd;
using Eigen::Vector3d;
using Eigen::VectorXd;

namespace {

PcaSubspace diagonal_subspace(const VectorXd &delta) {
    PcaSubspace sub;
    const auto l = delta.size();
    sub.mean = VectorXd::Zero(3 * l);
    sub.basis = MatrixXd::Identity(3 * l, l);
    sub.eigenvalues = delta;
    return sub;
}

std::vector<ScoreVector> random_scores(std::size_t n, Eigen::Index l, std::uint64_t seed) {
    test::Lcg rng(seed);
    std::vector<ScoreVector> out(n);
    for (auto &s : out) {
        s.z = VectorXd(l);
        for (Eigen::Index i = 0; i < l; ++i) s.z[i] = rng.normal() * (i + 1);
    }
    return out;
}

// Exhaustive O(N^2) nearest-neighbour scan written against the raw formula.
double brute_bandwidth(const VectorXd &delta, const std::vector<ScoreVector> &z) {
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < z.size(); ++k) {
            if (k == i) continue;
            double d = 0.0;
            for (Eigen::Index l = 0; l < delta.size(); ++l) d += (z[i].z[l] - z[k].z[l]) * (z[i].z[l] - z[k].z[l]) / delta[l];
            best = std::min(best, d);
        }
        sum += best;
    }
    return sum / double(z.size());
}

Matrix3Xd random_points(Eigen::Index m, std::uint64_t seed) {
    test::Lcg rng(seed);
    Matrix3Xd p(3, m);
    for (Eigen::Index i = 0; i < m; ++i) p.col(i) = Vector3d(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    return p;
}

double bbox_diag(const Matrix3Xd &p) { return (p.rowwise().maxCoeff() - p.rowwise().minCoeff()).norm(); }

} // namespace

TEST_CASE("KDE bandwidth equals the exhaustive nearest-neighbour oracle") {
    const VectorXd delta = (VectorXd(3) << 4.0, 1.5, 0.25).finished();
    const PcaSubspace sub = diagonal_subspace(delta);
    for (std::size_t n : {2u, 5u, 17u, 50u}) {
        const auto z = random_scores(n, 3, n);
        CHECK(kde_bandwidth(sub, z) == brute_bandwidth(delta, z));
    }
}

TEST_CASE("KDE bandwidth special cases") {
    const VectorXd delta = (VectorXd(2) << 2.0, 0.5).finished();
    const PcaSubspace sub = diagonal_subspace(delta);
    std::vector<ScoreVector> two{{VectorXd::Zero(2), false}, {(VectorXd(2) << 3.0, 0.0).finished(), false}};
    CHECK(kde_bandwidth(sub, two) == doctest::Approx(9.0 / 2.0));

    // Scaling eigenvalues by c and scores by sqrt(c) leaves the bandwidth unchanged.
    auto z = random_scores(9, 2, 3);
    const double before = kde_bandwidth(sub, z);
    for (auto &s : z) s.z *= std::sqrt(7.0);
    CHECK(kde_bandwidth(diagonal_subspace(7.0 * delta), z) == doctest::Approx(before).epsilon(1e-12));

    CHECK_THROWS_AS(kde_bandwidth(sub, std::span<const ScoreVector>(two.data(), 1)), DataError);
    two[1] = two[0];
    CHECK_THROWS_AS(kde_bandwidth(sub, two), DataError);
}

TEST_CASE("KDE sampling") {
    const VectorXd delta = (VectorXd(2) << 3.0, 0.5).finished();
    const PcaSubspace sub = diagonal_subspace(delta);
    const auto centers = random_scores(3, 2, 11);
    KdeModel kde = make_kde(sub, centers);

    SUBCASE("deterministic per seed") {
        const auto a = sample_kde(kde, 50, 4), b = sample_kde(kde, 50, 4);
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].kernel == b[i].kernel);
            CHECK(a[i].z.z == b[i].z.z);
        }
    }
    SUBCASE("uniform kernel selection") {
        const auto d = sample_kde(kde, 10000, 5);
        std::vector<double> freq(3, 0.0);
        for (const auto &x : d) freq[x.kernel] += 1.0;
        const double sd = std::sqrt(10000 * (1.0 / 3) * (2.0 / 3));
        for (double f : freq) CHECK(std::abs(f - 10000.0 / 3) < 3 * sd);
    }
    SUBCASE("collapsing kernels reproduce the centres") {
        kde.sigma2 = 1e-12;
        for (const auto &x : sample_kde(kde, 100, 6))
            CHECK(mahalanobis_sq(sub, x.z, centers[x.kernel]) < 1e-8);
    }
    SUBCASE("kernel covariance is sigma^2 Delta") {
        const auto d = sample_kde(kde, 20000, 7);
        for (Eigen::Index l = 0; l < 2; ++l) {
            double s = 0.0;
            for (const auto &x : d) s += std::pow(x.z.z[l] - centers[x.kernel].z[l], 2);
            CHECK(s / d.size() == doctest::Approx(kde.sigma2 * delta[l]).epsilon(0.05));
        }
        CHECK_FALSE(d.front().z.whitened);
    }
    SUBCASE("isotropic kernel option") {
        KdeModel iso = make_kde(sub, centers, KernelCovariance::Isotropic);
        const auto d = sample_kde(iso, 20000, 8);
        double s = 0.0;
        for (const auto &x : d) s += std::pow(x.z.z[1] - centers[x.kernel].z[1], 2);
        CHECK(s / d.size() == doctest::Approx(iso.sigma2).epsilon(0.05));
    }
}

TEST_CASE("KDE density is the Gaussian mixture and peaks at the kernels") {
    const VectorXd delta = (VectorXd(2) << 2.0, 0.5).finished();
    const PcaSubspace sub = diagonal_subspace(delta);
    const auto centers = random_scores(4, 2, 12);
    const KdeModel kde = make_kde(sub, centers);
    const VectorXd q = (VectorXd(2) << 0.3, -0.2).finished();
    double ref = 0.0;
    for (const auto &c : centers) {
        double e = 0.0, norm = 1.0;
        for (Eigen::Index l = 0; l < 2; ++l) {
            const double var = kde.sigma2 * delta[l];
            e += std::pow(q[l] - c.z[l], 2) / var;
            norm *= 2 * std::numbers::pi * var;
        }
        ref += std::exp(-0.5 * e) / std::sqrt(norm);
    }
    CHECK(kde_density(kde, q) == doctest::Approx(ref / 4).epsilon(1e-12));

    VectorXd far = centers[0].z;
    far[0] += 1e3;
    for (const auto &c : centers) CHECK(kde_density(kde, c.z) >= kde_density(kde, far));
}

TEST_CASE("augmented draws rarely leave the six-sigma neighbourhood") {
    const VectorXd delta = (VectorXd(4) << 5.0, 2.0, 1.0, 0.3).finished();
    const PcaSubspace sub = diagonal_subspace(delta);
    const auto centers = random_scores(20, 4, 13);
    const KdeModel kde = make_kde(sub, centers);
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        std::size_t far = 0;
        const auto d = sample_kde(kde, 2000, seed);
        for (const auto &x : d) {
            double best = 1e300;
            for (const auto &c : centers) best = std::min(best, mahalanobis_sq(sub, x.z, c));
            if (best > 36.0 * kde.sigma2) ++far;
        }
        CHECK(far <= d.size() / 100);
    }
}

TEST_CASE("TPS interpolates the control points at lambda 0") {
    const Matrix3Xd src = random_points(20, 1);
    Matrix3Xd dst = src;
    test::Lcg rng(2);
    for (Eigen::Index i = 0; i < dst.cols(); ++i) dst.col(i) += 0.1 * Vector3d(rng.normal(), rng.normal(), rng.normal());
    const TpsWarp w = TpsWarp::fit(src, dst, 0.0);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < src.cols(); ++i) worst = std::max(worst, (w(src.col(i)) - dst.col(i)).norm());
    CHECK(worst < 1e-6 * bbox_diag(src));
    // Side conditions: the kernel weights are orthogonal to the affine basis.
    CHECK(w.weights().rowwise().sum().cwiseAbs().maxCoeff() < 1e-6);
    CHECK((w.weights() * src.transpose()).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("TPS reproduces affine maps") {
    const Matrix3Xd src = random_points(25, 3);
    SUBCASE("identity") {
        const TpsWarp w = TpsWarp::fit(src, src, 0.0);
        CHECK(w.weights().cwiseAbs().maxCoeff() < 1e-8);
        CHECK((w.affine().rightCols<3>() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-8);
        CHECK(w.affine().col(0).cwiseAbs().maxCoeff() < 1e-8);
    }
    SUBCASE("general affine") {
        Eigen::Matrix3d a;
        a << 1.2, 0.1, -0.3, 0.0, 0.9, 0.2, 0.4, -0.1, 1.1;
        const Vector3d t(0.5, -2.0, 0.25);
        const Matrix3Xd dst = (a * src).colwise() + t;
        const TpsWarp w = TpsWarp::fit(src, dst, 0.0);
        CHECK(w.weights().cwiseAbs().maxCoeff() < 1e-8);
        CHECK((w.affine().rightCols<3>() - a).cwiseAbs().maxCoeff() < 1e-8);
        CHECK((w.affine().col(0) - t).cwiseAbs().maxCoeff() < 1e-8);
        const Vector3d p(0.3, 0.7, -0.9);
        CHECK((w(p) - (a * p + t)).norm() < 1e-8);
    }
}

TEST_CASE("TPS rejects degenerate control sets") {
    Matrix3Xd flat = random_points(10, 4);
    flat.row(2).setZero();
    CHECK_THROWS_AS(TpsWarp::fit(flat, flat, 0.0), NumericalError);
    Matrix3Xd dup = random_points(10, 5);
    dup.col(3) = dup.col(7);
    CHECK_THROWS_AS(TpsWarp::fit(dup, dup, 0.0), NumericalError);
    CHECK_THROWS_AS(TpsWarp::fit(random_points(4, 6), random_points(4, 6), 0.0), NumericalError);
}

TEST_CASE("image warping") {
    Volume3D img({12, 12, 12});
    test::Lcg rng(9);
    for (auto &x : img.data) x = static_cast<float>(rng.uniform());
    img.origin = Vector3d(-1, -1, -1);
    img.spacing = Vector3d::Constant(2.0 / 11);
    const Matrix3Xd src = random_points(12, 10);

    SUBCASE("identity warp returns the input exactly") {
        const TpsWarp w = TpsWarp::fit(src, src, 0.0);
        const Volume3D out = warp_image(w, img);
        double worst = 0.0;
        for (std::size_t i = 0; i < img.size(); ++i) worst = std::max(worst, double(std::abs(out.data[i] - img.data[i])));
        CHECK(worst < 1e-6);
    }
    SUBCASE("integer voxel translation shifts the interior") {
        const Vector3d shift = 2.0 * img.spacing.cwiseProduct(Vector3d(1, 0, -1));
        const TpsWarp w = TpsWarp::fit(src, src.colwise() + shift, 0.0);
        const Volume3D out = warp_image(w, img);
        for (std::size_t z = 2; z < 12; ++z)
            for (std::size_t y = 0; y < 12; ++y)
                for (std::size_t x = 0; x < 10; ++x) CHECK(out.at(x, y, z) == doctest::Approx(img.at(x + 2, y, z - 2)).epsilon(1e-5));
    }
}

TEST_CASE("warped image overlaps the rasterized target shape") {
    const Dims3 dims{48, 48, 48};
    const Lattice lat{16, 9};
    const SupershapeParams from{3, 2.0, 2.0}, to{3, 2.4, 2.6};
    const Volume3D mask_from = rasterize_mask(from, dims);
    const auto xn = surface_points(from, lat), xs = surface_points(to, lat);
    const Matrix3Xd src = as_matrix(xs);
    const TpsWarp w = TpsWarp::fit(src, as_matrix(xn), default_tps_lambda(src));
    const Volume3D warped = warp_image(w, mask_from);
    const Volume3D target = rasterize_mask(to, dims);
    double inter = 0.0, a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const bool p = warped.data[i] > 0.5f, q = target.data[i] > 0.5f;
        inter += p && q;
        a += p;
        b += q;
    }
    CHECK(2 * inter / (a + b) > 0.85);
}

TEST_CASE("augmented set construction") {
    const Dims3 dims{16, 16, 16};
    const Lattice lat{8, 5};
    const auto params = sample_params(3, 21, 6, ExponentPrior{4.0, 3.0});
    std::vector<ShapeSample> shapes;
    std::vector<Volume3D> images;
    for (const auto &p : params) {
        shapes.push_back(surface_points(p, lat));
        images.push_back(rasterize(p, dims, ImagingConfig{}, 1));
    }
    const PcaSubspace sub = fit_pca(std::span<const ShapeSample>(shapes), {.fixed_modes = 3});
    std::vector<ScoreVector> scores;
    for (const auto &s : shapes) scores.push_back(encode(sub, s));
    const KdeModel kde = make_kde(sub, scores);
    std::vector<OriginalSample> originals;
    for (std::size_t i = 0; i < shapes.size(); ++i) originals.push_back({&shapes[i], &images[i]});

    CHECK(build_augmented_set(sub, kde, originals, 0, 3).empty());
    const auto pairs = build_augmented_set(sub, kde, originals, 40, 3);
    REQUIRE(pairs.size() == 40);
    for (const auto &p : pairs) {
        CHECK((p.scores.z - encode(sub, p.shape).z).norm() < 1e-6);
        CHECK(p.provenance < shapes.size());
        CHECK(p.image.same_geometry(images[p.provenance]));
    }
    const auto again = build_augmented_set(sub, kde, originals, 40, 3);
    CHECK(again[17].image.data == pairs[17].image.data);

    // KDE preserves the mean: augmented mean within 3 standard errors.
    const auto draws = sample_kde(kde, 4000, 5);
    for (Eigen::Index l = 0; l < 3; ++l) {
        double m = 0.0, centre = 0.0;
        for (const auto &d : draws) m += d.z.z[l];
        m /= double(draws.size());
        for (const auto &s : scores) centre += s.z[l];
        centre /= double(scores.size());
        double spread = 0.0;
        for (const auto &s : scores) spread += std::pow(s.z[l] - centre, 2);
        const double var = spread / double(scores.size()) + kde.sigma2 * sub.eigenvalues[l];
        CHECK(std::abs(m - centre) < 3 * std::sqrt(var / double(draws.size())));
    }

    std::vector<OriginalSample> short_list(originals.begin(), originals.end() - 1);
    CHECK_THROWS_AS(build_augmented_set(sub, kde, short_list, 2, 1), DataError);
}
