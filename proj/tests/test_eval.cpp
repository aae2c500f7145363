#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include <Eigen/SVD>

#include "probshape/error.hpp"
#include "probshape/eval.hpp"
#include "probshape/supershapes.hpp"
#include "test_support.hpp"

using namespace probshape;
using Eigen::MatrixXd;
using Eigen::Vector3d;
using Eigen::VectorXd;

namespace {

// Dense barycentric sampling; an upper bound on the exact distance.
double sampled_triangle_distance(const Vector3d &p, const Vector3d &a, const Vector3d &b, const Vector3d &c) {
    double best = std::numeric_limits<double>::infinity();
    const int n = 400;
    for (int i = 0; i <= n; ++i)
        for (int j = 0; i + j <= n; ++j) {
            const double u = double(i) / n, v = double(j) / n;
            best = std::min(best, (p - (a + u * (b - a) + v * (c - a))).norm());
        }
    return best;
}

TriMesh scaled(TriMesh m, double s) {
    for (auto &v : m.vertices) v *= s;
    return m;
}

// Brute-force EDT over all voxel pairs, in world units.
std::vector<double> brute_edt(const Volume3D &mask, bool to_foreground) {
    std::vector<double> out(mask.size(), std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const std::size_t x = i % mask.dims[0], y = (i / mask.dims[0]) % mask.dims[1], z = i / (mask.dims[0] * mask.dims[1]);
        for (std::size_t j = 0; j < mask.size(); ++j) {
            if ((mask.data[j] > 0.5f) != to_foreground) continue;
            const std::size_t x2 = j % mask.dims[0], y2 = (j / mask.dims[0]) % mask.dims[1],
                              z2 = j / (mask.dims[0] * mask.dims[1]);
            const Vector3d d = mask.spacing.cwiseProduct(
                Vector3d(double(x) - double(x2), double(y) - double(y2), double(z) - double(z2)));
            out[i] = std::min(out[i], d.norm());
        }
    }
    return out;
}

// Reference atypicality: explicit SVD of the other samples for each one.
std::vector<double> reference_combined(const MatrixXd &data, double target) {
    std::vector<double> within, off;
    for (Eigen::Index i = 0; i < data.cols(); ++i) {
        MatrixXd rest(data.rows(), data.cols() - 1);
        for (Eigen::Index j = 0, c = 0; j < data.cols(); ++j)
            if (j != i) rest.col(c++) = data.col(j);
        const VectorXd mu = rest.rowwise().mean();
        const MatrixXd c = rest.colwise() - mu;
        Eigen::JacobiSVD<MatrixXd> svd(c, Eigen::ComputeThinU);
        const VectorXd ev = svd.singularValues().array().square() / double(rest.cols() - 1);
        Eigen::Index l = 0;
        double acc = 0.0;
        while (acc < target * ev.sum()) acc += ev[l++];
        const MatrixXd u = svd.matrixU().leftCols(l);
        const VectorXd y = data.col(i) - mu;
        const VectorXd z = u.transpose() * y;
        within.push_back(std::sqrt((z.array().square() / ev.head(l).array()).sum()));
        off.push_back((y - u * z).squaredNorm() / double(data.rows()));
    }
    auto norm = [](std::vector<double> v) {
        const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
        const double a = *lo, b = *hi;
        for (auto &x : v) x = b > a ? (x - a) / (b - a) : 0.0;
        return v;
    };
    within = norm(within);
    off = norm(off);
    for (std::size_t i = 0; i < within.size(); ++i) within[i] += off[i];
    return within;
}

Volume3D noisy_image(const Dims3 &d, std::uint64_t seed) {
    Volume3D v(d);
    test::Lcg rng(seed);
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x) v.at(x, y, z) = static_cast<float>(0.1 * x + 0.05 * rng.normal());
    return v;
}

} // namespace

TEST_CASE("point-triangle distance matches dense sampling") {
    test::Lcg rng(1);
    for (int t = 0; t < 200; ++t) {
        const Vector3d a(rng.normal(), rng.normal(), rng.normal()), b(rng.normal(), rng.normal(), rng.normal()),
            c(rng.normal(), rng.normal(), rng.normal()), p(2 * rng.normal(), 2 * rng.normal(), 2 * rng.normal());
        const double exact = point_triangle_distance(p, a, b, c);
        const double sampled = sampled_triangle_distance(p, a, b, c);
        CHECK(exact <= sampled + 1e-12);
        CHECK(sampled - exact < 2e-2);
    }
    const Vector3d a(0, 0, 0), b(1, 0, 0), c(0, 1, 0);
    CHECK(point_triangle_distance({0.2, 0.2, 0.7}, a, b, c) == doctest::Approx(0.7));
    CHECK(point_triangle_distance({-1, -1, 0}, a, b, c) == doctest::Approx(std::sqrt(2.0)));
    CHECK(point_triangle_distance({0.5, -2, 0}, a, b, c) == doctest::Approx(2.0));
    CHECK(point_triangle_distance({1, 1, 0}, a, b, c) == doctest::Approx(std::sqrt(0.5)));
}

TEST_CASE("surface distance: identity, symmetry and concentric spheres") {
    const TriMesh unit = extract_mesh({3, 2.0, 2.0}, Lattice{64, 33});
    CHECK(surface_distance(unit, unit) == 0.0);
    const TriMesh outer = scaled(unit, 1.1);
    const double d = surface_distance(unit, outer);
    CHECK(std::abs(d - 0.1) / 0.1 < 0.02);
    CHECK(surface_distance(outer, unit) == d);

    const TriMesh lobed = extract_mesh({3, 4.0, 6.0}, Lattice{32, 17});
    CHECK(surface_distance(lobed, unit) > 0.0);
    CHECK(surface_distance(lobed, unit) == surface_distance(unit, lobed));
    CHECK_THROWS_AS(surface_distance(TriMesh{}, unit), DataError);
}

TEST_CASE("surface distance vanishes for vertices lying on the other surface") {
    // Subdividing each face keeps the surface; the new mesh's vertices lie on the old one.
    const TriMesh coarse = extract_mesh({3, 3.0, 5.0}, Lattice{16, 9});
    TriMesh fine = coarse;
    for (const auto &f : coarse.faces) fine.vertices.push_back((coarse.vertices[f[0]] + coarse.vertices[f[1]] + coarse.vertices[f[2]]) / 3.0);
    CHECK(one_sided_distance(fine, coarse) < 1e-9);
}

TEST_CASE("surface reconstruction from scores") {
    const Lattice lat{16, 9};
    const auto params = sample_params(3, 4, 12, ExponentPrior{4.0, 3.0});
    std::vector<ShapeSample> shapes;
    std::vector<TriMesh> meshes;
    for (const auto &p : params) {
        shapes.push_back(surface_points(p, lat));
        meshes.push_back(extract_mesh(p, lat));
    }
    const PcaSubspace sub = fit_pca(std::span<const ShapeSample>(shapes), {.variance_target = 0.99999});
    const auto l = static_cast<Eigen::Index>(sub.modes());
    const TriMesh mu = mean_mesh(meshes);
    for (std::size_t k = 0; k < lat.size(); ++k) CHECK((mu.vertices[k] - sub.mean.segment<3>(3 * Eigen::Index(k))).norm() < 1e-12);
    const double diag = bbox_diagonal(mu.vertices);

    const TriMesh same = reconstruct_surface(sub, mu, {VectorXd::Zero(l), false});
    for (std::size_t v = 0; v < mu.vertices.size(); ++v) CHECK((same.vertices[v] - mu.vertices[v]).norm() < 1e-6 * diag);
    CHECK(same.faces == mu.faces);

    for (std::size_t i : {0u, 5u}) {
        const ScoreVector z = encode(sub, shapes[i]);
        const TriMesh rec = reconstruct_surface(sub, mu, z);
        const VectorXd x = decode(sub, z).x;
        for (std::size_t k = 0; k < lat.size(); ++k) CHECK((rec.vertices[k] - x.segment<3>(3 * Eigen::Index(k))).norm() < 1e-6 * diag);
        // Close to the analytic surface, sampled much more finely.
        const TriMesh truth = extract_mesh(params[i], Lattice{64, 33});
        double spacing = 0.0;
        for (std::size_t k = 0; k + 1 < lat.size(); ++k)
            if ((k + 1) % lat.n_theta) spacing = std::max(spacing, (shapes[i].point(k + 1) - shapes[i].point(k)).norm());
        CHECK(surface_distance(rec, truth) < spacing);
    }

    // Bounded difference in z.
    const ScoreVector z0 = encode(sub, shapes[2]);
    ScoreVector z1 = z0;
    z1.z[0] += 1e-4;
    const TriMesh a = reconstruct_surface(sub, mu, z0), b = reconstruct_surface(sub, mu, z1);
    double moved = 0.0;
    for (std::size_t v = 0; v < a.vertices.size(); ++v) moved = std::max(moved, (a.vertices[v] - b.vertices[v]).norm());
    CHECK(moved < 1e-4 * 10.0);
    CHECK(reconstruct_surface(sub, mu, z0).vertices == a.vertices);
}

TEST_CASE("distance transforms match brute force") {
    Volume3D mask({9, 7, 6});
    mask.spacing = Vector3d(1.0, 0.5, 2.0);
    test::Lcg rng(3);
    for (auto &x : mask.data) x = rng.uniform() < 0.08 ? 1.0f : 0.0f;
    mask.at(4, 3, 3) = 1.0f;
    const Volume3D edt = distance_transform(mask);
    const auto ref = brute_edt(mask, true);
    for (std::size_t i = 0; i < mask.size(); ++i) CHECK(edt.data[i] == doctest::Approx(ref[i]).epsilon(1e-6));

    const Volume3D sdf = signed_distance(mask);
    const auto to_bg = brute_edt(mask, false);
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const double expect = mask.data[i] > 0.5f ? -to_bg[i] : ref[i];
        CHECK(sdf.data[i] == doctest::Approx(expect).epsilon(1e-6));
    }
}

TEST_CASE("atypicality scores match an SVD reference") {
    MatrixXd data(20, 15);
    test::Lcg rng(6);
    for (Eigen::Index j = 0; j < data.cols(); ++j)
        for (Eigen::Index i = 0; i < data.rows(); ++i) data(i, j) = rng.normal() * (i < 3 ? 3.0 : 0.3);
    const AtypicalityScores s = atypicality_scores(data, 0.95);
    const auto ref = reference_combined(data, 0.95);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(s.combined[i] == doctest::Approx(ref[i]).epsilon(1e-8));
    CHECK(*std::max_element(s.combined.begin(), s.combined.end()) <= 2.0);
    CHECK_THROWS_AS(atypicality_scores(data.leftCols(2)), DataError);
}

TEST_CASE("ranking ties keep index order") {
    const std::vector<double> s{0.5, 1.0, 0.5, 1.0, 0.0};
    CHECK(rank_descending(s) == std::vector<std::size_t>{1, 3, 0, 2, 4});
}

TEST_CASE("test-set selection") {
    const Dims3 d{8, 8, 8};
    SUBCASE("identical pool falls back to index order") {
        std::vector<Volume3D> imgs(9, noisy_image(d, 1));
        std::vector<Volume3D> masks(9, rasterize_mask({3, 2, 2}, {16, 16, 16}));
        const TestSplit s = select_test_sets(imgs, masks, 3, 4);
        for (double c : s.image_scores.combined) CHECK(c == 0.0);
        CHECK(s.aleatoric == std::vector<std::size_t>{0, 1, 2});
        CHECK(s.epistemic == std::vector<std::size_t>{0, 1, 2});
        CHECK(s.overlap == std::vector<std::size_t>{0, 1, 2});
        CHECK(s.control.size() == 3);
        CHECK(s.remainder.size() == 3);
    }
    SUBCASE("planted inverted image ranks first") {
        std::vector<Volume3D> imgs, masks;
        const auto params = sample_params(3, 2, 12);
        for (std::size_t i = 0; i < 12; ++i) {
            imgs.push_back(rasterize(params[i], {16, 16, 16}, ImagingConfig{}, i));
            masks.push_back(rasterize_mask(params[i], {16, 16, 16}));
        }
        for (auto &x : imgs[7].data) x = 1.0f - x;
        const TestSplit s = select_test_sets(imgs, masks, 3, 1);
        CHECK(rank_descending(s.image_scores.combined).front() == 7);
        CHECK(s.aleatoric.front() == 7);

        // Disjoint control and training pool, deterministic per seed.
        std::vector<std::size_t> held = s.aleatoric;
        held.insert(held.end(), s.epistemic.begin(), s.epistemic.end());
        for (auto c : s.control) CHECK(std::find(held.begin(), held.end(), c) == held.end());
        for (auto r : s.remainder) {
            CHECK(std::find(held.begin(), held.end(), r) == held.end());
            CHECK(std::find(s.control.begin(), s.control.end(), r) == s.control.end());
        }
        CHECK(s.control.size() + s.remainder.size() + held.size() - s.overlap.size() == 12);
        const TestSplit again = select_test_sets(imgs, masks, 3, 1);
        CHECK(again.control == s.control);
        CHECK(again.epistemic == s.epistemic);
    }
    SUBCASE("pool too small") {
        std::vector<Volume3D> imgs(5, noisy_image(d, 1));
        CHECK_THROWS_AS(select_test_sets(imgs, imgs, 2, 1), DataError);
    }
}

TEST_CASE("describe") {
    const std::vector<double> v{4.0, 1.0, 3.0, 2.0, 5.0};
    const Stats s = describe(v);
    CHECK(s.mean == 3.0);
    CHECK(s.std == doctest::Approx(std::sqrt(2.5)));
    CHECK(s.min == 1.0);
    CHECK(s.q1 == 2.0);
    CHECK(s.median == 3.0);
    CHECK(s.q3 == 4.0);
    CHECK(s.max == 5.0);
    const std::vector<double> w{1.0, 2.0, 3.0, 4.0};
    CHECK(describe(w).q1 == doctest::Approx(1.75));
    CHECK(describe(w).median == doctest::Approx(2.5));
}

TEST_CASE("reports: summaries, CSV round trip and JSON") {
    const auto dir = test::scratch_dir("report");
    EvalReport r;
    r.model = "uncertain";
    r.samples = {{"control", 0, 0.1, 0.2, 0.3}, {"control", 1, 0.3, 0.1, 0.5}, {"aleatoric", 0, 0.25, 0.9, 0.1}};
    summarize(r);
    REQUIRE(r.sets.size() == 2);
    CHECK(r.sets[0].set == "control");
    CHECK(r.set("control").distance.mean == doctest::Approx(0.2));
    CHECK(r.set("aleatoric").count == 1);
    CHECK_THROWS_AS(r.set("epistemic"), DataError);

    const std::vector<EvalReport> reports{r};
    write_report_csv(dir / "r.csv", reports);
    const auto back = read_report_csv(dir / "r.csv");
    REQUIRE(back.size() == 1);
    CHECK(back[0].model == "uncertain");
    REQUIRE(back[0].samples.size() == 3);
    CHECK(back[0].samples[1].epistemic == 0.5);
    CHECK(back[0].samples[2].set == "aleatoric");

    write_report_json(dir / "r.json", reports);
    std::ifstream js(dir / "r.json");
    const std::string text((std::istreambuf_iterator<char>(js)), std::istreambuf_iterator<char>());
    CHECK(text.find("\"uncertain\"") != std::string::npos);
    CHECK(text.find("scatter") != std::string::npos);

    EvalReport bad = r;
    bad.samples[0].distance = -1.0;
    CHECK_THROWS_AS(summarize(bad), DataError);
}
