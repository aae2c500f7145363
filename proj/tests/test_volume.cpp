#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "probshape/error.hpp"
#include "probshape/volume.hpp"
#include "test_support.hpp"

using namespace probshape;
using Eigen::Vector3d;

namespace {

Volume3D ramp(Dims3 d) {
    Volume3D v(d);
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x) v.at(x, y, z) = static_cast<float>(x + 2 * y + 3 * z);
    return v;
}

// Smooth bump used by the semigroup check.
Volume3D bump(std::size_t n, double width) {
    Volume3D v({n, n, n});
    const double c = (n - 1) / 2.0;
    for (std::size_t z = 0; z < n; ++z)
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const double r2 = (x - c) * (x - c) + (y - c) * (y - c) + (z - c) * (z - c);
                v.at(x, y, z) = static_cast<float>(std::exp(-r2 / (2 * width * width)));
            }
    return v;
}

} // namespace

TEST_CASE("trilinear sample reproduces voxel values and linear fields") {
    const Volume3D v = ramp({5, 4, 3});
    CHECK(trilinear_sample(v, Vector3d(2, 1, 1)) == doctest::Approx(v.at(2, 1, 1)));
    // Trilinear interpolation is exact for functions linear in each axis.
    CHECK(trilinear_sample(v, Vector3d(1.25, 2.5, 0.75)) == doctest::Approx(1.25 + 5.0 + 2.25).epsilon(1e-12));
}

TEST_CASE("trilinear sample on a constant volume and a two-level cube") {
    Volume3D c({3, 3, 3}, 4.5f);
    CHECK(trilinear_sample(c, Vector3d(0.3, 1.7, 2.0)) == doctest::Approx(4.5));
    CHECK(trilinear_sample(c, Vector3d(-5, 9, 1)) == doctest::Approx(4.5));

    Volume3D two({2, 2, 2});
    for (std::size_t z = 0; z < 2; ++z)
        for (std::size_t y = 0; y < 2; ++y) two.at(1, y, z) = 1.0f;
    CHECK(trilinear_sample(two, Vector3d(0.5, 0.5, 0.5)) == doctest::Approx(0.5));
}

TEST_CASE("trilinear sample clamps outside the grid") {
    const Volume3D v = ramp({4, 4, 4});
    CHECK(trilinear_sample(v, Vector3d(-3, 0, 0)) == doctest::Approx(v.at(0, 0, 0)));
    CHECK(trilinear_sample(v, Vector3d(10, 3, 3)) == doctest::Approx(v.at(3, 3, 3)));
}

TEST_CASE("trilinear sample is Lipschitz in the neighbour range") {
    const Volume3D v = ramp({6, 6, 6});
    test::Lcg rng(3);
    for (int t = 0; t < 200; ++t) {
        const Vector3d p(rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 5));
        const Vector3d q = p + Vector3d(1e-4, -1e-4, 1e-4);
        // Largest per-axis slope of the ramp is 3 per voxel.
        CHECK(std::abs(trilinear_sample(v, p) - trilinear_sample(v, q)) <= 6.0 * 1e-4 + 1e-9);
    }
}

TEST_CASE("gaussian kernel is truncated at ceil(3 sigma) and normalized") {
    const auto k = gaussian_kernel(1.3);
    CHECK(k.size() == 2 * 4 + 1);
    double sum = 0.0;
    for (double w : k) sum += w;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(k[4] > k[3]);
    CHECK(k[0] == doctest::Approx(k[8]));
}

TEST_CASE("blur with sigma 0 is the identity and keeps constants") {
    const Volume3D v = ramp({5, 5, 5});
    CHECK(gaussian_blur(v, 0.0).data == v.data);
    const Volume3D c({7, 6, 5}, 2.0f);
    for (float x : gaussian_blur(c, 1.7).data) CHECK(x == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("blur of an impulse equals the product of 1D centre weights") {
    Volume3D v({9, 9, 9});
    v.at(4, 4, 4) = 1.0f;
    const auto k = gaussian_kernel(1.0);
    const Volume3D b = gaussian_blur(v, 1.0);
    CHECK(b.at(4, 4, 4) == doctest::Approx(k[3] * k[3] * k[3]).epsilon(1e-6));
    CHECK(b.at(5, 4, 3) == doctest::Approx(k[4] * k[3] * k[2]).epsilon(1e-6));
}

TEST_CASE("blur preserves the sum when the support stays interior") {
    Volume3D v({21, 21, 21});
    v.at(10, 10, 10) = 3.0f;
    v.at(9, 11, 10) = -1.0f;
    double before = 0.0, after = 0.0;
    for (float x : v.data) before += x;
    for (float x : gaussian_blur(v, 1.5).data) after += x;
    CHECK(after == doctest::Approx(before).epsilon(1e-6));
}

TEST_CASE("blur semigroup: sigma_a then sigma_b approximates the combined sigma") {
    const Volume3D v = bump(41, 3.0);
    const Volume3D two = gaussian_blur(gaussian_blur(v, 1.0), 1.5);
    const Volume3D one = gaussian_blur(v, std::sqrt(1.0 + 2.25));
    double worst = 0.0;
    for (std::size_t z = 12; z < 29; ++z)
        for (std::size_t y = 12; y < 29; ++y)
            for (std::size_t x = 12; x < 29; ++x) worst = std::max(worst, double(std::abs(two.at(x, y, z) - one.at(x, y, z))));
    CHECK(worst < 1e-3);
}

TEST_CASE("noise: sigma 0 identity, determinism and variance") {
    const Volume3D c({32, 32, 32}, 0.5f);
    CHECK(add_noise(c, 0.0, 1).data == c.data);
    const Volume3D a = add_noise(c, 0.1, 42);
    const Volume3D b = add_noise(c, 0.1, 42);
    CHECK(a.data == b.data);
    CHECK(add_noise(c, 0.1, 43).data != a.data);
    double mean = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) mean += a.data[i] - c.data[i];
    mean /= static_cast<double>(a.size());
    double var = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) var += std::pow(a.data[i] - c.data[i] - mean, 2);
    var /= static_cast<double>(a.size() - 1);
    CHECK(std::abs(var - 0.01) < 0.002);
}

TEST_CASE("normalize uses frozen dataset statistics") {
    std::vector<Volume3D> train{ramp({4, 4, 4}), ramp({4, 4, 4})};
    for (auto &x : train[1].data) x *= 2.0f;
    const IntensityStats st = compute_intensity_stats(std::span<const Volume3D>(train));
    double m = 0.0, s = 0.0;
    std::size_t n = 0;
    for (const auto &v : train)
        for (float x : normalize(v, st).data) {
            m += x;
            s += double(x) * x;
            ++n;
        }
    m /= n;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::sqrt(s / n - m * m) == doctest::Approx(1.0).epsilon(1e-6));

    Volume3D at_mean({3, 3, 3}, static_cast<float>(st.mean));
    for (float x : normalize(at_mean, st).data) CHECK(std::abs(x) < 1e-6);

    // A test volume shifted by d keeps the shift in units of the train std.
    Volume3D shifted = train[0];
    for (auto &x : shifted.data) x += 5.0f;
    const Volume3D a = normalize(train[0], st), b = normalize(shifted, st);
    for (std::size_t i = 0; i < a.size(); i += 7) CHECK(b.data[i] - a.data[i] == doctest::Approx(5.0 / st.std).epsilon(1e-5));
}

TEST_CASE("normalize rejects degenerate statistics") {
    std::vector<Volume3D> flat{Volume3D({4, 4, 4}, 1.0f)};
    CHECK_THROWS_AS(compute_intensity_stats(std::span<const Volume3D>(flat)), DataError);
    CHECK_THROWS_AS(normalize(flat[0], IntensityStats{1.0, 0.0}), DataError);
}

TEST_CASE("volume file round trip is bit exact") {
    const auto dir = test::scratch_dir("volume_io");
    Volume3D v = add_noise(ramp({5, 3, 2}), 0.3, 9);
    write_volume(dir / "v.psvol", v);
    CHECK(std::filesystem::file_size(dir / "v.psvol") == 24 + 4 * v.size());
    const Volume3D r = read_volume(dir / "v.psvol");
    CHECK(r.dims == v.dims);
    CHECK(r.data == v.data);

    std::ofstream(dir / "bad.psvol", std::ios::binary) << "NOTAVOL!xxxxxxxxxxxxxxxx";
    CHECK_THROWS_AS(read_volume(dir / "bad.psvol"), DataError);
}

TEST_CASE("imaging config and volume invariants") {
    ImagingConfig c;
    CHECK_NOTHROW(c.validate());
    c.fg_mean = c.bg_mean;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    Volume3D v({2, 2, 2});
    v.data.pop_back();
    CHECK_THROWS_AS(v.validate(), DataError);
}
