#include "probshape/volume.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <string>

#include "probshape/binary_io.hpp"
#include "probshape/error.hpp"
#include "probshape/rng.hpp"

namespace probshape {

Volume3D::Volume3D(Dims3 d, float fill) : dims(d), data(d[0] * d[1] * d[2], fill) {}

void Volume3D::validate() const {
    if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw DataError("volume has a zero dimension");
    if (data.size() != dims[0] * dims[1] * dims[2]) throw DataError("volume data length does not match H*W*D");
    if ((spacing.array() <= 0.0).any()) throw DataError("volume spacing must be strictly positive");
}

void ImagingConfig::validate() const {
    if (!(intensity_sigma >= 0.0)) throw ConfigError("imaging.intensity_sigma must be >= 0");
    if (!(noise_sigma >= 0.0)) throw ConfigError("imaging.noise_sigma must be >= 0");
    if (!(blur_sigma >= 0.0)) throw ConfigError("imaging.blur_sigma must be >= 0");
    if (fg_mean == bg_mean) throw ConfigError("imaging.fg_mean must differ from imaging.bg_mean");
}

double trilinear_sample(const Volume3D &vol, const Eigen::Vector3d &p) {
    std::array<std::size_t, 3> lo{};
    std::array<std::size_t, 3> hi{};
    std::array<double, 3> t{};
    for (int a = 0; a < 3; ++a) {
        const double maxc = static_cast<double>(vol.dims[a] - 1);
        const double c = std::clamp(p[a], 0.0, maxc);
        const double f = std::floor(c);
        lo[a] = static_cast<std::size_t>(f);
        hi[a] = std::min(lo[a] + 1, vol.dims[a] - 1);
        t[a] = c - f;
    }
    const auto v = [&](std::size_t x, std::size_t y, std::size_t z) {
        return static_cast<double>(vol.at(x, y, z));
    };
    const double c00 = v(lo[0], lo[1], lo[2]) * (1 - t[0]) + v(hi[0], lo[1], lo[2]) * t[0];
    const double c10 = v(lo[0], hi[1], lo[2]) * (1 - t[0]) + v(hi[0], hi[1], lo[2]) * t[0];
    const double c01 = v(lo[0], lo[1], hi[2]) * (1 - t[0]) + v(hi[0], lo[1], hi[2]) * t[0];
    const double c11 = v(lo[0], hi[1], hi[2]) * (1 - t[0]) + v(hi[0], hi[1], hi[2]) * t[0];
    const double c0 = c00 * (1 - t[1]) + c10 * t[1];
    const double c1 = c01 * (1 - t[1]) + c11 * t[1];
    return c0 * (1 - t[2]) + c1 * t[2];
}

std::vector<double> gaussian_kernel(double sigma) {
    if (sigma < 0.0) throw ConfigError("blur sigma must be >= 0");
    if (sigma == 0.0) return {1.0};
    const auto radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[i + radius];
    }
    for (auto &w : k) w /= sum;
    return k;
}

namespace {

// One separable pass along `axis` with clamped borders.
void blur_axis(const std::vector<float> &in, std::vector<float> &out, const Dims3 &dims, int axis,
               const std::vector<double> &kernel) {
    const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
    const std::array<std::size_t, 3> stride{1, dims[0], dims[0] * dims[1]};
    const auto n = static_cast<std::ptrdiff_t>(dims[axis]);
    const std::size_t s = stride[axis];
    for (std::size_t z = 0; z < dims[2]; ++z) {
        for (std::size_t y = 0; y < dims[1]; ++y) {
            for (std::size_t x = 0; x < dims[0]; ++x) {
                const std::array<std::size_t, 3> pos{x, y, z};
                const std::size_t base = x + dims[0] * (y + dims[1] * z) - pos[axis] * s;
                const auto i = static_cast<std::ptrdiff_t>(pos[axis]);
                double acc = 0.0;
                for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
                    const std::ptrdiff_t j = std::clamp<std::ptrdiff_t>(i + k, 0, n - 1);
                    acc += kernel[k + radius] * in[base + static_cast<std::size_t>(j) * s];
                }
                out[base + pos[axis] * s] = static_cast<float>(acc);
            }
        }
    }
}

} // namespace

Volume3D gaussian_blur(const Volume3D &vol, double sigma) {
    const auto kernel = gaussian_kernel(sigma);
    if (kernel.size() == 1) return vol;
    Volume3D out = vol;
    std::vector<float> tmp(vol.size());
    blur_axis(vol.data, tmp, vol.dims, 0, kernel);
    blur_axis(tmp, out.data, vol.dims, 1, kernel);
    blur_axis(out.data, tmp, vol.dims, 2, kernel);
    out.data.swap(tmp);
    return out;
}

Volume3D add_noise(const Volume3D &vol, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw ConfigError("noise sigma must be >= 0");
    if (sigma == 0.0) return vol;
    Volume3D out = vol;
    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    for (auto &v : out.data) v = static_cast<float>(v + noise(rng));
    return out;
}

IntensityStats compute_intensity_stats(std::span<const Volume3D *const> volumes) {
    if (volumes.empty()) throw DataError("cannot compute intensity statistics of an empty dataset");
    // Two passes in double keep the std accurate for large voxel counts.
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto *v : volumes) {
        for (float x : v->data) sum += x;
        count += v->size();
    }
    const double mean = sum / static_cast<double>(count);
    double ss = 0.0;
    for (const auto *v : volumes) {
        for (float x : v->data) ss += (x - mean) * (x - mean);
    }
    const double std = std::sqrt(ss / static_cast<double>(count));
    if (!(std > 0.0)) throw DataError("degenerate dataset: intensity std is zero");
    return {mean, std};
}

IntensityStats compute_intensity_stats(std::span<const Volume3D> volumes) {
    std::vector<const Volume3D *> ptrs;
    ptrs.reserve(volumes.size());
    for (const auto &v : volumes) ptrs.push_back(&v);
    return compute_intensity_stats(std::span<const Volume3D *const>(ptrs));
}

Volume3D normalize(const Volume3D &vol, const IntensityStats &stats) {
    if (!(stats.std > 0.0)) throw DataError("degenerate dataset: normalization std must be > 0");
    Volume3D out = vol;
    for (auto &v : out.data) v = static_cast<float>((v - stats.mean) / stats.std);
    return out;
}

void write_volume(const std::filesystem::path &path, const Volume3D &vol) {
    vol.validate();
    auto os = io::open_output(path);
    io::write_magic(os, "PSVOL1");
    for (auto d : vol.dims) io::write_u32(os, static_cast<std::uint32_t>(d));
    io::write_u32(os, 0); // reserved
    io::write_f32_array(os, vol.data.data(), vol.size());
    if (!os) throw DataError("failed writing volume '" + path.string() + "'");
}

Volume3D read_volume(const std::filesystem::path &path) {
    auto is = io::open_input(path);
    const std::string what = "volume '" + path.string() + "'";
    io::expect_magic(is, "PSVOL1", what);
    Dims3 dims{};
    for (auto &d : dims) d = io::read_u32(is, what);
    io::read_u32(is, what);
    if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw DataError(what + ": zero dimension in header");
    Volume3D vol(dims);
    io::read_f32_array(is, vol.data.data(), vol.size(), what);
    return vol;
}

} // namespace probshape
