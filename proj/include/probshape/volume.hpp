#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace probshape {

using Dims3 = std::array<std::size_t, 3>;

// Dense scalar grid, x fastest. Voxel (i, j, k) sits at world
// origin + spacing .* (i, j, k).
struct Volume3D {
    Dims3 dims{0, 0, 0};
    Eigen::Vector3d origin = Eigen::Vector3d::Zero();
    Eigen::Vector3d spacing = Eigen::Vector3d::Ones();
    std::vector<float> data;

    Volume3D() = default;
    explicit Volume3D(Dims3 d, float fill = 0.0f);

    std::size_t size() const { return data.size(); }
    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
        return x + dims[0] * (y + dims[1] * z);
    }
    float &at(std::size_t x, std::size_t y, std::size_t z) { return data[index(x, y, z)]; }
    float at(std::size_t x, std::size_t y, std::size_t z) const { return data[index(x, y, z)]; }

    Eigen::Vector3d world_of(const Eigen::Vector3d &voxel) const {
        return origin + spacing.cwiseProduct(voxel);
    }
    Eigen::Vector3d voxel_of(const Eigen::Vector3d &world) const {
        return (world - origin).cwiseQuotient(spacing);
    }
    bool same_geometry(const Volume3D &other) const {
        return dims == other.dims && origin == other.origin && spacing == other.spacing;
    }

    // Throws DataError if the data length or spacing breaks the invariants.
    void validate() const;
};

struct ImagingConfig {
    double fg_mean = 0.7;
    double bg_mean = 0.3;
    double intensity_sigma = 0.05;
    double noise_sigma = 0.02;
    double blur_sigma = 1.0;

    void validate() const; // ConfigError
};

// Dataset-level intensity statistics used for z-score normalization.
struct IntensityStats {
    double mean = 0.0;
    double std = 1.0;
};

// Trilinear interpolation at a continuous voxel coordinate. Coordinates are
// clamped to [0, dim - 1] per axis.
double trilinear_sample(const Volume3D &vol, const Eigen::Vector3d &p);

// Normalized, truncated (radius ceil(3 sigma)) 1D Gaussian taps.
std::vector<double> gaussian_kernel(double sigma);

// Separable Gaussian blur with clamped borders. sigma == 0 is the identity.
Volume3D gaussian_blur(const Volume3D &vol, double sigma);

// Adds independent N(0, sigma^2) noise per voxel.
Volume3D add_noise(const Volume3D &vol, double sigma, std::uint64_t seed);

// Global mean/std over every voxel of every volume. Throws DataError when the
// pooled std is zero or the span is empty.
IntensityStats compute_intensity_stats(std::span<const Volume3D> volumes);
IntensityStats compute_intensity_stats(std::span<const Volume3D *const> volumes);

// (v - mean) / std voxel-wise. Throws DataError if std <= 0.
Volume3D normalize(const Volume3D &vol, const IntensityStats &stats);

// PSVOL1 container: magic, H, W, D (u32 LE), 4 reserved bytes, then f32 LE
// voxels in x-fastest order. Origin and spacing are not stored.
void write_volume(const std::filesystem::path &path, const Volume3D &vol);
Volume3D read_volume(const std::filesystem::path &path);

} // namespace probshape
