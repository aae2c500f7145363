#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Core>

#include "probshape/mesh.hpp"
#include "probshape/volume.hpp"

namespace probshape {

// 3D supershape as the spherical product of two superformulas sharing the
// lobe count m and exponents n1 = c1, n2 = n3 = c2 (a = b = 1).
struct SupershapeParams {
    int lobes = 3;
    double c1 = 2.0;
    double c2 = 2.0;

    void validate() const; // ConfigError
};

// Exponents are drawn as shift + chi^2(dof).
struct ExponentPrior {
    double dof = 4.0;
    double shift = 1.0;
};

struct Lattice {
    std::size_t n_theta = 32;
    std::size_t n_phi = 17;

    std::size_t size() const { return n_theta * n_phi; }
    void validate() const; // ConfigError: n_theta >= 8, n_phi >= 5
    double theta(std::size_t i) const;
    double phi(std::size_t j) const;
};

// Flattened corresponded points (x0, y0, z0, x1, ...).
struct ShapeSample {
    Eigen::VectorXd x;

    std::size_t point_count() const { return static_cast<std::size_t>(x.size()) / 3; }
    Eigen::Vector3d point(std::size_t k) const { return x.segment<3>(3 * static_cast<Eigen::Index>(k)); }
    std::vector<Eigen::Vector3d> points() const;
    static ShapeSample from_points(const std::vector<Eigen::Vector3d> &pts);
};

std::vector<SupershapeParams> sample_params(int lobes, std::uint64_t seed, std::size_t count,
                                            const ExponentPrior &prior = {});

// r(gamma) = (|cos(m gamma / 4)|^c2 + |sin(m gamma / 4)|^c2)^(-1/c1)
double superformula(double angle, const SupershapeParams &p);

// Factor that brings the largest surface radius to exactly 1. Every surface
// evaluation below is pre-multiplied by it, so all shapes fit the unit ball.
double shape_scale(const SupershapeParams &p);

// Scaled surface point at parameters (theta, phi).
Eigen::Vector3d surface_point(const SupershapeParams &p, double theta, double phi, double scale);

ShapeSample surface_points(const SupershapeParams &p, const Lattice &lattice);

// Lattice triangulation: two triangles per quad, fan caps at the two poles.
// Vertices 0..M-1 are the lattice points; M is the south pole, M+1 the north.
TriMesh extract_mesh(const SupershapeParams &p, const Lattice &lattice);
TriMesh lattice_mesh(const ShapeSample &points, const Lattice &lattice, const Eigen::Vector3d &south,
                     const Eigen::Vector3d &north);

// Exact star-convex inside test in world (unit-ball) coordinates.
bool inside(const SupershapeParams &p, double scale, const Eigen::Vector3d &q);

// Voxel grid whose centre is the world origin and whose min dimension spans
// 1 / 0.8 world units, so the unit ball covers 80% of it.
Volume3D supershape_frame(const Dims3 &dims);

// Binary (0/1) foreground mask in the supershape frame.
Volume3D rasterize_mask(const SupershapeParams &p, const Dims3 &dims);

// Two-level intensity image, then additive noise, then Gaussian blur.
Volume3D rasterize(const SupershapeParams &p, const Dims3 &dims, const ImagingConfig &imaging,
                   std::uint64_t seed);

// PSPTS1 container: magic, M (u32 LE), then 3M f32 LE.
void write_shape(const std::filesystem::path &path, const ShapeSample &shape);
ShapeSample read_shape(const std::filesystem::path &path);

} // namespace probshape
