#include "probshape/supershapes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <string>

#include "probshape/binary_io.hpp"
#include "probshape/error.hpp"
#include "probshape/rng.hpp"

namespace probshape {

namespace {
constexpr double kPi = std::numbers::pi;
constexpr double kFrameFill = 0.8;
} // namespace

void SupershapeParams::validate() const {
    if (lobes < 1) throw ConfigError("supershape lobes must be >= 1");
    if (!(c1 > 0.0) || !(c2 > 0.0) || !std::isfinite(c1) || !std::isfinite(c2)) {
        throw ConfigError("supershape exponents must be finite and > 0");
    }
}

void Lattice::validate() const {
    if (n_theta < 8) throw ConfigError("lattice.n_theta must be >= 8");
    if (n_phi < 5) throw ConfigError("lattice.n_phi must be >= 5");
}

double Lattice::theta(std::size_t i) const {
    return -kPi + 2.0 * kPi * static_cast<double>(i) / static_cast<double>(n_theta);
}

double Lattice::phi(std::size_t j) const {
    return -0.5 * kPi + (static_cast<double>(j) + 0.5) * kPi / static_cast<double>(n_phi);
}

std::vector<Eigen::Vector3d> ShapeSample::points() const {
    std::vector<Eigen::Vector3d> out(point_count());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = point(k);
    return out;
}

ShapeSample ShapeSample::from_points(const std::vector<Eigen::Vector3d> &pts) {
    ShapeSample s;
    s.x.resize(3 * static_cast<Eigen::Index>(pts.size()));
    for (std::size_t k = 0; k < pts.size(); ++k) s.x.segment<3>(3 * static_cast<Eigen::Index>(k)) = pts[k];
    return s;
}

std::vector<SupershapeParams> sample_params(int lobes, std::uint64_t seed, std::size_t count,
                                            const ExponentPrior &prior) {
    if (count == 0) throw ConfigError("shape count must be >= 1");
    if (!(prior.dof > 0.0)) throw ConfigError("exponent prior dof must be > 0");
    Rng rng(seed);
    std::chi_squared_distribution<double> chi2(prior.dof);
    std::vector<SupershapeParams> out(count);
    for (auto &p : out) {
        p.lobes = lobes;
        p.c1 = prior.shift + chi2(rng);
        p.c2 = prior.shift + chi2(rng);
        p.validate();
    }
    return out;
}

double superformula(double angle, const SupershapeParams &p) {
    const double u = p.lobes * angle / 4.0;
    const double f = std::pow(std::abs(std::cos(u)), p.c2) + std::pow(std::abs(std::sin(u)), p.c2);
    return std::pow(f, -1.0 / p.c1);
}

namespace {

double radius_at(const SupershapeParams &p, double r1, double phi) {
    const double r2 = superformula(phi, p);
    const double c = std::cos(phi);
    const double s = std::sin(phi);
    return r2 * std::sqrt(r1 * r1 * c * c + s * s);
}

} // namespace

double shape_scale(const SupershapeParams &p) {
    p.validate();
    // |cos u|^n + |sin u|^n has its extrema at u = 0 and u = pi/4, so the
    // azimuthal factor peaks at one of those two values.
    const double r1max = std::max(1.0, std::pow(2.0, (0.5 * p.c2 - 1.0) / p.c1));
    constexpr int kGrid = 4096;
    double best = 0.0;
    int best_i = 0;
    for (int i = 0; i <= kGrid; ++i) {
        const double phi = -0.5 * kPi + kPi * i / kGrid;
        const double r = radius_at(p, r1max, phi);
        if (r > best) {
            best = r;
            best_i = i;
        }
    }
    // Golden-section refinement around the best grid cell.
    double lo = -0.5 * kPi + kPi * std::max(best_i - 1, 0) / kGrid;
    double hi = -0.5 * kPi + kPi * std::min(best_i + 1, kGrid) / kGrid;
    const double g = 0.5 * (std::sqrt(5.0) - 1.0);
    for (int it = 0; it < 60; ++it) {
        const double a = hi - g * (hi - lo);
        const double b = lo + g * (hi - lo);
        if (radius_at(p, r1max, a) > radius_at(p, r1max, b)) hi = b;
        else lo = a;
    }
    best = std::max(best, radius_at(p, r1max, 0.5 * (lo + hi)));
    if (!std::isfinite(best) || !(best > 0.0)) throw ConfigError("supershape radius is not finite for these exponents");
    return 1.0 / best;
}

Eigen::Vector3d surface_point(const SupershapeParams &p, double theta, double phi, double scale) {
    const double r1 = superformula(theta, p);
    const double r2 = superformula(phi, p);
    const double cp = std::cos(phi);
    return scale * Eigen::Vector3d(r1 * std::cos(theta) * r2 * cp, r1 * std::sin(theta) * r2 * cp, r2 * std::sin(phi));
}

ShapeSample surface_points(const SupershapeParams &p, const Lattice &lattice) {
    lattice.validate();
    const double scale = shape_scale(p);
    ShapeSample s;
    s.x.resize(3 * static_cast<Eigen::Index>(lattice.size()));
    for (std::size_t j = 0; j < lattice.n_phi; ++j) {
        for (std::size_t i = 0; i < lattice.n_theta; ++i) {
            const auto k = static_cast<Eigen::Index>(j * lattice.n_theta + i);
            s.x.segment<3>(3 * k) = surface_point(p, lattice.theta(i), lattice.phi(j), scale);
        }
    }
    if (!s.x.allFinite()) throw ConfigError("supershape surface is not finite for these exponents");
    return s;
}

TriMesh lattice_mesh(const ShapeSample &points, const Lattice &lattice, const Eigen::Vector3d &south,
                     const Eigen::Vector3d &north) {
    lattice.validate();
    if (points.point_count() != lattice.size()) throw DataError("point count does not match the lattice");
    TriMesh mesh;
    mesh.vertices = points.points();
    const auto m = static_cast<std::uint32_t>(lattice.size());
    mesh.vertices.push_back(south);
    mesh.vertices.push_back(north);
    const auto nt = static_cast<std::uint32_t>(lattice.n_theta);
    const auto np = static_cast<std::uint32_t>(lattice.n_phi);
    const auto id = [nt](std::uint32_t i, std::uint32_t j) { return j * nt + (i % nt); };
    for (std::uint32_t j = 0; j + 1 < np; ++j) {
        for (std::uint32_t i = 0; i < nt; ++i) {
            const auto a = id(i, j), b = id(i + 1, j), c = id(i + 1, j + 1), d = id(i, j + 1);
            mesh.faces.push_back({a, b, c});
            mesh.faces.push_back({a, c, d});
        }
    }
    for (std::uint32_t i = 0; i < nt; ++i) {
        mesh.faces.push_back({m, id(i + 1, 0), id(i, 0)});
        mesh.faces.push_back({m + 1, id(i, np - 1), id(i + 1, np - 1)});
    }
    return mesh;
}

TriMesh extract_mesh(const SupershapeParams &p, const Lattice &lattice) {
    const auto pts = surface_points(p, lattice);
    const double scale = shape_scale(p);
    return lattice_mesh(pts, lattice, surface_point(p, 0.0, -0.5 * kPi, scale),
                        surface_point(p, 0.0, 0.5 * kPi, scale));
}

bool inside(const SupershapeParams &p, double scale, const Eigen::Vector3d &q) {
    const double rho = std::hypot(q.x(), q.y());
    const double norm = q.norm();
    if (norm == 0.0) return true;
    const double theta = std::atan2(q.y(), q.x());
    const double r1 = superformula(theta, p);
    // The surface point at (theta, phi) has elevation atan(tan(phi) / r1).
    const double phi = std::atan2(r1 * q.z(), rho);
    return norm <= scale * radius_at(p, r1, phi);
}

Volume3D supershape_frame(const Dims3 &dims) {
    Volume3D vol(dims);
    const double min_dim = static_cast<double>(*std::min_element(dims.begin(), dims.end()));
    const double spacing = 2.0 / (kFrameFill * min_dim);
    vol.spacing = Eigen::Vector3d::Constant(spacing);
    for (int a = 0; a < 3; ++a) vol.origin[a] = -0.5 * static_cast<double>(dims[a] - 1) * spacing;
    return vol;
}

Volume3D rasterize_mask(const SupershapeParams &p, const Dims3 &dims) {
    if (*std::min_element(dims.begin(), dims.end()) < 16) throw ConfigError("volume dims must be at least 16^3");
    const double scale = shape_scale(p);
    Volume3D vol = supershape_frame(dims);
    for (std::size_t z = 0; z < dims[2]; ++z) {
        for (std::size_t y = 0; y < dims[1]; ++y) {
            for (std::size_t x = 0; x < dims[0]; ++x) {
                const auto w = vol.world_of(Eigen::Vector3d(double(x), double(y), double(z)));
                vol.at(x, y, z) = inside(p, scale, w) ? 1.0f : 0.0f;
            }
        }
    }
    return vol;
}

Volume3D rasterize(const SupershapeParams &p, const Dims3 &dims, const ImagingConfig &imaging, std::uint64_t seed) {
    imaging.validate();
    Volume3D vol = rasterize_mask(p, dims);
    Rng rng(derive_seed(seed, "intensity"));
    std::normal_distribution<double> unit(0.0, 1.0);
    for (auto &v : vol.data) {
        const double mean = v > 0.5f ? imaging.fg_mean : imaging.bg_mean;
        v = static_cast<float>(mean + imaging.intensity_sigma * unit(rng));
    }
    vol = add_noise(vol, imaging.noise_sigma, derive_seed(seed, "noise"));
    return gaussian_blur(vol, imaging.blur_sigma);
}

void write_shape(const std::filesystem::path &path, const ShapeSample &shape) {
    auto os = io::open_output(path);
    io::write_magic(os, "PSPTS1");
    io::write_u32(os, static_cast<std::uint32_t>(shape.point_count()));
    for (Eigen::Index i = 0; i < shape.x.size(); ++i) io::write_f32(os, static_cast<float>(shape.x[i]));
    if (!os) throw DataError("failed writing shape '" + path.string() + "'");
}

ShapeSample read_shape(const std::filesystem::path &path) {
    auto is = io::open_input(path);
    const std::string what = "shape '" + path.string() + "'";
    io::expect_magic(is, "PSPTS1", what);
    const auto m = io::read_u32(is, what);
    ShapeSample s;
    s.x.resize(3 * static_cast<Eigen::Index>(m));
    for (Eigen::Index i = 0; i < s.x.size(); ++i) s.x[i] = io::read_f32(is, what);
    return s;
}

} // namespace probshape
