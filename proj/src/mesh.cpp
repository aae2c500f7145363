#include "probshape/mesh.hpp"

#include <fstream>
#include <iomanip>
#include <map>
#include <utility>

#include <Eigen/Geometry>

#include "probshape/binary_io.hpp"
#include "probshape/error.hpp"

namespace probshape {

void TriMesh::validate() const {
    for (const auto &f : faces) {
        for (auto i : f) {
            if (i >= vertices.size()) throw DataError("mesh face index out of range");
        }
        if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) throw DataError("degenerate mesh face (repeated index)");
    }
}

double surface_area(const TriMesh &mesh) {
    double area = 0.0;
    for (const auto &f : mesh.faces) {
        const auto &a = mesh.vertices[f[0]];
        const auto &b = mesh.vertices[f[1]];
        const auto &c = mesh.vertices[f[2]];
        area += 0.5 * (b - a).cross(c - a).norm();
    }
    return area;
}

bool is_watertight(const TriMesh &mesh) {
    std::map<std::pair<std::uint32_t, std::uint32_t>, int> directed;
    for (const auto &f : mesh.faces) {
        for (int e = 0; e < 3; ++e) {
            if (++directed[{f[e], f[(e + 1) % 3]}] > 1) return false;
        }
    }
    for (const auto &[edge, count] : directed) {
        if (!directed.contains({edge.second, edge.first})) return false;
    }
    return !mesh.faces.empty();
}

double bbox_diagonal(std::span<const Eigen::Vector3d> points) {
    if (points.empty()) return 0.0;
    Eigen::Vector3d lo = points.front();
    Eigen::Vector3d hi = points.front();
    for (const auto &p : points) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    return (hi - lo).norm();
}

void write_off(const std::filesystem::path &path, const TriMesh &mesh) {
    auto os = io::open_output(path);
    os << "OFF\n" << mesh.vertices.size() << ' ' << mesh.faces.size() << " 0\n";
    os << std::setprecision(9);
    for (const auto &v : mesh.vertices) os << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
    for (const auto &f : mesh.faces) os << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
    if (!os) throw DataError("failed writing mesh '" + path.string() + "'");
}

void write_vertex_scalars(const std::filesystem::path &path, std::span<const double> values) {
    auto os = io::open_output(path);
    os << "vertex_index,value\n" << std::setprecision(10);
    for (std::size_t i = 0; i < values.size(); ++i) os << i << ',' << values[i] << '\n';
}

} // namespace probshape
