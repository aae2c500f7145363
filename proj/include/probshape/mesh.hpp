#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace probshape {

struct TriMesh {
    std::vector<Eigen::Vector3d> vertices;
    std::vector<std::array<std::uint32_t, 3>> faces;

    // Throws DataError on out-of-range or repeated face indices.
    void validate() const;
};

double surface_area(const TriMesh &mesh);

// True when every undirected edge is shared by exactly two faces and each
// directed edge appears once (closed, consistently oriented).
bool is_watertight(const TriMesh &mesh);

// Axis-aligned bounding-box diagonal of a point set.
double bbox_diagonal(std::span<const Eigen::Vector3d> points);

// ASCII OFF export.
void write_off(const std::filesystem::path &path, const TriMesh &mesh);

// "vertex_index,value" lines, one per vertex, with a header row.
void write_vertex_scalars(const std::filesystem::path &path, std::span<const double> values);

} // namespace probshape
