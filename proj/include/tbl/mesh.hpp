#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "tbl/geometry.hpp"

namespace tbl {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::uint32_t, 3>> faces;

  bool empty() const { return faces.empty(); }
  double triangle_area(std::size_t f) const;
  double surface_area() const;
  Aabb bounds() const;
  /// True when every face indexes an existing vertex.
  bool indices_valid() const;
  void append(const TriangleMesh& other);
};

/// Closed triangulations of the analytic primitives.
TriangleMesh box_mesh(const Aabb& box);
TriangleMesh sphere_mesh(const Vec3& center, double radius, int stacks = 24, int slices = 48);

/// Area-weighted uniform sampling of the mesh surface. Deterministic for a given seed.
std::vector<Vec3> sample_surface(const TriangleMesh& mesh, std::size_t count, std::uint64_t seed);

void write_ply_ascii(const TriangleMesh& mesh, const std::filesystem::path& path);
void write_stl_ascii(const TriangleMesh& mesh, const std::filesystem::path& path,
                     const char* solid_name = "reconstruction");

}  // namespace tbl
