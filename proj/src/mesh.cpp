#include "tbl/mesh.hpp"

#include <algorithm>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "tbl/errors.hpp"
#include "tbl/rng.hpp"

namespace tbl {

double TriangleMesh::triangle_area(std::size_t f) const {
  const auto& [a, b, c] = faces[f];
  return 0.5 * norm(cross(vertices[b] - vertices[a], vertices[c] - vertices[a]));
}

double TriangleMesh::surface_area() const {
  double area = 0.0;
  for (std::size_t f = 0; f < faces.size(); ++f) area += triangle_area(f);
  return area;
}

Aabb TriangleMesh::bounds() const {
  Aabb box = Aabb::empty();
  for (const auto& v : vertices) box.expand(v);
  return box;
}

bool TriangleMesh::indices_valid() const {
  return std::all_of(faces.begin(), faces.end(), [&](const auto& f) {
    return f[0] < vertices.size() && f[1] < vertices.size() && f[2] < vertices.size();
  });
}

void TriangleMesh::append(const TriangleMesh& other) {
  const auto offset = static_cast<std::uint32_t>(vertices.size());
  vertices.insert(vertices.end(), other.vertices.begin(), other.vertices.end());
  for (auto f : other.faces) faces.push_back({f[0] + offset, f[1] + offset, f[2] + offset});
}

TriangleMesh box_mesh(const Aabb& box) {
  TriangleMesh mesh;
  for (int i = 0; i < 8; ++i)
    mesh.vertices.push_back({(i & 1) ? box.max.x : box.min.x, (i & 2) ? box.max.y : box.min.y,
                             (i & 4) ? box.max.z : box.min.z});
  // Outward-facing winding.
  mesh.faces = {{0, 4, 6}, {0, 6, 2}, {1, 3, 7}, {1, 7, 5}, {0, 1, 5}, {0, 5, 4},
                {2, 6, 7}, {2, 7, 3}, {0, 2, 3}, {0, 3, 1}, {4, 5, 7}, {4, 7, 6}};
  return mesh;
}

TriangleMesh sphere_mesh(const Vec3& center, double radius, int stacks, int slices) {
  TriangleMesh mesh;
  const double pi = std::numbers::pi;
  mesh.vertices.push_back(center + Vec3{0, radius, 0});
  for (int i = 1; i < stacks; ++i) {
    const double phi = pi * i / stacks;
    for (int j = 0; j < slices; ++j) {
      const double theta = 2.0 * pi * j / slices;
      mesh.vertices.push_back(center + Vec3{std::sin(phi) * std::cos(theta), std::cos(phi),
                                            std::sin(phi) * std::sin(theta)} *
                                           radius);
    }
  }
  mesh.vertices.push_back(center - Vec3{0, radius, 0});
  const auto ring = [&](int i, int j) {
    return static_cast<std::uint32_t>(1 + (i - 1) * slices + (j % slices));
  };
  const auto bottom = static_cast<std::uint32_t>(mesh.vertices.size() - 1);
  for (int j = 0; j < slices; ++j) {
    mesh.faces.push_back({0, ring(1, j + 1), ring(1, j)});
    mesh.faces.push_back({bottom, ring(stacks - 1, j), ring(stacks - 1, j + 1)});
  }
  for (int i = 1; i + 1 < stacks; ++i)
    for (int j = 0; j < slices; ++j) {
      mesh.faces.push_back({ring(i, j), ring(i, j + 1), ring(i + 1, j + 1)});
      mesh.faces.push_back({ring(i, j), ring(i + 1, j + 1), ring(i + 1, j)});
    }
  return mesh;
}

std::vector<Vec3> sample_surface(const TriangleMesh& mesh, std::size_t count, std::uint64_t seed) {
  std::vector<Vec3> points;
  if (mesh.empty() || count == 0) return points;
  std::vector<double> cdf(mesh.faces.size());
  double acc = 0.0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    acc += mesh.triangle_area(f);
    cdf[f] = acc;
  }
  if (!(acc > 0.0)) return points;
  points.reserve(count);
  StreamRng rng(hash_counters({seed, 0x5a4d9e1ULL}));
  for (std::size_t i = 0; i < count; ++i) {
    const double r = rng.uniform() * acc;
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), r);
    const std::size_t f = std::min<std::size_t>(it - cdf.begin(), cdf.size() - 1);
    double s = rng.uniform();
    double t = rng.uniform();
    if (s + t > 1.0) {
      s = 1.0 - s;
      t = 1.0 - t;
    }
    const auto& [a, b, c] = mesh.faces[f];
    const Vec3& va = mesh.vertices[a];
    points.push_back(va + (mesh.vertices[b] - va) * s + (mesh.vertices[c] - va) * t);
  }
  return points;
}

void write_ply_ascii(const TriangleMesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.precision(9);
  out << "ply\nformat ascii 1.0\n"
      << "element vertex " << mesh.vertices.size() << "\n"
      << "property float x\nproperty float y\nproperty float z\n"
      << "element face " << mesh.faces.size() << "\n"
      << "property list uchar int vertex_indices\nend_header\n";
  for (const auto& v : mesh.vertices) out << v.x << ' ' << v.y << ' ' << v.z << '\n';
  for (const auto& f : mesh.faces) out << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
}

void write_stl_ascii(const TriangleMesh& mesh, const std::filesystem::path& path,
                     const char* solid_name) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.precision(9);
  out << "solid " << solid_name << '\n';
  for (const auto& f : mesh.faces) {
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3& b = mesh.vertices[f[1]];
    const Vec3& c = mesh.vertices[f[2]];
    Vec3 n = cross(b - a, c - a);
    const double len = norm(n);
    if (len > 0.0) n = n / len;
    out << "  facet normal " << n.x << ' ' << n.y << ' ' << n.z << "\n    outer loop\n";
    for (const Vec3* v : {&a, &b, &c})
      out << "      vertex " << v->x << ' ' << v->y << ' ' << v->z << '\n';
    out << "    endloop\n  endfacet\n";
  }
  out << "endsolid " << solid_name << '\n';
}

}  // namespace tbl
