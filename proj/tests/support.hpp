#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "tbl/rng.hpp"
#include "tbl/scene.hpp"

namespace tbl::test {

inline constexpr double kPi = 3.14159265358979323846;

inline Primitive box_primitive(const Vec3& lo, const Vec3& hi, bool solid = true, double albedo = 0.8) {
  Primitive p;
  p.shape = Box{{lo, hi}};
  p.solid = solid;
  p.albedo = albedo;
  return p;
}

inline Primitive sphere_primitive(const Vec3& c, double r, double albedo = 0.8) {
  Primitive p;
  p.shape = Sphere{c, r};
  p.albedo = albedo;
  return p;
}

/// Hollow 4 m room with a floating box, a camera near the front wall and lights on the
/// side walls, floor and ceiling. Small sensor so tests stay fast.
inline SceneDescription small_room(int resolution = 24, bool with_box = true) {
  std::vector<Primitive> prims{box_primitive({-2, -2, -2}, {2, 2, 2}, false)};
  if (with_box) prims.push_back(box_primitive({-0.4, -0.4, -1.2}, {0.4, 0.4, -0.4}));
  SceneDescription d{Scene(prims, 0.0), {}};
  d.rig.camera = CameraModel::look_at({0, 0, 1.9}, {0, 0, 0}, {0, 1, 0}, kPi / 2, resolution, resolution);
  d.rig.laser = d.rig.camera.position;
  IlluminationPlan plan;
  for (double s : {-2.0, 2.0})
    for (auto [a, z] : {std::pair{-0.8, -0.8}, {0.8, -0.8}, {0.0, -1.6}, {0.0, -0.3}}) {
      plan.targets.push_back({s, a, z});
      plan.targets.push_back({a, s, z});
    }
  d.rig.targets = resolve_illumination(d.scene, d.rig.laser, plan);
  return d;
}

inline Vec3 random_unit(StreamRng& rng) {
  while (true) {
    const Vec3 v{2 * rng.uniform() - 1, 2 * rng.uniform() - 1, 2 * rng.uniform() - 1};
    const double n = norm(v);
    if (n > 1e-3 && n <= 1.0) return v / n;
  }
}

inline Vec3 random_in(StreamRng& rng, const Aabb& box) {
  const Vec3 e = box.extent();
  return {box.min.x + rng.uniform() * e.x, box.min.y + rng.uniform() * e.y,
          box.min.z + rng.uniform() * e.z};
}

/// Fresh empty scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("tbl_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace tbl::test
