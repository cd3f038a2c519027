#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "tbl/geometry.hpp"
#include "tbl/mesh.hpp"

namespace tbl {

/// Intersection offset along a ray, meters.
inline constexpr double kIntersectEpsilon = 1e-6;
/// Endpoint tolerance for segment visibility, meters.
inline constexpr double kVisibilityEpsilon = 1e-5;

struct Sphere {
  Vec3 center;
  double radius = 1.0;
};

struct Box {
  Aabb box;
};

struct Mesh {
  TriangleMesh mesh;
};

struct Primitive {
  std::variant<Sphere, Box, Mesh> shape;
  double albedo = 0.8;
  /// Solid primitives count as occupied volume for ground-truth occupancy. Enclosing
  /// rooms are hollow.
  bool solid = true;
  std::string name;

  Aabb bounds() const;
  /// Throws std::invalid_argument on degenerate shapes or albedo outside [0, 1].
  void validate() const;
  /// Point-in-solid test. Meshes use ray parity and assume a closed surface.
  bool contains(const Vec3& p) const;
  TriangleMesh tessellate() const;
};

struct Hit {
  double t = 0.0;
  Vec3 point;
  Vec3 normal;  // unit, facing against the ray direction
  double albedo = 0.0;
  int primitive = -1;
};

/// Immutable after construction.
class Scene {
 public:
  Scene() = default;
  /// When bounds is empty (invalid) it is computed from the primitives.
  Scene(std::vector<Primitive> primitives, double ambient_rate, Aabb bounds = Aabb::empty());

  const std::vector<Primitive>& primitives() const { return primitives_; }
  const Aabb& bounds() const { return bounds_; }
  double ambient_rate() const { return ambient_rate_; }

  /// Nearest hit with t in (tmin, tmax).
  std::optional<Hit> intersect(const Ray& ray, double tmin = kIntersectEpsilon,
                               double tmax = std::numeric_limits<double>::infinity()) const;
  /// True iff no primitive crosses the open segment (a, b), shrunk by kVisibilityEpsilon at
  /// both ends.
  bool segment_visible(const Vec3& a, const Vec3& b) const;
  /// Point lies inside some solid primitive.
  bool occupied(const Vec3& p) const;
  /// Surface triangulation of the solid primitives (or all primitives).
  TriangleMesh surface_mesh(bool solid_only = false) const;
  /// Union of the bounds of the solid primitives.
  Aabb solid_bounds() const;

 private:
  std::vector<Primitive> primitives_;
  Aabb bounds_;
  double ambient_rate_ = 0.0;
};

struct CameraModel {
  Vec3 position;
  /// Columns: right, up, back (camera looks along -column(2)).
  Mat3 rotation;
  /// Horizontal field of view (along u), radians. Vertical extent follows the aspect ratio.
  double fov = 1.2;
  int width = 64;   // N_u
  int height = 64;  // N_v

  static CameraModel look_at(const Vec3& position, const Vec3& target, const Vec3& up, double fov,
                             int width, int height);
  void validate() const;
  int pixel_count() const { return width * height; }
  /// Row-major in u: index = u * height + v.
  int pixel_index(int u, int v) const { return u * height + v; }
  /// Pixel containing the given world direction, if inside the image.
  std::optional<std::pair<int, int>> project_direction(const Vec3& dir) const;
  bool operator==(const CameraModel&) const;
};

/// Primary ray through the center of pixel (u, v). Throws std::out_of_range.
Ray pixel_ray(const CameraModel& camera, int u, int v);

struct LidarRig {
  CameraModel camera;
  Vec3 laser;
  /// Resolved illumination points on the scene surface.
  std::vector<Vec3> targets;

  bool colocated(double tol = 0.01) const { return distance(laser, camera.position) <= tol; }
};

/// How illumination points are given: explicit surface points or laser directions.
struct IlluminationPlan {
  std::vector<Vec3> targets;
  std::vector<Vec3> directions;
};

/// Resolves the plan against the scene. Throws DataError if a target is not the first
/// surface hit from the laser or a direction misses the scene.
std::vector<Vec3> resolve_illumination(const Scene& scene, const Vec3& laser,
                                       const IlluminationPlan& plan);

/// Everything a scene description file holds.
struct SceneDescription {
  Scene scene;
  LidarRig rig;
};

SceneDescription parse_scene(const nlohmann::json& j);
SceneDescription load_scene(const std::filesystem::path& path);
nlohmann::json camera_to_json(const CameraModel& camera);
CameraModel camera_from_json(const nlohmann::json& j);
nlohmann::json vec_to_json(const Vec3& v);
Vec3 vec_from_json(const nlohmann::json& j);

}  // namespace tbl
