#include "tbl/scene.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "tbl/errors.hpp"

namespace tbl {

namespace {

std::optional<double> intersect_sphere(const Sphere& s, const Ray& ray, double tmin, double tmax) {
  const Vec3 oc = ray.origin - s.center;
  const double b = dot(oc, ray.direction);
  const double c = dot(oc, oc) - s.radius * s.radius;
  const double disc = b * b - c;
  if (disc < 0.0) return std::nullopt;
  const double root = std::sqrt(disc);
  // Numerically stable pair of roots.
  const double q = b > 0.0 ? -b - root : -b + root;
  double t0 = q;
  double t1 = q != 0.0 ? c / q : -b;
  if (t0 > t1) std::swap(t0, t1);
  if (t0 > tmin && t0 < tmax) return t0;
  if (t1 > tmin && t1 < tmax) return t1;
  return std::nullopt;
}

std::optional<double> intersect_box(const Aabb& box, const Ray& ray, double tmin, double tmax) {
  double t0, t1;
  if (!ray_box_interval(ray, box, t0, t1)) return std::nullopt;
  if (t0 > tmin && t0 < tmax) return t0;
  if (t1 > tmin && t1 < tmax) return t1;
  return std::nullopt;
}

Vec3 box_normal(const Aabb& box, const Vec3& p) {
  int axis = 0;
  double best = std::numeric_limits<double>::infinity();
  double sign = 1.0;
  for (int a = 0; a < 3; ++a) {
    const double dmin = std::abs(p[a] - box.min[a]);
    const double dmax = std::abs(p[a] - box.max[a]);
    if (dmin < best) {
      best = dmin;
      axis = a;
      sign = -1.0;
    }
    if (dmax < best) {
      best = dmax;
      axis = a;
      sign = 1.0;
    }
  }
  Vec3 n;
  n[axis] = sign;
  return n;
}

// Moller-Trumbore. Zero-area triangles never report a hit.
std::optional<double> intersect_triangle(const Vec3& a, const Vec3& b, const Vec3& c, const Ray& ray,
                                         double tmin, double tmax) {
  const Vec3 e1 = b - a;
  const Vec3 e2 = c - a;
  const Vec3 p = cross(ray.direction, e2);
  const double det = dot(e1, p);
  const double area2 = norm(cross(e1, e2));
  if (area2 <= 1e-14 || std::abs(det) <= 1e-14 * area2) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 s = ray.origin - a;
  const double u = dot(s, p) * inv;
  if (u < 0.0 || u > 1.0) return std::nullopt;
  const Vec3 q = cross(s, e1);
  const double v = dot(ray.direction, q) * inv;
  if (v < 0.0 || u + v > 1.0) return std::nullopt;
  const double t = dot(e2, q) * inv;
  if (t > tmin && t < tmax) return t;
  return std::nullopt;
}

struct PrimitiveHit {
  double t;
  Vec3 normal;  // unoriented
};

std::optional<PrimitiveHit> intersect_primitive(const Primitive& prim, const Ray& ray, double tmin,
                                                double tmax) {
  return std::visit(
      [&](const auto& shape) -> std::optional<PrimitiveHit> {
        using T = std::decay_t<decltype(shape)>;
        if constexpr (std::is_same_v<T, Sphere>) {
          const auto t = intersect_sphere(shape, ray, tmin, tmax);
          if (!t) return std::nullopt;
          return PrimitiveHit{*t, normalize(ray.at(*t) - shape.center)};
        } else if constexpr (std::is_same_v<T, Box>) {
          const auto t = intersect_box(shape.box, ray, tmin, tmax);
          if (!t) return std::nullopt;
          return PrimitiveHit{*t, box_normal(shape.box, ray.at(*t))};
        } else {
          const auto& m = shape.mesh;
          double t0, t1;
          const Aabb bb = m.bounds().dilated(1e-9);
          if (!ray_box_interval(ray, bb, t0, t1) || t1 < tmin || t0 > tmax) return std::nullopt;
          std::optional<PrimitiveHit> best;
          double limit = tmax;
          for (const auto& f : m.faces) {
            const Vec3& a = m.vertices[f[0]];
            const Vec3& b = m.vertices[f[1]];
            const Vec3& c = m.vertices[f[2]];
            if (const auto t = intersect_triangle(a, b, c, ray, tmin, limit)) {
              limit = *t;
              best = PrimitiveHit{*t, normalize(cross(b - a, c - a))};
            }
          }
          return best;
        }
      },
      prim.shape);
}

}  // namespace

Aabb Primitive::bounds() const {
  return std::visit(
      [](const auto& shape) -> Aabb {
        using T = std::decay_t<decltype(shape)>;
        if constexpr (std::is_same_v<T, Sphere>) {
          const Vec3 r{shape.radius, shape.radius, shape.radius};
          return {shape.center - r, shape.center + r};
        } else if constexpr (std::is_same_v<T, Box>) {
          return shape.box;
        } else {
          return shape.mesh.bounds();
        }
      },
      shape);
}

void Primitive::validate() const {
  if (!(albedo >= 0.0 && albedo <= 1.0))
    throw std::invalid_argument("primitive '" + name + "': albedo must lie in [0, 1]");
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Sphere>) {
          if (!(s.radius > 0.0) || !s.center.finite())
            throw std::invalid_argument("primitive '" + name + "': sphere radius must be > 0");
        } else if constexpr (std::is_same_v<T, Box>) {
          if (!s.box.valid())
            throw std::invalid_argument("primitive '" + name + "': box min must be < max");
        } else {
          if (!s.mesh.indices_valid())
            throw std::invalid_argument("primitive '" + name + "': face index out of range");
        }
      },
      shape);
}

bool Primitive::contains(const Vec3& p) const {
  return std::visit(
      [&](const auto& s) -> bool {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Sphere>) {
          return dot(p - s.center, p - s.center) <= s.radius * s.radius;
        } else if constexpr (std::is_same_v<T, Box>) {
          return s.box.contains(p);
        } else {
          if (!s.mesh.bounds().contains(p)) return false;
          // Slightly skewed direction avoids grazing shared edges.
          const Ray ray{p, normalize(Vec3{1.0, 1e-3, 2e-3})};
          int crossings = 0;
          for (const auto& f : s.mesh.faces)
            if (intersect_triangle(s.mesh.vertices[f[0]], s.mesh.vertices[f[1]],
                                   s.mesh.vertices[f[2]], ray, 0.0,
                                   std::numeric_limits<double>::infinity()))
              ++crossings;
          return crossings % 2 == 1;
        }
      },
      shape);
}

TriangleMesh Primitive::tessellate() const {
  return std::visit(
      [](const auto& s) -> TriangleMesh {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Sphere>) {
          return sphere_mesh(s.center, s.radius);
        } else if constexpr (std::is_same_v<T, Box>) {
          return box_mesh(s.box);
        } else {
          return s.mesh;
        }
      },
      shape);
}

Scene::Scene(std::vector<Primitive> primitives, double ambient_rate, Aabb bounds)
    : primitives_(std::move(primitives)), bounds_(bounds), ambient_rate_(ambient_rate) {
  if (!(ambient_rate_ >= 0.0)) throw std::invalid_argument("ambient_rate must be >= 0");
  Aabb all = Aabb::empty();
  for (const auto& p : primitives_) {
    p.validate();
    const Aabb b = p.bounds();
    all.expand(b.min);
    all.expand(b.max);
  }
  if (!bounds_.valid()) {
    bounds_ = primitives_.empty() ? Aabb{{-1, -1, -1}, {1, 1, 1}} : all;
  } else if (!primitives_.empty() && !bounds_.contains(all, 1e-9)) {
    throw std::invalid_argument("scene bounds do not enclose all primitives");
  }
}

std::optional<Hit> Scene::intersect(const Ray& ray, double tmin, double tmax) const {
  std::optional<Hit> best;
  double limit = tmax;
  for (std::size_t i = 0; i < primitives_.size(); ++i) {
    const auto h = intersect_primitive(primitives_[i], ray, tmin, limit);
    // Ties resolve to the lowest index so the result is permutation independent up to
    // exactly coincident surfaces.
    if (h && (!best || h->t < limit)) {
      limit = h->t;
      Vec3 n = h->normal;
      if (dot(n, ray.direction) > 0.0) n = -n;
      best = Hit{h->t, ray.at(h->t), n, primitives_[i].albedo, static_cast<int>(i)};
    }
  }
  return best;
}

bool Scene::segment_visible(const Vec3& a, const Vec3& b) const {
  const Vec3 d = b - a;
  const double len = norm(d);
  if (len <= 2.0 * kVisibilityEpsilon) return true;
  const Ray ray{a, d / len};
  for (const auto& prim : primitives_)
    if (intersect_primitive(prim, ray, kVisibilityEpsilon, len - kVisibilityEpsilon)) return false;
  return true;
}

bool Scene::occupied(const Vec3& p) const {
  for (const auto& prim : primitives_)
    if (prim.solid && prim.contains(p)) return true;
  return false;
}

TriangleMesh Scene::surface_mesh(bool solid_only) const {
  TriangleMesh out;
  for (const auto& prim : primitives_)
    if (!solid_only || prim.solid) out.append(prim.tessellate());
  return out;
}

Aabb Scene::solid_bounds() const {
  Aabb out = Aabb::empty();
  for (const auto& prim : primitives_)
    if (prim.solid) {
      const Aabb b = prim.bounds();
      out.expand(b.min);
      out.expand(b.max);
    }
  return out;
}

CameraModel CameraModel::look_at(const Vec3& position, const Vec3& target, const Vec3& up,
                                 double fov, int width, int height) {
  const Vec3 back = normalize(position - target);
  const Vec3 right = normalize(cross(up, back));
  const Vec3 true_up = cross(back, right);
  CameraModel cam;
  cam.position = position;
  cam.rotation = Mat3::from_columns(right, true_up, back);
  cam.fov = fov;
  cam.width = width;
  cam.height = height;
  cam.validate();
  return cam;
}

void CameraModel::validate() const {
  if (width <= 0 || height <= 0) throw std::invalid_argument("camera resolution must be positive");
  if (!(fov > 0.0 && fov < std::numbers::pi))
    throw std::invalid_argument("camera fov must lie in (0, pi)");
  if (rotation.orthonormality_error() > 1e-9 || std::abs(rotation.determinant() - 1.0) > 1e-9)
    throw std::invalid_argument("camera rotation must be a proper orthonormal matrix");
  if (!position.finite()) throw std::invalid_argument("camera position must be finite");
}

bool CameraModel::operator==(const CameraModel& o) const {
  return position == o.position && rotation.m == o.rotation.m && fov == o.fov &&
         width == o.width && height == o.height;
}

std::optional<std::pair<int, int>> CameraModel::project_direction(const Vec3& dir) const {
  const Vec3 local{dot(dir, rotation.column(0)), dot(dir, rotation.column(1)),
                   dot(dir, rotation.column(2))};
  if (local.z >= 0.0) return std::nullopt;
  const double half = std::tan(0.5 * fov);
  const double aspect = static_cast<double>(height) / width;
  const double sx = (local.x / -local.z) / half;
  const double sy = (local.y / -local.z) / (half * aspect);
  const double fu = (sx + 1.0) * 0.5 * width;
  const double fv = (1.0 - sy) * 0.5 * height;
  const int u = static_cast<int>(std::floor(fu));
  const int v = static_cast<int>(std::floor(fv));
  if (u < 0 || u >= width || v < 0 || v >= height) return std::nullopt;
  return std::pair{u, v};
}

Ray pixel_ray(const CameraModel& camera, int u, int v) {
  if (u < 0 || u >= camera.width || v < 0 || v >= camera.height)
    throw std::out_of_range("pixel (" + std::to_string(u) + ", " + std::to_string(v) +
                            ") outside image");
  const double half = std::tan(0.5 * camera.fov);
  const double aspect = static_cast<double>(camera.height) / camera.width;
  const double x = (2.0 * (u + 0.5) / camera.width - 1.0) * half;
  const double y = (1.0 - 2.0 * (v + 0.5) / camera.height) * half * aspect;
  const Vec3 dir = normalize(camera.rotation * Vec3{x, y, -1.0});
  return {camera.position, dir};
}

std::vector<Vec3> resolve_illumination(const Scene& scene, const Vec3& laser,
                                       const IlluminationPlan& plan) {
  std::vector<Vec3> out;
  for (const auto& target : plan.targets) {
    const Vec3 d = target - laser;
    const double len = norm(d);
    if (len <= kIntersectEpsilon) throw DataError("illumination target coincides with laser");
    const auto hit = scene.intersect({laser, d / len});
    if (!hit || std::abs(hit->t - len) > 1e-4)
      throw DataError("illumination target is not the first surface hit from the laser");
    out.push_back(hit->point);
  }
  for (const auto& dir : plan.directions) {
    const auto hit = scene.intersect({laser, normalize(dir)});
    if (!hit) throw DataError("laser direction misses the scene");
    out.push_back(hit->point);
  }
  if (out.empty()) throw DataError("illumination plan is empty");
  return out;
}

nlohmann::json vec_to_json(const Vec3& v) { return nlohmann::json::array({v.x, v.y, v.z}); }

Vec3 vec_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("expected a 3-vector, got " + j.dump());
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

nlohmann::json camera_to_json(const CameraModel& c) {
  return {{"position", vec_to_json(c.position)},
          {"rotation", c.rotation.m},
          {"fov", c.fov},
          {"resolution", {c.width, c.height}}};
}

CameraModel camera_from_json(const nlohmann::json& j) {
  try {
    const auto res = j.at("resolution");
    const int w = res.at(0).get<int>();
    const int h = res.at(1).get<int>();
    double fov = 0.0;
    if (j.contains("fov"))
      fov = j["fov"].get<double>();
    else
      fov = j.at("fov_deg").get<double>() * std::numbers::pi / 180.0;
    const Vec3 pos = vec_from_json(j.at("position"));
    if (j.contains("rotation")) {
      CameraModel c;
      c.position = pos;
      c.rotation.m = j["rotation"].get<std::array<double, 9>>();
      c.fov = fov;
      c.width = w;
      c.height = h;
      c.validate();
      return c;
    }
    const Vec3 up = j.contains("up") ? vec_from_json(j["up"]) : Vec3{0, 1, 0};
    return CameraModel::look_at(pos, vec_from_json(j.at("look_at")), up, fov, w, h);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("camera: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("camera: ") + e.what());
  }
}

namespace {

Primitive parse_primitive(const nlohmann::json& j) {
  Primitive p;
  p.albedo = j.value("albedo", 0.8);
  p.solid = j.value("solid", true);
  p.name = j.value("name", "");
  const std::string type = j.at("type").get<std::string>();
  if (type == "sphere") {
    p.shape = Sphere{vec_from_json(j.at("center")), j.at("radius").get<double>()};
  } else if (type == "box") {
    p.shape = Box{{vec_from_json(j.at("min")), vec_from_json(j.at("max"))}};
  } else if (type == "mesh") {
    TriangleMesh m;
    for (const auto& v : j.at("vertices")) m.vertices.push_back(vec_from_json(v));
    for (const auto& f : j.at("faces")) m.faces.push_back(f.get<std::array<std::uint32_t, 3>>());
    p.shape = Mesh{std::move(m)};
  } else {
    throw ConfigError("unknown primitive type '" + type + "'");
  }
  return p;
}

}  // namespace

SceneDescription parse_scene(const nlohmann::json& j) {
  try {
    std::vector<Primitive> prims;
    for (const auto& pj : j.at("primitives")) prims.push_back(parse_primitive(pj));
    Aabb bounds = Aabb::empty();
    if (j.contains("bounds"))
      bounds = {vec_from_json(j["bounds"].at("min")), vec_from_json(j["bounds"].at("max"))};
    SceneDescription out{Scene(std::move(prims), j.value("ambient_rate", 0.0), bounds), {}};
    out.rig.camera = camera_from_json(j.at("camera"));
    out.rig.laser = j.contains("laser") ? vec_from_json(j["laser"].at("position"))
                                        : out.rig.camera.position;
    IlluminationPlan plan;
    const auto& illum = j.at("illumination");
    if (illum.contains("targets"))
      for (const auto& t : illum["targets"]) plan.targets.push_back(vec_from_json(t));
    if (illum.contains("directions"))
      for (const auto& d : illum["directions"]) plan.directions.push_back(vec_from_json(d));
    out.rig.targets = resolve_illumination(out.scene, out.rig.laser, plan);
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scene description: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("scene description: ") + e.what());
  }
}

SceneDescription load_scene(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open scene file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("scene file " + path.string() + ": " + e.what());
  }
  return parse_scene(j);
}

}  // namespace tbl
