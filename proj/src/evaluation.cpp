#include "tbl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "tbl/errors.hpp"
#include "tbl/parallel.hpp"

namespace tbl {

DepthImage truth_depth_image(const Scene& scene, const CameraModel& camera) {
  DepthImage img(camera.width, camera.height);
  for (int u = 0; u < camera.width; ++u)
    for (int v = 0; v < camera.height; ++v) {
      const int i = camera.pixel_index(u, v);
      if (auto hit = scene.intersect(pixel_ray(camera, u, v))) {
        img.values[i] = hit->t;
        img.valid[i] = true;
      }
    }
  return img;
}

namespace {

template <typename F>
void for_each_compared(const DepthImage& pred, const DepthImage& truth, const std::vector<bool>& mask,
                       F&& f) {
  if (pred.size() != truth.size()) throw std::invalid_argument("depth images differ in size");
  if (!mask.empty() && mask.size() != pred.size())
    throw std::invalid_argument("mask size does not match the depth image");
  std::size_t count = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!pred.valid[i] || !truth.valid[i] || (!mask.empty() && !mask[i])) continue;
    f(pred.values[i] - truth.values[i]);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("no pixel is valid in both depth images");
}

}  // namespace

double l1_depth(const DepthImage& pred, const DepthImage& truth, const std::vector<bool>& mask) {
  double sum = 0.0;
  std::size_t n = 0;
  for_each_compared(pred, truth, mask, [&](double e) {
    sum += std::abs(e);
    ++n;
  });
  return sum / static_cast<double>(n);
}

double psnr_depth(const DepthImage& pred, const DepthImage& truth, double peak,
                  const std::vector<bool>& mask) {
  double sum = 0.0;
  std::size_t n = 0;
  for_each_compared(pred, truth, mask, [&](double e) {
    sum += e * e;
    ++n;
  });
  const double mse = sum / static_cast<double>(n);
  if (mse <= 0.0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(peak * peak / mse));
}

KdTree::KdTree(const PointCloud& points) : points_(points) {
  std::vector<int> idx(points_.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  nodes_.reserve(points_.size());
  root_ = build(idx, 0, static_cast<int>(idx.size()), 0);
}

int KdTree::build(std::vector<int>& idx, int begin, int end, int depth) {
  if (begin >= end) return -1;
  const int axis = depth % 3;
  const int mid = (begin + end) / 2;
  std::nth_element(idx.begin() + begin, idx.begin() + mid, idx.begin() + end,
                   [&](int a, int b) { return points_[a][axis] < points_[b][axis]; });
  const int node = static_cast<int>(nodes_.size());
  nodes_.push_back({idx[mid], axis, -1, -1});
  const int left = build(idx, begin, mid, depth + 1);
  const int right = build(idx, mid + 1, end, depth + 1);
  nodes_[node].left = left;
  nodes_[node].right = right;
  return node;
}

void KdTree::search(int node, const Vec3& q, double& best_sq) const {
  if (node < 0) return;
  const Node& n = nodes_[node];
  const Vec3& p = points_[n.point];
  const Vec3 d = q - p;
  best_sq = std::min(best_sq, dot(d, d));
  const double split = q[n.axis] - p[n.axis];
  const int near = split < 0.0 ? n.left : n.right;
  const int far = split < 0.0 ? n.right : n.left;
  search(near, q, best_sq);
  if (split * split < best_sq) search(far, q, best_sq);
}

double KdTree::nearest_distance(const Vec3& q) const {
  if (root_ < 0) throw std::invalid_argument("nearest-neighbour query on an empty point set");
  double best = std::numeric_limits<double>::infinity();
  search(root_, q, best);
  return std::sqrt(best);
}

namespace {

double mean_nearest(const PointCloud& from, const KdTree& to) {
  std::vector<double> d(from.size());
  parallel_for(from.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) d[i] = to.nearest_distance(from[i]);
  });
  double sum = 0.0;
  for (double x : d) sum += x;
  return sum / static_cast<double>(from.size());
}

}  // namespace

double chamfer(const PointCloud& a, const PointCloud& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("chamfer distance needs non-empty point sets");
  const KdTree ta(a), tb(b);
  return 0.5 * (mean_nearest(a, tb) + mean_nearest(b, ta));
}

double chamfer_brute_force(const PointCloud& a, const PointCloud& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("chamfer distance needs non-empty point sets");
  auto one_way = [](const PointCloud& x, const PointCloud& y) {
    double sum = 0.0;
    for (const auto& p : x) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : y) best = std::min(best, distance(p, q));
      sum += best;
    }
    return sum / static_cast<double>(x.size());
  };
  return 0.5 * (one_way(a, b) + one_way(b, a));
}

double occupancy_iou(const std::vector<bool>& pred, const std::vector<bool>& truth,
                     const std::vector<bool>& region) {
  if (pred.size() != truth.size()) throw std::invalid_argument("occupancy grids differ in size");
  if (!region.empty() && region.size() != pred.size())
    throw std::invalid_argument("region size does not match the occupancy grid");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!region.empty() && !region[i]) continue;
    inter += pred[i] && truth[i];
    uni += pred[i] || truth[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

Vec3 lattice_position(const std::array<int, 3>& res, const Aabb& bounds, int ix, int iy, int iz) {
  const Vec3 e = bounds.extent();
  return {bounds.min.x + (ix + 0.5) * e.x / res[0], bounds.min.y + (iy + 0.5) * e.y / res[1],
          bounds.min.z + (iz + 0.5) * e.z / res[2]};
}

std::size_t lattice_index(const std::array<int, 3>& res, int ix, int iy, int iz) {
  return (static_cast<std::size_t>(ix) * res[1] + iy) * res[2] + iz;
}

}  // namespace

OccupancyGrid truth_occupancy(const Scene& scene, const std::array<int, 3>& resolution,
                              const Aabb& bounds) {
  OccupancyGrid g{resolution, bounds, {}};
  g.cells.assign(static_cast<std::size_t>(resolution[0]) * resolution[1] * resolution[2], false);
  for (int ix = 0; ix < resolution[0]; ++ix)
    for (int iy = 0; iy < resolution[1]; ++iy)
      for (int iz = 0; iz < resolution[2]; ++iz)
        g.cells[lattice_index(resolution, ix, iy, iz)] =
            scene.occupied(lattice_position(resolution, bounds, ix, iy, iz));
  return g;
}

std::vector<bool> region_mask(const OccupancyGrid& lattice, const Aabb& box) {
  const auto& res = lattice.resolution;
  std::vector<bool> mask(lattice.cells.size(), false);
  for (int ix = 0; ix < res[0]; ++ix)
    for (int iy = 0; iy < res[1]; ++iy)
      for (int iz = 0; iz < res[2]; ++iz)
        mask[lattice_index(res, ix, iy, iz)] =
            box.contains(lattice_position(res, lattice.bounds, ix, iy, iz));
  return mask;
}

std::vector<bool> behind_object_mask(const Scene& scene, const CameraModel& camera,
                                     const std::vector<Vec3>& targets) {
  std::vector<bool> mask(camera.pixel_count(), false);
  for (int u = 0; u < camera.width; ++u)
    for (int v = 0; v < camera.height; ++v) {
      const auto hit = scene.intersect(pixel_ray(camera, u, v));
      if (!hit) continue;
      bool seen = false;
      for (const auto& l : targets)
        if (distance(l, hit->point) > 1e-6 && scene.segment_visible(hit->point, l)) {
          seen = true;
          break;
        }
      mask[camera.pixel_index(u, v)] = !seen;
    }
  return mask;
}

double invert_two_bounce(const Vec3& sensor, const Vec3& direction, const Vec3& l, double path) {
  const Vec3 v = l - sensor;
  const double denom = 2.0 * (path - dot(v, direction));
  if (!(denom > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return (path * path - dot(v, v)) / denom;
}

namespace {

// Marks every lattice node whose cell the segment [a, b) passes through as free.
void carve_segment(OccupancyGrid& g, const Vec3& a, const Vec3& b) {
  const Vec3 e = g.bounds.extent();
  const Vec3 cell{e.x / g.resolution[0], e.y / g.resolution[1], e.z / g.resolution[2]};
  const double step = 0.5 * std::min({cell.x, cell.y, cell.z});
  const double len = distance(a, b);
  const int n = static_cast<int>(std::ceil(len / step));
  for (int i = 0; i <= n; ++i) {
    const Vec3 p = a + (b - a) * (static_cast<double>(i) / std::max(n, 1));
    if (!g.bounds.contains(p)) continue;
    const int ix = std::clamp(static_cast<int>((p.x - g.bounds.min.x) / cell.x), 0, g.resolution[0] - 1);
    const int iy = std::clamp(static_cast<int>((p.y - g.bounds.min.y) / cell.y), 0, g.resolution[1] - 1);
    const int iz = std::clamp(static_cast<int>((p.z - g.bounds.min.z) / cell.z), 0, g.resolution[2] - 1);
    g.cells[lattice_index(g.resolution, ix, iy, iz)] = false;
  }
}

}  // namespace

OccupancyGrid shadow_carve_baseline(const std::vector<PreprocessedView>& views,
                                    const std::array<int, 3>& resolution, const Aabb& bounds) {
  OccupancyGrid g{resolution, bounds, {}};
  g.cells.assign(static_cast<std::size_t>(resolution[0]) * resolution[1] * resolution[2], true);
  const Vec3 e = bounds.extent();
  const double margin = std::max({e.x / resolution[0], e.y / resolution[1], e.z / resolution[2]});
  for (const auto& view : views) {
    if (distance(view.laser, view.camera.position) > 0.01)
      throw DataError("shadow carving requires the laser colocated with the sensor");
    const CameraModel& cam = view.camera;
    for (int u = 0; u < cam.width; ++u)
      for (int v = 0; v < cam.height; ++v) {
        const int i = cam.pixel_index(u, v);
        if (!view.valid[i] || !view.lit[i] || !std::isfinite(view.tof[i])) continue;
        const Ray ray = pixel_ray(cam, u, v);
        const double path = kSpeedOfLight * view.tof[i] - view.d1;
        const double d3 = invert_two_bounce(ray.origin, ray.direction, view.l, path);
        if (!std::isfinite(d3) || d3 <= margin) continue;
        const Vec3 xp = ray.at(d3);
        // Stop a cell short of the surface point and of l so the walls themselves survive.
        carve_segment(g, ray.origin, ray.at(d3 - margin));
        const Vec3 to_l = view.l - xp;
        const double d2 = norm(to_l);
        if (d2 > 2.0 * margin) {
          const Vec3 dir = to_l / d2;
          carve_segment(g, xp + dir * margin, view.l - dir * margin);
        }
      }
  }
  return g;
}

std::vector<CameraModel> orbit_cameras(const Vec3& center, double radius, double height, int count,
                                       double fov, int width, int height_px) {
  if (count < 1) throw std::invalid_argument("orbit needs at least one camera");
  std::vector<CameraModel> cams;
  cams.reserve(count);
  for (int i = 0; i < count; ++i) {
    const double a = 2.0 * std::numbers::pi * i / count;
    const Vec3 pos = center + Vec3{radius * std::sin(a), height, radius * std::cos(a)};
    cams.push_back(CameraModel::look_at(pos, center, {0.0, 1.0, 0.0}, fov, width, height_px));
  }
  return cams;
}

}  // namespace tbl
