#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "tbl/density.hpp"
#include "tbl/scene.hpp"
#include "tbl/signal.hpp"

namespace tbl {

/// Per-pixel ray depth in meters, u-major like the camera pixels.
struct DepthImage {
  int width = 0;
  int height = 0;
  std::vector<double> values;
  std::vector<bool> valid;

  DepthImage() = default;
  DepthImage(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h, 0.0), valid(static_cast<std::size_t>(w) * h, false) {}
  std::size_t size() const { return values.size(); }
};

/// Depth of the first surface per pixel; invalid where the ray misses.
DepthImage truth_depth_image(const Scene& scene, const CameraModel& camera);

/// Mean absolute depth error over pixels valid in both images and selected by `mask`
/// (empty mask selects all). Throws std::invalid_argument on size mismatch or when no
/// pixel qualifies.
double l1_depth(const DepthImage& pred, const DepthImage& truth, const std::vector<bool>& mask = {});
/// 10 log10(peak^2 / MSE), clamped at 100 dB.
double psnr_depth(const DepthImage& pred, const DepthImage& truth, double peak,
                  const std::vector<bool>& mask = {});

using PointCloud = std::vector<Vec3>;

/// Exact nearest-neighbour queries over a fixed point set.
class KdTree {
 public:
  explicit KdTree(const PointCloud& points);
  /// Euclidean distance to the nearest stored point.
  double nearest_distance(const Vec3& q) const;

 private:
  struct Node {
    int point = -1;
    int axis = 0;
    int left = -1, right = -1;
  };
  int build(std::vector<int>& idx, int begin, int end, int depth);
  void search(int node, const Vec3& q, double& best_sq) const;

  PointCloud points_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

/// Symmetric mean nearest-neighbour distance, unsquared:
/// 0.5 * (mean_a d(a, B) + mean_b d(b, A)).
double chamfer(const PointCloud& a, const PointCloud& b);
double chamfer_brute_force(const PointCloud& a, const PointCloud& b);

/// |pred & truth| / |pred | truth| over cells selected by `region` (empty = all).
/// An empty union yields 1.
double occupancy_iou(const std::vector<bool>& pred, const std::vector<bool>& truth,
                     const std::vector<bool>& region = {});

/// Ground-truth occupancy of the scene's solid primitives on the grid's node lattice.
OccupancyGrid truth_occupancy(const Scene& scene, const std::array<int, 3>& resolution,
                              const Aabb& bounds);
/// Lattice nodes inside `box`.
std::vector<bool> region_mask(const OccupancyGrid& lattice, const Aabb& box);

/// Pixels of `camera` whose first surface point is invisible from every illumination point.
std::vector<bool> behind_object_mask(const Scene& scene, const CameraModel& camera,
                                     const std::vector<Vec3>& targets);

/// Shadow-carving occupancy estimate. Starts fully occupied and marks free every node
/// crossed by the sensor->x_p and x_p->l segments of each lit pixel, with x_p recovered
/// from the measured time of flight along the pixel ray. Requires a colocated rig.
OccupancyGrid shadow_carve_baseline(const std::vector<PreprocessedView>& views,
                                    const std::array<int, 3>& resolution, const Aabb& bounds);

/// Distance along the unit ray from the sensor to x_p such that
/// |l - x_p| + |x_p - sensor| = path (closed form of the two-bounce path constraint).
double invert_two_bounce(const Vec3& sensor, const Vec3& direction, const Vec3& l, double path);

/// Cameras on a horizontal circle around `center`, looking at it.
std::vector<CameraModel> orbit_cameras(const Vec3& center, double radius, double height, int count,
                                       double fov, int width, int height_px);

}  // namespace tbl
