#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tbl/geometry.hpp"

namespace tbl {

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
inline double softplus_inverse(double s) { return s > 30.0 ? s : std::log(std::expm1(s)); }
inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Location of a point in the grid lattice: the lower corner node and the fractional
/// offsets toward the upper corner along each axis.
struct GridCoord {
  double fx = 0.0, fy = 0.0, fz = 0.0;
  std::uint32_t base = 0;
  bool inside = false;
  /// Per-axis flag: coordinate clamped in the outer half-cell, so it does not vary with
  /// position there.
  std::array<bool, 3> clamped{false, false, false};
};

/// Non-negative density field sigma(x) = softplus(trilinear(theta, x)) on a regular lattice
/// of nodes placed at voxel centers inside `bounds`. Parameters are stored x-major:
/// index = (ix * ny + iy) * nz + iz. Density outside bounds is zero.
class DensityGrid {
 public:
  DensityGrid() = default;
  DensityGrid(std::array<int, 3> resolution, const Aabb& bounds, double initial_sigma = 1e-2);

  const std::array<int, 3>& resolution() const { return res_; }
  const Aabb& bounds() const { return bounds_; }
  Vec3 cell_size() const { return cell_; }
  std::size_t size() const { return theta_.size(); }
  std::span<double> theta() { return theta_; }
  std::span<const double> theta() const { return theta_; }

  std::size_t index(int ix, int iy, int iz) const {
    return (static_cast<std::size_t>(ix) * res_[1] + iy) * res_[2] + iz;
  }
  Vec3 node_position(int ix, int iy, int iz) const;
  std::array<std::size_t, 3> strides() const {
    return {static_cast<std::size_t>(res_[1]) * res_[2], static_cast<std::size_t>(res_[2]), 1};
  }

  GridCoord locate(const Vec3& p) const;
  /// Trilinear interpolation of theta at a located point.
  double interpolate(const GridCoord& c) const;
  /// Spatial gradient of the interpolated theta.
  Vec3 interpolate_gradient(const GridCoord& c) const;
  double sigma(const Vec3& p) const;
  double node_sigma(int ix, int iy, int iz) const { return softplus(theta_[index(ix, iy, iz)]); }

  /// Adds g * dtrilinear/dtheta at coordinate c into grad.
  void scatter(const GridCoord& c, double g, std::span<double> grad) const;

 private:
  std::array<int, 3> res_{0, 0, 0};
  Aabb bounds_{};
  Vec3 cell_;
  std::vector<double> theta_;
};

struct SamplingConfig {
  int coarse = 64;  // P_c
  int fine = 64;    // P_f
  double near = 0.0;
  double far = 10.0;
  bool stratified = true;
  std::uint64_t seed = 0;
  /// Secondary rays: coarse count over the whole segment (defines the spacing delta) and
  /// importance-sampled extra samples.
  int secondary_coarse = 48;
  int secondary_fine = 16;
  /// Standoff at both secondary-ray endpoints, in multiples of the coarse spacing.
  double standoff = 2.0;

  void validate() const;
};

/// One density evaluation along a ray.
struct RaySample {
  double lambda = 0.0;  // distance (primary) or segment fraction (secondary)
  double delta = 0.0;
  double sigma = 0.0;
  double dsigma_draw = 0.0;  // d sigma / d raw = sigmoid(raw)
  GridCoord coord;
};

/// Cached forward pass along one ray.
struct RaySamples {
  std::vector<RaySample> samples;
  std::vector<double> alpha;
  std::vector<double> transmittance;  // T_i, T_1 = 1
  std::vector<double> weight;         // T_i * alpha_i
};

/// Alpha compositing over given sample distances/deltas/densities.
void composite(RaySamples& rs);

/// Coarse primary sample distances over [near, far]; bin centers unless stratified.
std::vector<double> coarse_distances(int count, double near, double far, bool stratified,
                                     std::uint64_t key);
/// Inverse-transform sampling of `count` distances from per-stratum weights over the
/// uniform partition of [near, far] into weights.size() strata.
std::vector<double> importance_distances(std::span<const double> weights, double near, double far,
                                         int count, bool stratified, std::uint64_t key);

/// Sorted, strictly increasing union of coarse and fine distances for a primary ray.
/// `grid` provides the coarse densities for importance sampling; null skips the fine pass.
std::vector<double> sample_primary(const DensityGrid* grid, const Ray& ray, const SamplingConfig& cfg,
                                   std::uint64_t key);

struct DepthRender {
  double depth = 0.0;       // d_3 hat
  double weight_sum = 0.0;  // sum of w_i
  double near = 0.0, far = 0.0;
  RaySamples cache;
};

/// Renders expected depth at explicit sample distances (delta_1 = lambda_1 - near).
DepthRender render_depth_at(const DensityGrid& grid, const Ray& ray, std::span<const double> distances,
                            double near);
/// Full primary render: clip [near, far] to the grid bounds, coarse + fine sampling.
DepthRender render_depth(const DensityGrid& grid, const Ray& ray, const SamplingConfig& cfg,
                         std::uint64_t key);

/// Fractions of the segment (0 = x_p, 1 = l) and their quadrature widths.
struct SegmentSamples {
  std::vector<double> fractions;
  std::vector<double> widths;
};

/// Coarse segment fractions at cell centers of a `count`-way partition, excluding the
/// `standoff`-cell margin at both ends. Widths are the Voronoi cells clipped to the margin.
SegmentSamples secondary_fractions(int count, double standoff);
/// Adds importance-sampled fractions drawn from coarse weights and recomputes widths.
SegmentSamples refine_fractions(const SegmentSamples& coarse, std::span<const double> weights,
                                int count, double lo, double hi, bool stratified, std::uint64_t key);

struct TransmittanceRender {
  double transmittance = 1.0;  // p hat
  double length = 0.0;         // |l - x_p|
  Vec3 from, to;
  SegmentSamples segment;
  RaySamples cache;
};

TransmittanceRender render_transmittance_at(const DensityGrid& grid, const Vec3& from, const Vec3& to,
                                            const SegmentSamples& segment);
/// Secondary-ray render from x_p to l. Throws std::invalid_argument for |l - x_p| <= 1e-6.
TransmittanceRender render_transmittance(const DensityGrid& grid, const Vec3& from, const Vec3& to,
                                         const SamplingConfig& cfg, std::uint64_t key);

/// Gradient record for one sample: d loss / d raw at a lattice coordinate.
struct GradEntry {
  GridCoord coord;
  double g = 0.0;
};

/// Appends d(loss)/d(raw) entries for d loss / d depth = upstream.
void backward_depth(const DepthRender& r, double upstream, std::vector<GradEntry>& out);
/// Appends entries for d loss / d p = upstream (sample positions held fixed).
void backward_transmittance(const TransmittanceRender& r, double upstream, std::vector<GradEntry>& out);
/// d p / d from, holding l and the segment fractions fixed.
Vec3 transmittance_position_gradient(const DensityGrid& grid, const TransmittanceRender& r);

/// Scatters entries into a dense gradient buffer the size of the grid.
void accumulate(const DensityGrid& grid, std::span<const GradEntry> entries, std::span<double> grad);

/// Lattice of booleans with the grid's resolution; true iff sigma at the node >= threshold.
struct OccupancyGrid {
  std::array<int, 3> resolution{0, 0, 0};
  Aabb bounds;
  std::vector<bool> cells;  // same indexing as DensityGrid
};

OccupancyGrid extract_occupancy(const DensityGrid& grid, double sigma_threshold);

void write_checkpoint(const DensityGrid& grid, const std::filesystem::path& path);
DensityGrid read_checkpoint(const std::filesystem::path& path);

}  // namespace tbl
