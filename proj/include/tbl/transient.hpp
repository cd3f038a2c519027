#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "tbl/scene.hpp"

namespace tbl {

/// Per-pixel photon-count histograms for one illumination point, stored (u-major, v, t).
struct TransientImage {
  CameraModel camera;
  Vec3 laser;
  Vec3 target;  // illumination point l_k
  int k = 0;
  int num_bins = 0;      // N_t
  double t_res = 0.0;    // seconds per bin
  double t_start = 0.0;  // seconds, time of bin 0's leading edge
  /// Trailing bins dropped by temporal downsampling.
  int dropped_bins = 0;
  /// Pulses whose peak fell outside the recorded window.
  int clipped_pulses = 0;
  bool poisson = false;
  std::vector<float> data;

  TransientImage() = default;
  TransientImage(const CameraModel& cam, int nt, double t_res_, double t_start_ = 0.0);

  int width() const { return camera.width; }
  int height() const { return camera.height; }
  std::size_t offset(int u, int v) const {
    return (static_cast<std::size_t>(u) * camera.height + v) * num_bins;
  }
  std::span<float> histogram(int u, int v) { return {data.data() + offset(u, v), static_cast<std::size_t>(num_bins)}; }
  std::span<const float> histogram(int u, int v) const {
    return {data.data() + offset(u, v), static_cast<std::size_t>(num_bins)};
  }
  double duration() const { return num_bins * t_res; }
  double bin_center(double bin) const { return t_start + (bin + 0.5) * t_res; }
  double total() const;
  void validate() const;
};

/// Gaussian laser pulse.
struct PulseModel {
  double fwhm = 128e-12;  // seconds
  double amplitude = 1000.0;

  double sigma() const;
  /// Integral of the pulse centered at `center` over [lo, hi].
  double mass(double center, double lo, double hi) const;
  /// Pulse integrated over bins of width t_res, centered on the middle of bin `half_width`,
  /// 2*half_width+1 entries, normalized to unit energy (sum of squares = 1).
  std::vector<double> template_samples(double t_res) const;
};

struct NoiseModel {
  double ambient_rate = 0.0;  // expected photons per bin per pixel
  bool poisson_sampling = false;
  std::uint64_t seed = 0;
};

struct TwoBouncePath {
  double d1 = 0.0, d2 = 0.0, d3 = 0.0;
  double t_peak = 0.0;  // seconds; meaningful only when lit
  bool lit = false;
  /// x_p coincides with l (d2 < 1e-6 m); carries one-bounce light only.
  bool direct = false;
};

TwoBouncePath compute_path(const LidarRig& rig, const Scene& scene, const Vec3& l, const Vec3& x_p);

/// Two-bounce Lambertian weight between virtual source l and virtual detector x_p, seen
/// from sensor. Zero when any cosine factor is non-positive.
double two_bounce_weight(double albedo_l, const Vec3& n_l, const Vec3& l, double albedo_p,
                         const Vec3& n_p, const Vec3& x_p, const Vec3& sensor);

enum class PixelStatus : std::uint8_t { Shadow = 0, Lit = 1, Direct = 2, Empty = 3 };

/// Simulator ground truth for one illumination point.
struct ViewTruth {
  Vec3 target;
  double d1 = 0.0;
  std::vector<PixelStatus> status;   // per pixel, u-major
  std::vector<double> path_length;   // d1 + d2 + d3, meters; NaN unless lit
  int direct_pixel = -1;             // pixel index receiving the one-bounce return
  double one_bounce_time = 0.0;      // seconds

  bool lit(int pixel) const { return status[pixel] == PixelStatus::Lit; }
};

struct SimulatedView {
  TransientImage image;
  ViewTruth truth;
};

struct SimulationParams {
  PulseModel pulse;
  NoiseModel noise;
  int num_bins = 391;
  double t_res = 128e-12;
  double t_start = 0.0;
  /// One-bounce amplitude relative to the largest two-bounce weight in the view.
  double one_bounce_gain = 10.0;
};

SimulatedView simulate_view(const Scene& scene, const LidarRig& rig, int k,
                            const SimulationParams& params);

/// Per-pixel ray depth (distance from sensor to first hit, meters); NaN where the ray misses.
std::vector<double> ground_truth_depth(const Scene& scene, const CameraModel& camera);

TransientImage downsample_temporal(const TransientImage& img, int factor);
TransientImage downsample_spatial(const TransientImage& img, int factor);

/// Number of bins needed to cover `duration` seconds at t_res (rounded).
int bins_for_duration(double duration, double t_res);

nlohmann::json transient_metadata(const TransientImage& img);
void write_transient(const TransientImage& img, const std::filesystem::path& path);
TransientImage read_transient(const std::filesystem::path& path);

}  // namespace tbl
