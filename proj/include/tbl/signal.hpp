#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "tbl/transient.hpp"

namespace tbl {

/// Matched-filter result for one histogram.
struct PeakEstimate {
  double t_peak = std::numeric_limits<double>::quiet_NaN();  // seconds; NaN when no pulse
  double confidence = 0.0;                                   // in [0, 1]
  double correlation = 0.0;                                  // raw correlation maximum
};

/// Correlates `histogram` with a unit-energy `pulse_template` whose peak sits in the middle
/// entry. Confidence is the correlation maximum divided by the histogram's L2 norm, which
/// equals 1 for a clean pulse of any amplitude. The peak is refined to sub-bin precision
/// by a parabola through the three correlation values around the argmax.
PeakEstimate cross_correlate(std::span<const float> histogram, std::span<const double> pulse_template,
                             double t_res, double t_start = 0.0);

struct PreprocessParams {
  double shadow_threshold = 0.15;            // tau
  double one_bounce_angle = 0.5 * 3.14159265358979323846 / 180.0;  // radians
  /// Estimate l and d1 from the one-bounce return; otherwise take them from the metadata.
  bool estimate_source = true;
};

/// Pixels whose ray lies within `angle_thresh` of the sensor-to-l direction, plus the pixel
/// whose footprint contains that direction.
std::vector<bool> one_bounce_pixels(const CameraModel& camera, const Vec3& l, double angle_thresh);

/// Zeroes every bin of the one-bounce pixels.
TransientImage filter_one_bounce(const TransientImage& img, const Vec3& l, double angle_thresh);

std::vector<bool> threshold_shadow(std::span<const double> confidence, double tau);

struct SourceEstimate {
  Vec3 l;
  double d1 = 0.0;
  int pixel = -1;
};

/// Locates the one-bounce return (strongest correlation peak) on an unfiltered transient.
/// Requires the laser within 1 cm of the sensor; throws DataError otherwise or when no
/// pulse is present.
SourceEstimate estimate_d1(const TransientImage& img, const PulseModel& pulse);

/// Per-illumination extraction results. Rasters are u-major like the camera pixels.
struct PreprocessedView {
  CameraModel camera;
  Vec3 laser;
  Vec3 l;
  double d1 = 0.0;
  int k = 0;
  double t_res = 0.0;
  double threshold = 0.15;
  std::vector<double> tof;         // seconds; NaN when no pulse
  std::vector<double> confidence;  // [0, 1]
  std::vector<bool> lit;           // shadow mask m_k, true = two-bounce observed
  std::vector<bool> valid;         // false for pixels removed by the one-bounce filter

  int pixel_count() const { return camera.pixel_count(); }
};

PreprocessedView preprocess_view(const TransientImage& img, const PulseModel& pulse,
                                 const PreprocessParams& params);

void write_preprocessed(const PreprocessedView& view, const std::filesystem::path& path);
PreprocessedView read_preprocessed(const std::filesystem::path& path);

struct GatingReport {
  double duration = 0.0;  // T, seconds
  double gate_width = 0.0;  // W = T2 - T1
  double sbr_ungated = 0.0;
  double sbr_gated = 0.0;
  double improvement = 0.0;
};

/// Signal-to-background ratios of a noise-free signal histogram under constant noise
/// level `noise`, with and without a time gate [t1, t2] (seconds from t_start). Bins whose
/// centers fall inside the gate contribute to the gated sum. Zero noise yields +inf SBRs.
GatingReport gating_report(std::span<const double> signal, double t_res, double t1, double t2,
                           double noise);

}  // namespace tbl
