#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tbl/density.hpp"
#include "tbl/evaluation.hpp"
#include "tbl/mesh.hpp"
#include "tbl/signal.hpp"

namespace tbl {

/// Speed of light in meters per nanosecond; the distance loss is evaluated in ns.
inline constexpr double kSpeedOfLightNs = kSpeedOfLight * 1e-9;

struct TrainingSample {
  Ray ray;
  Vec3 l;
  double d1 = 0.0;
  bool lit = false;
  double t_peak = 0.0;  // seconds, finite for lit samples
  int view = 0;
  int pixel = 0;

  double shadow_target() const { return lit ? 1.0 : 0.0; }
};

/// One sample per (valid pixel, view). Throws DataError when views disagree on the camera.
std::vector<TrainingSample> build_dataset(const std::vector<PreprocessedView>& views);

struct TrainConfig {
  int iterations = 20000;
  int warmup = 2500;          // W_b: beta = 0 before this iteration
  double beta = 1.0 / 6000.0;
  int batch_size = 1024;
  double learning_rate = 5e-4;
  double final_learning_rate = 5e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  SamplingConfig sampling;
  std::uint64_t seed = 0;
  /// Ordered gradient reduction (bit-reproducible across thread counts); otherwise
  /// gradients are accumulated with atomics.
  bool deterministic = true;
  int log_every = 100;
  /// Where a diagnostic dump is written if the loss becomes non-finite (empty = none).
  std::filesystem::path failure_dump;

  void validate() const;
  double learning_rate_at(int iteration) const;
  double beta_at(int iteration) const { return iteration < warmup ? 0.0 : beta; }

  static TrainConfig desk();
  static TrainConfig full_scale();
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Overlays fields present in `j` onto `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = TrainConfig::desk());

struct LossBreakdown {
  double primary = 0.0;
  double secondary = 0.0;
  double total = 0.0;
  double beta = 0.0;
  int lit = 0;
  int shadow = 0;
};

struct LossOptions {
  double beta = 0.0;
  /// Render secondary rays even when beta == 0 (for reporting).
  bool evaluate_secondary = true;
  std::uint64_t key = 0;
  bool deterministic = true;
};

/// Evaluates the loss on `batch` and, if `grad` is non-empty, adds d total / d theta.
LossBreakdown compute_loss(const DensityGrid& grid, std::span<const TrainingSample> batch,
                           const SamplingConfig& sampling, const LossOptions& options,
                           std::span<double> grad = {});

/// Same forward pass on explicit sample positions: primary distances per sample and one
/// shared set of secondary fractions. Used to check gradients against finite differences.
LossBreakdown compute_loss_fixed(const DensityGrid& grid, std::span<const TrainingSample> batch,
                                 const std::vector<std::vector<double>>& primary_distances,
                                 const SegmentSamples& secondary, double beta,
                                 std::span<double> grad = {});

struct HistoryRow {
  int iteration = 0;
  LossBreakdown loss;
  double learning_rate = 0.0;
};

struct TrainResult {
  std::vector<HistoryRow> history;
};

using TrainCallback = std::function<void(const HistoryRow&)>;

/// Adam on the grid parameters with exponential learning-rate decay and the warmup beta
/// schedule. Throws NumericalError on a non-finite loss.
TrainResult optimize(DensityGrid& grid, const std::vector<TrainingSample>& dataset,
                     const TrainConfig& cfg, const TrainCallback& callback = {});

void write_history_csv(const std::vector<HistoryRow>& history, const std::filesystem::path& path);

/// Deterministic (unjittered) depth rendering; pixels with weight sum < 0.5 are invalid.
DepthImage render_depth_view(const DensityGrid& grid, const CameraModel& camera,
                             const SamplingConfig& sampling);

/// Isosurface of sigma at `isolevel` over the node lattice. Each cube is split into six
/// tetrahedra around its main diagonal, so the surface is consistent across shared faces.
TriangleMesh extract_mesh(const DensityGrid& grid, double isolevel);

}  // namespace tbl
