#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tbl/evaluation.hpp"
#include "tbl/reconstruct.hpp"
#include "tbl/signal.hpp"
#include "tbl/transient.hpp"

namespace tbl {

struct SimulationSettings {
  int num_bins = 391;
  double t_res = 128e-12;
  double t_start = 0.0;
  double pulse_fwhm = 128e-12;
  double pulse_amplitude = 1000.0;
  std::optional<double> ambient_rate;  // overrides the scene's value
  bool poisson = false;
  std::uint64_t seed = 0;
  /// Use only the first n illumination points.
  std::optional<int> illumination_count;
  /// Simulate at t_res and sum groups of this many bins afterwards.
  int temporal_factor = 1;
  /// Overrides the camera resolution (square).
  std::optional<int> resolution;
  /// Replaces the albedo of every non-solid (background) primitive.
  std::optional<double> background_albedo;
};

struct GridSettings {
  std::array<int, 3> resolution{96, 96, 96};
  double padding = 0.1;  // grid bounds = scene bounds dilated by this much
  double initial_sigma = 1e-2;
};

struct EvalSettings {
  std::filesystem::path poses;  // JSON list of cameras; empty = orbit
  int orbit_views = 120;
  double orbit_radius = 1.2;
  double orbit_height = 0.0;
  double isolevel = 5.0;
  double occupancy_threshold = 5.0;
  int chamfer_points = 100000;
  double region_margin = 0.15;
  bool mask_behind_object = true;
};

struct RunConfig {
  std::filesystem::path scene;
  std::filesystem::path output = "run";
  SimulationSettings simulation;
  PreprocessParams preprocess;
  GridSettings grid;
  TrainConfig train = TrainConfig::desk();
  EvalSettings eval;

  void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);
/// Overlays fields present in `j` onto `base`. Throws ConfigError on bad values.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies "a.b.c=value" to a JSON object. The value is parsed as JSON when possible and
/// taken as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

struct RunPaths {
  std::filesystem::path root, dataset, preprocessed, train, eval, mesh;
  explicit RunPaths(const std::filesystem::path& output);
};

/// Loads the scene and applies the simulation overrides (ambient, albedo, resolution, subset).
SceneDescription prepare_scene(const RunConfig& cfg);

void cmd_simulate(const RunConfig& cfg);
void cmd_preprocess(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
nlohmann::json cmd_eval(const RunConfig& cfg);
void cmd_mesh(const RunConfig& cfg, std::optional<double> isolevel = {});
/// simulate -> preprocess -> train -> eval in the configured output directory.
nlohmann::json run_pipeline(const RunConfig& cfg);

inline const std::vector<std::string> kAblationAxes{"spatial", "temporal", "ambient",
                                                    "albedo", "illum_points", "shadow_threshold"};
struct AblationRow {
  double value = 0.0;
  nlohmann::json metrics;
};
/// Runs the full pipeline once per value into <output>/ablate_<axis>/<value>/ and writes
/// sweep.csv there. Temporal values are in picoseconds and must be multiples of t_res.
std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const std::string& axis,
                                    const std::vector<double>& values);

/// Depth raster file: magic "TBL_DI01", JSON header {width, height}, float32 values in
/// pixel order with NaN for invalid pixels.
void write_depth_image(const DepthImage& img, const std::filesystem::path& path);
DepthImage read_depth_image(const std::filesystem::path& path);
/// 8-bit colormapped preview; invalid pixels are black.
void write_depth_png(const DepthImage& img, const std::filesystem::path& path, double lo, double hi);

}  // namespace tbl
