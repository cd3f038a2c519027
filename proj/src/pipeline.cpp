#include "tbl/pipeline.hpp"

#include <png.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <numbers>
#include <sstream>

#include "tbl/binary_io.hpp"
#include "tbl/errors.hpp"
#include "tbl/rng.hpp"

namespace tbl {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kDepthMagic = "TBL_DI01";
constexpr std::string_view kTruthMagic = "TBL_GT01";

void log_line(const std::string& msg) { std::clog << msg << std::endl; }

nlohmann::json optional_json(const auto& opt) {
  return opt ? nlohmann::json(*opt) : nlohmann::json(nullptr);
}

template <typename T>
void read_optional(const nlohmann::json& j, const char* key, std::optional<T>& out) {
  if (!j.contains(key)) return;
  if (j[key].is_null())
    out.reset();
  else
    out = j[key].get<T>();
}

double rad_to_deg(double r) { return r * 180.0 / std::numbers::pi; }
double deg_to_rad(double d) { return d * std::numbers::pi / 180.0; }

}  // namespace

void RunConfig::validate() const {
  if (scene.empty()) throw ConfigError("no scene file given");
  if (!fs::exists(scene)) throw ConfigError("scene file " + scene.string() + " does not exist");
  if (output.empty()) throw ConfigError("no output directory given");
  const auto& s = simulation;
  if (s.num_bins < 1) throw ConfigError("num_bins must be >= 1");
  if (!(s.t_res > 0.0)) throw ConfigError("t_res must be > 0");
  if (!(s.pulse_fwhm > 0.0) || !(s.pulse_amplitude > 0.0))
    throw ConfigError("pulse fwhm and amplitude must be > 0");
  if (s.ambient_rate && !(*s.ambient_rate >= 0.0)) throw ConfigError("ambient_rate must be >= 0");
  if (s.illumination_count && *s.illumination_count < 1)
    throw ConfigError("illumination_count must be >= 1");
  if (s.temporal_factor < 1) throw ConfigError("temporal_factor must be >= 1");
  if (s.resolution && *s.resolution < 1) throw ConfigError("resolution must be >= 1");
  if (s.background_albedo && !(*s.background_albedo >= 0.0 && *s.background_albedo <= 1.0))
    throw ConfigError("background_albedo must lie in [0, 1]");
  if (!(preprocess.shadow_threshold >= 0.0)) throw ConfigError("shadow threshold must be >= 0");
  if (!(preprocess.one_bounce_angle >= 0.0)) throw ConfigError("one-bounce angle must be >= 0");
  for (int r : grid.resolution)
    if (r < 2) throw ConfigError("grid resolution must be >= 2 per axis");
  if (!(grid.padding >= 0.0)) throw ConfigError("grid padding must be >= 0");
  if (!(grid.initial_sigma > 0.0)) throw ConfigError("initial sigma must be > 0");
  if (!eval.poses.empty() && !fs::exists(eval.poses))
    throw ConfigError("pose file " + eval.poses.string() + " does not exist");
  if (eval.orbit_views < 0) throw ConfigError("orbit_views must be >= 0");
  if (!(eval.isolevel > 0.0) || !(eval.occupancy_threshold > 0.0))
    throw ConfigError("isolevel and occupancy threshold must be > 0");
  if (eval.chamfer_points < 1) throw ConfigError("chamfer_points must be >= 1");
  train.validate();
}

nlohmann::json to_json(const RunConfig& c) {
  const auto& s = c.simulation;
  return {{"scene", c.scene.string()},
          {"output", c.output.string()},
          {"simulation",
           {{"num_bins", s.num_bins},
            {"t_res", s.t_res},
            {"t_start", s.t_start},
            {"pulse_fwhm", s.pulse_fwhm},
            {"pulse_amplitude", s.pulse_amplitude},
            {"ambient_rate", optional_json(s.ambient_rate)},
            {"poisson", s.poisson},
            {"seed", s.seed},
            {"illumination_count", optional_json(s.illumination_count)},
            {"temporal_factor", s.temporal_factor},
            {"resolution", optional_json(s.resolution)},
            {"background_albedo", optional_json(s.background_albedo)}}},
          {"preprocess",
           {{"threshold", c.preprocess.shadow_threshold},
            {"one_bounce_angle_deg", rad_to_deg(c.preprocess.one_bounce_angle)},
            {"estimate_source", c.preprocess.estimate_source}}},
          {"grid",
           {{"resolution", c.grid.resolution},
            {"padding", c.grid.padding},
            {"initial_sigma", c.grid.initial_sigma}}},
          {"train", to_json(c.train)},
          {"eval",
           {{"poses", c.eval.poses.string()},
            {"orbit_views", c.eval.orbit_views},
            {"orbit_radius", c.eval.orbit_radius},
            {"orbit_height", c.eval.orbit_height},
            {"isolevel", c.eval.isolevel},
            {"occupancy_threshold", c.eval.occupancy_threshold},
            {"chamfer_points", c.eval.chamfer_points},
            {"region_margin", c.eval.region_margin},
            {"mask_behind_object", c.eval.mask_behind_object}}}};
}

RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c) {
  try {
    if (j.contains("scene")) c.scene = j["scene"].get<std::string>();
    if (j.contains("output")) c.output = j["output"].get<std::string>();
    if (j.contains("simulation")) {
      const auto& s = j["simulation"];
      auto& o = c.simulation;
      o.num_bins = s.value("num_bins", o.num_bins);
      o.t_res = s.value("t_res", o.t_res);
      if (s.contains("duration")) o.num_bins = bins_for_duration(s["duration"].get<double>(), o.t_res);
      o.t_start = s.value("t_start", o.t_start);
      o.pulse_fwhm = s.value("pulse_fwhm", o.pulse_fwhm);
      o.pulse_amplitude = s.value("pulse_amplitude", o.pulse_amplitude);
      read_optional(s, "ambient_rate", o.ambient_rate);
      o.poisson = s.value("poisson", o.poisson);
      o.seed = s.value("seed", o.seed);
      read_optional(s, "illumination_count", o.illumination_count);
      o.temporal_factor = s.value("temporal_factor", o.temporal_factor);
      read_optional(s, "resolution", o.resolution);
      read_optional(s, "background_albedo", o.background_albedo);
    }
    if (j.contains("preprocess")) {
      const auto& p = j["preprocess"];
      c.preprocess.shadow_threshold = p.value("threshold", c.preprocess.shadow_threshold);
      if (p.contains("one_bounce_angle_deg"))
        c.preprocess.one_bounce_angle = deg_to_rad(p["one_bounce_angle_deg"].get<double>());
      c.preprocess.estimate_source = p.value("estimate_source", c.preprocess.estimate_source);
    }
    if (j.contains("grid")) {
      const auto& g = j["grid"];
      if (g.contains("resolution")) {
        if (g["resolution"].is_number()) {
          const int r = g["resolution"].get<int>();
          c.grid.resolution = {r, r, r};
        } else {
          c.grid.resolution = g["resolution"].get<std::array<int, 3>>();
        }
      }
      c.grid.padding = g.value("padding", c.grid.padding);
      c.grid.initial_sigma = g.value("initial_sigma", c.grid.initial_sigma);
    }
    if (j.contains("train")) c.train = train_config_from_json(j["train"], c.train);
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      auto& o = c.eval;
      if (e.contains("poses")) o.poses = e["poses"].get<std::string>();
      o.orbit_views = e.value("orbit_views", o.orbit_views);
      o.orbit_radius = e.value("orbit_radius", o.orbit_radius);
      o.orbit_height = e.value("orbit_height", o.orbit_height);
      o.isolevel = e.value("isolevel", o.isolevel);
      o.occupancy_threshold = e.value("occupancy_threshold", o.occupancy_threshold);
      o.chamfer_points = e.value("chamfer_points", o.chamfer_points);
      o.region_margin = e.value("region_margin", o.region_margin);
      o.mask_behind_object = e.value("mask_behind_object", o.mask_behind_object);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  return run_config_from_json(read_json_file(path));
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    parts.push_back(part);
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a value");
    node = &(*node)[parts[i]];
    if (node->is_null()) *node = nlohmann::json::object();
  }
  if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a value");
  (*node)[parts.back()] = value;
}

RunPaths::RunPaths(const fs::path& output)
    : root(output),
      dataset(output / "dataset"),
      preprocessed(output / "preprocessed"),
      train(output / "train"),
      eval(output / "eval"),
      mesh(output / "mesh") {}

SceneDescription prepare_scene(const RunConfig& cfg) {
  nlohmann::json j = read_json_file(cfg.scene);
  const auto& s = cfg.simulation;
  if (s.ambient_rate) j["ambient_rate"] = *s.ambient_rate;
  if (s.resolution) j["camera"]["resolution"] = {*s.resolution, *s.resolution};
  if (s.background_albedo && j.contains("primitives"))
    for (auto& p : j["primitives"])
      if (!p.value("solid", true)) p["albedo"] = *s.background_albedo;
  if (s.illumination_count && j.contains("illumination")) {
    for (const char* key : {"targets", "directions"}) {
      auto& list = j["illumination"][key];
      if (!list.is_array()) continue;
      if (static_cast<std::size_t>(*s.illumination_count) > list.size())
        throw ConfigError("illumination_count exceeds the number of illumination points");
      list.erase(list.begin() + *s.illumination_count, list.end());
    }
  }
  return parse_scene(j);
}

namespace {

void prepare_dir(const fs::path& dir, const RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());
  write_json_file(to_json(cfg), dir / "config.json");
}

std::string view_name(const char* prefix, int k, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%02d%s", prefix, k, ext);
  return buf;
}

void write_truth(const ViewTruth& truth, const CameraModel& camera, int k, const fs::path& path) {
  const nlohmann::json header = {{"format", "TBL_GT01"},
                                 {"k", k},
                                 {"camera", camera_to_json(camera)},
                                 {"l", vec_to_json(truth.target)},
                                 {"d1", truth.d1},
                                 {"direct_pixel", truth.direct_pixel},
                                 {"one_bounce_time", truth.one_bounce_time},
                                 {"layout", "path_length f32le[N], status u8[N]"}};
  BinaryWriter w(path, kTruthMagic, header);
  std::vector<float> len(truth.path_length.begin(), truth.path_length.end());
  w.write_floats(len);
  std::vector<std::uint8_t> status(truth.status.size());
  for (std::size_t i = 0; i < status.size(); ++i) status[i] = static_cast<std::uint8_t>(truth.status[i]);
  w.write_bytes(status);
  w.close();
}

Aabb grid_bounds(const Aabb& scene_bounds, const GridSettings& g) {
  return scene_bounds.dilated(g.padding);
}

nlohmann::json read_manifest(const RunPaths& paths) {
  const fs::path p = paths.dataset / "manifest.json";
  if (!fs::exists(p)) throw DataError("no dataset manifest at " + p.string() + "; run simulate first");
  return read_json_file(p);
}

PulseModel pulse_of(const RunConfig& cfg) {
  return {cfg.simulation.pulse_fwhm, cfg.simulation.pulse_amplitude};
}

std::vector<PreprocessedView> load_views(const RunPaths& paths) {
  const fs::path index = paths.preprocessed / "views.json";
  if (!fs::exists(index)) throw DataError("no preprocessed views at " + index.string());
  std::vector<PreprocessedView> views;
  const nlohmann::json listing = read_json_file(index);
  for (const auto& name : listing.at("views"))
    views.push_back(read_preprocessed(paths.preprocessed / name.get<std::string>()));
  return views;
}

std::string format_value(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

void cmd_simulate(const RunConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const RunPaths paths(cfg.output);
  prepare_dir(paths.root, cfg);
  prepare_dir(paths.dataset, cfg);
  const SceneDescription desc = prepare_scene(cfg);
  SimulationParams params;
  params.pulse = pulse_of(cfg);
  params.noise = {desc.scene.ambient_rate(), cfg.simulation.poisson, cfg.simulation.seed};
  params.num_bins = cfg.simulation.num_bins;
  params.t_res = cfg.simulation.t_res;
  params.t_start = cfg.simulation.t_start;

  nlohmann::json views = nlohmann::json::array();
  int num_bins = params.num_bins;
  double t_res = params.t_res;
  for (int k = 0; k < static_cast<int>(desc.rig.targets.size()); ++k) {
    SimulatedView sim = simulate_view(desc.scene, desc.rig, k, params);
    if (cfg.simulation.temporal_factor > 1)
      sim.image = downsample_temporal(sim.image, cfg.simulation.temporal_factor);
    num_bins = sim.image.num_bins;
    t_res = sim.image.t_res;
    const std::string transient = view_name("transient", k, ".bin");
    const std::string truth = view_name("truth", k, ".bin");
    write_transient(sim.image, paths.dataset / transient);
    write_truth(sim.truth, desc.rig.camera, k, paths.dataset / truth);
    views.push_back({{"k", k},
                     {"transient", transient},
                     {"truth", truth},
                     {"l", vec_to_json(sim.truth.target)},
                     {"d1", sim.truth.d1},
                     {"clipped_pulses", sim.image.clipped_pulses}});
  }
  const DepthImage depth = truth_depth_image(desc.scene, desc.rig.camera);
  write_depth_image(depth, paths.dataset / "depth_truth.bin");

  const nlohmann::json manifest = {
      {"format", "dataset"},
      {"camera", camera_to_json(desc.rig.camera)},
      {"laser", vec_to_json(desc.rig.laser)},
      {"scene_bounds",
       {{"min", vec_to_json(desc.scene.bounds().min)}, {"max", vec_to_json(desc.scene.bounds().max)}}},
      {"num_bins", num_bins},
      {"t_res", t_res},
      {"views", views},
      {"depth_truth", "depth_truth.bin"}};
  write_json_file(manifest, paths.dataset / "manifest.json");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log_line("simulate: " + std::to_string(views.size()) + " views in " + std::to_string(secs) + " s");
}

void cmd_preprocess(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths(cfg.output);
  const nlohmann::json manifest = read_manifest(paths);
  prepare_dir(paths.preprocessed, cfg);
  const PulseModel pulse = pulse_of(cfg);
  nlohmann::json names = nlohmann::json::array();
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& v : manifest.at("views")) {
    const int k = v.at("k").get<int>();
    const TransientImage img = read_transient(paths.dataset / v.at("transient").get<std::string>());
    const PreprocessedView view = preprocess_view(img, pulse, cfg.preprocess);
    const std::string name = view_name("view", k, ".bin");
    write_preprocessed(view, paths.preprocessed / name);
    names.push_back(name);
    summary.push_back({{"k", k},
                       {"l", vec_to_json(view.l)},
                       {"d1", view.d1},
                       {"lit", std::count(view.lit.begin(), view.lit.end(), true)},
                       {"valid", std::count(view.valid.begin(), view.valid.end(), true)}});
  }
  write_json_file({{"views", names}, {"summary", summary}}, paths.preprocessed / "views.json");
  log_line("preprocess: " + std::to_string(names.size()) + " views");
}

void cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths(cfg.output);
  const nlohmann::json manifest = read_manifest(paths);
  const auto views = load_views(paths);
  const auto dataset = build_dataset(views);
  prepare_dir(paths.train, cfg);
  const Aabb scene_bounds{vec_from_json(manifest.at("scene_bounds").at("min")),
                          vec_from_json(manifest.at("scene_bounds").at("max"))};
  DensityGrid grid(cfg.grid.resolution, grid_bounds(scene_bounds, cfg.grid), cfg.grid.initial_sigma);
  TrainConfig tc = cfg.train;
  tc.failure_dump = paths.train / "failure.json";
  const auto t0 = std::chrono::steady_clock::now();
  const int report_every = std::max(tc.log_every, tc.iterations / 20);
  const TrainResult result = optimize(grid, dataset, tc, [&](const HistoryRow& row) {
    if (row.iteration % report_every != 0) return;
    std::ostringstream os;
    os << "train: it " << row.iteration << " L_primary " << row.loss.primary << " L_secondary "
       << row.loss.secondary << " lr " << row.learning_rate;
    log_line(os.str());
  });
  write_checkpoint(grid, paths.train / "checkpoint.bin");
  write_history_csv(result.history, paths.train / "history.csv");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log_line("train: " + std::to_string(dataset.size()) + " samples, " + std::to_string(secs) + " s");
}

nlohmann::json cmd_eval(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths(cfg.output);
  const nlohmann::json manifest = read_manifest(paths);
  const fs::path ckpt = paths.train / "checkpoint.bin";
  if (!fs::exists(ckpt)) throw DataError("no checkpoint at " + ckpt.string() + "; run train first");
  const DensityGrid grid = read_checkpoint(ckpt);
  const SceneDescription desc = prepare_scene(cfg);
  const CameraModel& cam = desc.rig.camera;
  prepare_dir(paths.eval, cfg);
  SamplingConfig sampling = cfg.train.sampling;

  auto view_metrics = [&](const CameraModel& camera, const DepthImage& pred, const DepthImage& truth) {
    std::vector<bool> mask;
    if (cfg.eval.mask_behind_object) {
      mask = behind_object_mask(desc.scene, camera, desc.rig.targets);
      mask.flip();
    }
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i)
      if (truth.valid[i]) {
        lo = std::min(lo, truth.values[i]);
        hi = std::max(hi, truth.values[i]);
      }
    nlohmann::json m;
    std::size_t valid = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) valid += pred.valid[i];
    m["valid_pixels"] = valid;
    try {
      m["l1"] = l1_depth(pred, truth, mask);
      m["psnr"] = psnr_depth(pred, truth, std::max(hi - lo, 1e-6), mask);
    } catch (const std::invalid_argument&) {
      m["l1"] = nullptr;
      m["psnr"] = nullptr;
    }
    return std::make_pair(m, std::make_pair(lo, hi));
  };

  nlohmann::json metrics;
  const DepthImage truth_train = truth_depth_image(desc.scene, cam);
  const DepthImage pred_train = render_depth_view(grid, cam, sampling);
  auto [train_m, range] = view_metrics(cam, pred_train, truth_train);
  metrics["train_view"] = train_m;
  write_depth_image(pred_train, paths.eval / "depth_train.bin");
  write_depth_png(pred_train, paths.eval / "depth_train.png", range.first, range.second);
  write_depth_png(truth_train, paths.eval / "depth_train_truth.png", range.first, range.second);

  std::vector<CameraModel> poses;
  if (!cfg.eval.poses.empty()) {
    const nlohmann::json pj = read_json_file(cfg.eval.poses);
    for (const auto& c : pj) poses.push_back(camera_from_json(c));
  } else if (cfg.eval.orbit_views > 0) {
    poses = orbit_cameras(desc.scene.bounds().center(), cfg.eval.orbit_radius, cfg.eval.orbit_height,
                          cfg.eval.orbit_views, cam.fov, cam.width, cam.height);
  }
  double l1_sum = 0.0, psnr_sum = 0.0;
  int counted = 0;
  nlohmann::json per_view = nlohmann::json::array();
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const DepthImage truth = truth_depth_image(desc.scene, poses[i]);
    const DepthImage pred = render_depth_view(grid, poses[i], sampling);
    auto [m, r] = view_metrics(poses[i], pred, truth);
    const std::string stem = view_name("depth_test", static_cast<int>(i), "");
    write_depth_image(pred, paths.eval / (stem + ".bin"));
    write_depth_png(pred, paths.eval / (stem + ".png"), r.first, r.second);
    if (!m["l1"].is_null()) {
      l1_sum += m["l1"].get<double>();
      psnr_sum += m["psnr"].get<double>();
      ++counted;
    }
    per_view.push_back(m);
  }
  metrics["test_views"] = {{"count", poses.size()},
                           {"scored", counted},
                           {"l1_mean", counted ? nlohmann::json(l1_sum / counted) : nlohmann::json(nullptr)},
                           {"psnr_mean", counted ? nlohmann::json(psnr_sum / counted) : nlohmann::json(nullptr)},
                           {"per_view", per_view}};

  const TriangleMesh pred_mesh = extract_mesh(grid, cfg.eval.isolevel);
  const TriangleMesh truth_mesh = desc.scene.surface_mesh(false);
  if (!pred_mesh.empty() && !truth_mesh.empty()) {
    const auto n = static_cast<std::size_t>(cfg.eval.chamfer_points);
    const auto a = sample_surface(pred_mesh, n, hash_counters({cfg.train.seed, 0xc4a1ULL}));
    const auto b = sample_surface(truth_mesh, n, hash_counters({cfg.train.seed, 0xc4a2ULL}));
    metrics["chamfer"] = chamfer(a, b);
  } else {
    metrics["chamfer"] = nullptr;
  }

  const OccupancyGrid pred_occ = extract_occupancy(grid, cfg.eval.occupancy_threshold);
  const OccupancyGrid truth_occ = truth_occupancy(desc.scene, grid.resolution(), grid.bounds());
  const auto views = load_views(paths);
  const OccupancyGrid carved = shadow_carve_baseline(views, grid.resolution(), grid.bounds());
  std::vector<bool> region;
  nlohmann::json region_json = nullptr;
  const Aabb solid = desc.scene.solid_bounds();
  if (solid.valid()) {
    const Aabb box = solid.dilated(cfg.eval.region_margin);
    region = region_mask(truth_occ, box);
    region_json = {{"min", vec_to_json(box.min)}, {"max", vec_to_json(box.max)}};
  }
  metrics["occupancy"] = {{"iou", occupancy_iou(pred_occ.cells, truth_occ.cells, region)},
                          {"baseline_iou", occupancy_iou(carved.cells, truth_occ.cells, region)},
                          {"threshold", cfg.eval.occupancy_threshold},
                          {"region", region_json}};

  write_json_file(metrics, paths.eval / "metrics.json");
  std::ofstream csv(paths.eval / "metrics.csv");
  if (!csv) throw DataError("cannot write metrics.csv");
  csv.precision(10);
  auto cell = [](const nlohmann::json& v) {
    std::ostringstream os;
    os.precision(10);
    if (v.is_null())
      os << "nan";
    else
      os << v.get<double>();
    return os.str();
  };
  csv << "train_l1,train_psnr,test_l1,test_psnr,chamfer,iou,baseline_iou\n"
      << cell(metrics["train_view"]["l1"]) << ',' << cell(metrics["train_view"]["psnr"]) << ','
      << cell(metrics["test_views"]["l1_mean"]) << ',' << cell(metrics["test_views"]["psnr_mean"])
      << ',' << cell(metrics["chamfer"]) << ',' << cell(metrics["occupancy"]["iou"]) << ','
      << cell(metrics["occupancy"]["baseline_iou"]) << '\n';
  log_line("eval: train L1 " + cell(metrics["train_view"]["l1"]) + " m, IoU " +
           cell(metrics["occupancy"]["iou"]) + ", baseline IoU " +
           cell(metrics["occupancy"]["baseline_iou"]));
  return metrics;
}

void cmd_mesh(const RunConfig& cfg, std::optional<double> isolevel) {
  const RunPaths paths(cfg.output);
  const fs::path ckpt = paths.train / "checkpoint.bin";
  if (!fs::exists(ckpt)) throw DataError("no checkpoint at " + ckpt.string() + "; run train first");
  const double level = isolevel.value_or(cfg.eval.isolevel);
  if (!(level > 0.0)) throw ConfigError("isolevel must be > 0");
  const DensityGrid grid = read_checkpoint(ckpt);
  prepare_dir(paths.mesh, cfg);
  const TriangleMesh mesh = extract_mesh(grid, level);
  write_ply_ascii(mesh, paths.mesh / "mesh.ply");
  write_stl_ascii(mesh, paths.mesh / "mesh.stl");
  log_line("mesh: " + std::to_string(mesh.vertices.size()) + " vertices, " +
           std::to_string(mesh.faces.size()) + " faces");
}

nlohmann::json run_pipeline(const RunConfig& cfg) {
  cmd_simulate(cfg);
  cmd_preprocess(cfg);
  cmd_train(cfg);
  return cmd_eval(cfg);
}

std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const std::string& axis,
                                    const std::vector<double>& values) {
  if (std::find(kAblationAxes.begin(), kAblationAxes.end(), axis) == kAblationAxes.end())
    throw ConfigError("unknown ablation axis '" + axis + "'");
  if (values.empty()) throw ConfigError("ablation needs at least one value");
  const fs::path root = cfg.output / ("ablate_" + axis);
  std::vector<AblationRow> rows;
  for (double value : values) {
    RunConfig run = cfg;
    run.output = root / format_value(value);
    auto as_int = [&](const char* what) {
      const double r = std::round(value);
      if (std::abs(r - value) > 1e-9 || r < 1) throw ConfigError(std::string(what) + " must be a positive integer");
      return static_cast<int>(r);
    };
    if (axis == "spatial") {
      run.simulation.resolution = as_int("spatial resolution");
    } else if (axis == "temporal") {
      const double factor = value * 1e-12 / cfg.simulation.t_res;
      const double r = std::round(factor);
      if (r < 1 || std::abs(r - factor) > 1e-6)
        throw ConfigError("temporal value " + format_value(value) + " ps is not a multiple of t_res");
      run.simulation.temporal_factor = static_cast<int>(r);
    } else if (axis == "ambient") {
      run.simulation.ambient_rate = value;
    } else if (axis == "albedo") {
      run.simulation.background_albedo = value;
    } else if (axis == "illum_points") {
      run.simulation.illumination_count = as_int("illumination count");
    } else {
      run.preprocess.shadow_threshold = value;
    }
    log_line("ablate: " + axis + " = " + format_value(value));
    rows.push_back({value, run_pipeline(run)});
  }
  std::error_code ec;
  fs::create_directories(root, ec);
  std::ofstream csv(root / "sweep.csv");
  if (!csv) throw DataError("cannot write " + (root / "sweep.csv").string());
  csv.precision(10);
  csv << axis << ",L1,PSNR,Chamfer,IoU\n";
  auto cell = [](const nlohmann::json& v) {
    std::ostringstream os;
    os.precision(10);
    if (v.is_null())
      os << "nan";
    else
      os << v.get<double>();
    return os.str();
  };
  for (const auto& r : rows)
    csv << format_value(r.value) << ',' << cell(r.metrics["train_view"]["l1"]) << ','
        << cell(r.metrics["train_view"]["psnr"]) << ',' << cell(r.metrics["chamfer"]) << ','
        << cell(r.metrics["occupancy"]["iou"]) << '\n';
  return rows;
}

void write_depth_image(const DepthImage& img, const fs::path& path) {
  BinaryWriter w(path, kDepthMagic,
                 {{"format", "TBL_DI01"}, {"width", img.width}, {"height", img.height},
                  {"layout", "u-major float32le meters, NaN = invalid"}});
  std::vector<float> buf(img.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = img.valid[i] ? static_cast<float>(img.values[i]) : std::numeric_limits<float>::quiet_NaN();
  w.write_floats(buf);
  w.close();
}

DepthImage read_depth_image(const fs::path& path) {
  BinaryReader r(path, kDepthMagic);
  int w = 0, h = 0;
  try {
    w = r.header().at("width").get<int>();
    h = r.header().at("height").get<int>();
  } catch (const std::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (w < 1 || h < 1) throw DataError(path.string() + ": bad raster size");
  DepthImage img(w, h);
  const auto values = r.read_floats(img.size());
  r.expect_end();
  for (std::size_t i = 0; i < img.size(); ++i) {
    img.valid[i] = std::isfinite(values[i]);
    img.values[i] = img.valid[i] ? values[i] : 0.0;
  }
  return img;
}

namespace {

// Polynomial fit of the turbo colormap.
std::array<std::uint8_t, 3> turbo(double x) {
  x = std::clamp(x, 0.0, 1.0);
  const double r = 0.13572138 + x * (4.61539260 + x * (-42.66032258 + x * (132.13108234 + x * (-152.94239396 + x * 59.28637943))));
  const double g = 0.09140261 + x * (2.19418839 + x * (4.84296658 + x * (-14.18503333 + x * (4.27729857 + x * 2.82956604))));
  const double b = 0.10667330 + x * (12.64194608 + x * (-60.58204836 + x * (110.36276771 + x * (-89.90310912 + x * 27.34824973))));
  auto q = [](double c) { return static_cast<std::uint8_t>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0)); };
  return {q(r), q(g), q(b)};
}

}  // namespace

void write_depth_png(const DepthImage& img, const fs::path& path, double lo, double hi) {
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw DataError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("failed to encode " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const double span = hi > lo ? hi - lo : 1.0;
  std::vector<png_byte> row(static_cast<std::size_t>(img.width) * 3);
  for (int v = 0; v < img.height; ++v) {
    for (int u = 0; u < img.width; ++u) {
      const std::size_t i = static_cast<std::size_t>(u) * img.height + v;
      std::array<std::uint8_t, 3> c{0, 0, 0};
      if (img.valid[i]) c = turbo((img.values[i] - lo) / span);
      std::copy(c.begin(), c.end(), row.begin() + static_cast<std::ptrdiff_t>(u) * 3);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace tbl
