#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tbl/binary_io.hpp"
#include "tbl/errors.hpp"
#include "tbl/parallel.hpp"
#include "tbl/pipeline.hpp"

namespace {

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::string> scene, output;
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations;
  std::optional<double> threshold;
  std::optional<double> t_res;
  std::optional<int> num_bins;
  std::optional<bool> deterministic;
  int threads = 0;
};

tbl::RunConfig build_config(const Options& o) {
  nlohmann::json j = o.config.empty() ? nlohmann::json::object() : tbl::read_json_file(o.config);
  if (o.scene) j["scene"] = *o.scene;
  if (o.output) j["output"] = *o.output;
  if (o.seed) {
    j["simulation"]["seed"] = *o.seed;
    j["train"]["seed"] = *o.seed;
  }
  if (o.iterations) j["train"]["iterations"] = *o.iterations;
  if (o.threshold) j["preprocess"]["threshold"] = *o.threshold;
  if (o.t_res) j["simulation"]["t_res"] = *o.t_res;
  if (o.num_bins) j["simulation"]["num_bins"] = *o.num_bins;
  if (o.deterministic) j["train"]["deterministic"] = *o.deterministic;
  for (const auto& s : o.overrides) tbl::apply_override(j, s);
  tbl::RunConfig cfg = tbl::run_config_from_json(j);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-bounce lidar transient simulation and density-grid reconstruction"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("-c,--config", o.config, "Run configuration JSON")->check(CLI::ExistingFile);
  app.add_option("--set", o.overrides, "Override a config field, e.g. --set train.iterations=500");
  app.add_option("--scene", o.scene, "Scene description file");
  app.add_option("-o,--output", o.output, "Output directory");
  app.add_option("--seed", o.seed, "Seed for simulation noise and training");
  app.add_option("--iterations", o.iterations, "Training iterations");
  app.add_option("--threshold", o.threshold, "Shadow confidence threshold");
  app.add_option("--t-res", o.t_res, "Bin width in seconds");
  app.add_option("--num-bins", o.num_bins, "Number of timing bins");
  app.add_option("--deterministic", o.deterministic, "Ordered gradient reduction (true/false)");
  app.add_option("-j,--threads", o.threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);

  auto* simulate = app.add_subcommand("simulate", "Render transients and ground truth");
  auto* preprocess = app.add_subcommand("preprocess", "Extract ToF, confidence and shadow masks");
  auto* train = app.add_subcommand("train", "Optimize the density grid");
  auto* eval = app.add_subcommand("eval", "Depth, Chamfer and occupancy metrics");
  auto* mesh = app.add_subcommand("mesh", "Export the isosurface as PLY and STL");
  std::optional<double> isolevel;
  mesh->add_option("--isolevel", isolevel, "Density isolevel");
  auto* run = app.add_subcommand("run", "simulate, preprocess, train and eval in sequence");
  auto* ablate = app.add_subcommand("ablate", "Sweep one parameter through the full pipeline");
  std::string axis;
  std::vector<double> values;
  ablate->add_option("--axis", axis, "Swept parameter")
      ->required()
      ->check(CLI::IsMember(tbl::kAblationAxes));
  ablate->add_option("--values", values, "Values to sweep (temporal in ps)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (o.threads > 0) tbl::set_thread_count(o.threads);
    const tbl::RunConfig cfg = build_config(o);
    if (simulate->parsed()) tbl::cmd_simulate(cfg);
    if (preprocess->parsed()) tbl::cmd_preprocess(cfg);
    if (train->parsed()) tbl::cmd_train(cfg);
    if (eval->parsed()) tbl::cmd_eval(cfg);
    if (mesh->parsed()) tbl::cmd_mesh(cfg, isolevel);
    if (run->parsed()) tbl::run_pipeline(cfg);
    if (ablate->parsed()) tbl::cmd_ablate(cfg, axis, values);
  } catch (const tbl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const tbl::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const tbl::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
