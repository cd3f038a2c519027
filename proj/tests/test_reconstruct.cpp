#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "tbl/errors.hpp"
#include "tbl/parallel.hpp"
#include "tbl/reconstruct.hpp"

using namespace tbl;

namespace {

PreprocessedView tiny_view(const CameraModel& cam) {
  PreprocessedView v;
  v.camera = cam;
  v.l = {0, 0, -1};
  v.d1 = 1.0;
  const int n = cam.pixel_count();
  v.tof.assign(n, 10e-9);
  v.confidence.assign(n, 0.9);
  v.lit.assign(n, true);
  v.valid.assign(n, true);
  return v;
}

/// Random samples whose rays, estimated surface points and l stay inside the unit cube.
std::vector<TrainingSample> interior_samples(StreamRng& rng, int count) {
  std::vector<TrainingSample> out(count);
  for (int i = 0; i < count; ++i) {
    auto& s = out[i];
    s.ray = {test::random_in(rng, {{0.35, 0.35, 0.35}, {0.65, 0.65, 0.65}}), test::random_unit(rng)};
    s.l = test::random_in(rng, {{0.2, 0.2, 0.2}, {0.8, 0.8, 0.8}});
    s.d1 = 1.0 + rng.uniform();
    s.lit = i % 2 == 0;
    s.t_peak = s.lit ? (s.d1 + 0.5 + rng.uniform()) / kSpeedOfLight : 0.0;
  }
  return out;
}

/// Plane z = 0 seen from above; every pixel lit by a point above the plane.
std::vector<TrainingSample> plane_dataset(const CameraModel& cam, const Vec3& l, double d1) {
  std::vector<TrainingSample> out;
  for (int u = 0; u < cam.width; ++u)
    for (int v = 0; v < cam.height; ++v) {
      TrainingSample s;
      s.ray = pixel_ray(cam, u, v);
      const double d3 = -s.ray.origin.z / s.ray.direction.z;
      const Vec3 x = s.ray.at(d3);
      s.l = l;
      s.d1 = d1;
      s.lit = true;
      s.t_peak = (d1 + distance(l, x) + d3) / kSpeedOfLight;
      s.pixel = cam.pixel_index(u, v);
      out.push_back(s);
    }
  return out;
}

TrainConfig small_config(int iterations) {
  TrainConfig cfg = TrainConfig::desk();
  cfg.iterations = iterations;
  cfg.warmup = iterations / 2;
  cfg.batch_size = 64;
  cfg.log_every = 5;
  cfg.sampling.coarse = 16;
  cfg.sampling.fine = 8;
  cfg.sampling.secondary_coarse = 16;
  cfg.sampling.secondary_fine = 4;
  cfg.sampling.near = 0.0;
  cfg.sampling.far = 4.0;
  return cfg;
}

}  // namespace

TEST_CASE("dataset has one sample per valid pixel and view") {
  const auto cam = CameraModel::look_at({0, 0, 1}, {0, 0, 0}, {0, 1, 0}, 1.0, 2, 2);
  auto v = tiny_view(cam);
  v.lit[3] = false;
  v.tof[3] = std::numeric_limits<double>::quiet_NaN();
  const auto ds = build_dataset({v});
  REQUIRE(ds.size() == 4);
  CHECK(std::count_if(ds.begin(), ds.end(), [](const auto& s) { return s.lit; }) == 3);
  CHECK(std::count_if(ds.begin(), ds.end(), [](const auto& s) { return !s.lit; }) == 1);
  CHECK(ds[3].shadow_target() == 0.0);
  CHECK(ds[0].shadow_target() == 1.0);

  v.valid[1] = false;
  auto w = v;
  w.k = 1;
  w.l = {0.5, 0, -1};
  const auto two = build_dataset({v, w});
  CHECK(two.size() == 6);
  CHECK(two[5].view == 1);
  CHECK(two[5].l == w.l);

  auto other = tiny_view(CameraModel::look_at({0, 0, 1}, {0, 0, 0}, {0, 1, 0}, 1.1, 2, 2));
  CHECK_THROWS_AS(build_dataset({v, other}), DataError);
}

TEST_CASE("lit samples respect the geometric lower bound on arrival time") {
  const auto d = test::small_room(16);
  SimulationParams p;
  std::vector<PreprocessedView> views;
  for (int k : {0, 7, 9}) views.push_back(preprocess_view(simulate_view(d.scene, d.rig, k, p).image, p.pulse, {}));
  const auto ds = build_dataset(views);
  const auto depth = ground_truth_depth(d.scene, d.rig.camera);
  int lit = 0;
  for (const auto& s : ds) {
    if (!s.lit) continue;
    ++lit;
    CHECK(s.t_peak >= (s.d1 + depth[s.pixel]) / kSpeedOfLight - 0.5 * p.t_res);
  }
  CHECK(lit > 0);
}

TEST_CASE("shadow term and beta weighting") {
  // No primary samples: the estimated surface point is the ray origin, so the secondary
  // segment runs from the origin to l through a constant density.
  DensityGrid g({4, 4, 4}, {{0, 0, 0}, {1, 1, 1}});
  TrainingSample s;
  s.ray = {{0.3, 0.4, 0.5}, {1, 0, 0}};
  s.l = {0.7, 0.6, 0.5};
  s.d1 = 1.0;
  s.lit = true;
  s.t_peak = 5e-9;
  const auto seg = secondary_fractions(16, 2.0);
  double width = 0.0;
  for (double w : seg.widths) width += w;
  const double length = distance(s.ray.origin, s.l);
  std::fill(g.theta().begin(), g.theta().end(), softplus_inverse(std::log(4.0) / (width * length)));
  const std::vector<TrainingSample> batch{s};
  const auto loss = compute_loss_fixed(g, batch, {{}}, seg, 0.0);
  CHECK(loss.secondary == doctest::Approx(0.5625).epsilon(1e-12));
  CHECK(loss.total == loss.primary);
  const auto weighted = compute_loss_fixed(g, batch, {{}}, seg, 0.25);
  CHECK(weighted.total == weighted.primary + 0.25 * weighted.secondary);
  CHECK(weighted.lit == 1);
  CHECK(weighted.shadow == 0);
}

TEST_CASE("full loss gradient matches finite differences") {
  StreamRng rng(21);
  DensityGrid g({4, 4, 4}, {{0, 0, 0}, {1, 1, 1}});
  for (double& t : g.theta()) t = -1.0 + 2.0 * rng.uniform();
  const auto batch = interior_samples(rng, 8);
  SamplingConfig cfg;
  cfg.coarse = 12;
  cfg.fine = 8;
  cfg.near = 0.0;
  std::vector<std::vector<double>> distances;
  for (const auto& s : batch) {
    double t0, t1;
    REQUIRE(ray_box_interval(s.ray, g.bounds(), t0, t1));
    cfg.far = 0.95 * t1;
    distances.push_back(sample_primary(nullptr, s.ray, cfg, distances.size()));
  }
  const auto seg = secondary_fractions(24, 2.0);
  for (double beta : {0.0, 1.0}) {
    std::vector<double> grad(g.size(), 0.0);
    compute_loss_fixed(g, batch, distances, seg, beta, grad);
    const double h = 1e-4;
    int checked = 0;
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double saved = g.theta()[j];
      g.theta()[j] = saved + h;
      const double up = compute_loss_fixed(g, batch, distances, seg, beta).total;
      g.theta()[j] = saved - h;
      const double down = compute_loss_fixed(g, batch, distances, seg, beta).total;
      g.theta()[j] = saved;
      const double fd = (up - down) / (2 * h);
      if (std::abs(grad[j]) > 1e-8) {
        CHECK(std::abs(grad[j] - fd) <= 1e-3 * std::max(std::abs(grad[j]), std::abs(fd)));
        ++checked;
      }
    }
    CHECK(checked > 10);
  }
}

TEST_CASE("batched loss agrees across thread counts and reduction modes") {
  StreamRng rng(22);
  DensityGrid g({6, 6, 6}, {{0, 0, 0}, {1, 1, 1}});
  for (double& t : g.theta()) t = -2.0 + 4.0 * rng.uniform();
  const auto batch = interior_samples(rng, 200);
  SamplingConfig cfg;
  cfg.far = 2.0;
  LossOptions opt;
  opt.beta = 0.5;
  opt.key = 17;
  const int saved = thread_count();
  std::vector<double> a(g.size(), 0.0), b(g.size(), 0.0), c(g.size(), 0.0);
  set_thread_count(1);
  const auto la = compute_loss(g, batch, cfg, opt, a);
  set_thread_count(3);
  const auto lb = compute_loss(g, batch, cfg, opt, b);
  opt.deterministic = false;
  const auto lc = compute_loss(g, batch, cfg, opt, c);
  set_thread_count(saved);
  CHECK(la.total == lb.total);
  CHECK(a == b);
  CHECK(lc.total == doctest::Approx(la.total).epsilon(1e-12));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(c[i] == doctest::Approx(a[i]).epsilon(1e-9).scale(1e-12));
  CHECK(la.lit + la.shadow == 200);
}

TEST_CASE("training configuration") {
  const auto desk = TrainConfig::desk();
  CHECK(desk.iterations == 20000);
  CHECK(desk.warmup == 2500);
  CHECK(desk.beta == doctest::Approx(1.0 / 6000.0));
  const auto full = TrainConfig::full_scale();
  CHECK(full.iterations == 200000);
  CHECK(full.warmup == 25000);
  // Grid parameters take the same step sizes at either scale; the rate decays tenfold.
  CHECK(full.learning_rate == desk.learning_rate);
  CHECK(full.learning_rate_at(0) == doctest::Approx(full.learning_rate));
  CHECK(full.learning_rate_at(full.iterations) == doctest::Approx(0.1 * full.learning_rate));
  CHECK(full.learning_rate_at(full.iterations / 2) ==
        doctest::Approx(full.learning_rate / std::sqrt(10.0)));
  CHECK(desk.beta_at(2499) == 0.0);
  CHECK(desk.beta_at(2500) == desk.beta);

  auto bad = desk;
  bad.warmup = bad.iterations;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = desk;
  bad.beta = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = desk;
  bad.sampling.coarse = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  auto j = to_json(desk);
  const auto back = train_config_from_json(j);
  CHECK(to_json(back) == j);
  const auto over = train_config_from_json({{"iterations", 50}, {"warmup", 10}, {"sampling", {{"coarse", 8}}}});
  CHECK(over.iterations == 50);
  CHECK(over.sampling.coarse == 8);
  CHECK(over.sampling.fine == desk.sampling.fine);
  CHECK(train_config_from_json({{"preset", "full"}}).iterations == 200000);
}

TEST_CASE("optimization is deterministic and follows the beta schedule") {
  const auto cam = CameraModel::look_at({0, 0, 1.2}, {0, 0, 0}, {0, 1, 0}, test::kPi / 3, 8, 8);
  auto data = plane_dataset(cam, {0.3, 0.2, 0.5}, 1.0);
  for (std::size_t i = 0; i < data.size(); i += 3) data[i].lit = false;
  const Aabb bounds{{-0.8, -0.8, -0.3}, {0.8, 0.8, 1.0}};
  auto cfg = small_config(30);
  auto run = [&](int threads) {
    const int saved = thread_count();
    set_thread_count(threads);
    DensityGrid g({8, 8, 8}, bounds);
    const auto res = optimize(g, data, cfg);
    set_thread_count(saved);
    return std::pair{std::vector<double>(g.theta().begin(), g.theta().end()), res.history};
  };
  const auto [ta, ha] = run(1);
  const auto [tb, hb] = run(1);
  const auto [tc, hc] = run(3);
  CHECK(ta == tb);
  CHECK(ta == tc);
  REQUIRE(ha.size() == hc.size());
  for (std::size_t i = 0; i < ha.size(); ++i) CHECK(ha[i].loss.total == hc[i].loss.total);
  // Rows at 0, 5, ..., 25 and the final iteration.
  REQUIRE(ha.size() == 7);
  CHECK(ha.back().iteration == 29);
  for (const auto& row : ha) {
    CHECK(std::isfinite(row.loss.total));
    if (row.iteration < cfg.warmup) {
      CHECK(row.loss.beta == 0.0);
      CHECK(row.loss.total == row.loss.primary);
    } else {
      CHECK(row.loss.beta == cfg.beta);
    }
    CHECK(row.learning_rate == cfg.learning_rate_at(row.iteration));
  }
  cfg.seed = 1;
  DensityGrid g({8, 8, 8}, bounds);
  optimize(g, data, cfg);
  CHECK(std::vector<double>(g.theta().begin(), g.theta().end()) != ta);
}

TEST_CASE("non-finite loss aborts with a diagnostic dump") {
  const auto dir = test::scratch_dir("failure");
  const auto cam = CameraModel::look_at({0, 0, 1.2}, {0, 0, 0}, {0, 1, 0}, 1.0, 4, 4);
  auto data = plane_dataset(cam, {0.3, 0.2, 0.5}, 1.0);
  for (auto& s : data) s.t_peak = std::numeric_limits<double>::quiet_NaN();
  auto cfg = small_config(10);
  cfg.failure_dump = dir / "failure.json";
  DensityGrid g({4, 4, 4}, {{-1, -1, -0.5}, {1, 1, 1}});
  CHECK_THROWS_AS(optimize(g, data, cfg), NumericalError);
  CHECK(std::filesystem::exists(cfg.failure_dump));
  CHECK_THROWS_AS(optimize(g, {}, cfg), DataError);
}

TEST_CASE("primary loss alone recovers a plane") {
  const auto cam = CameraModel::look_at({0, 0, 1.2}, {0, 0, 0}, {0, 1, 0}, test::kPi / 3, 8, 8);
  const auto data = plane_dataset(cam, {0.3, 0.2, 0.5}, 1.0);
  auto cfg = small_config(1500);
  cfg.warmup = cfg.iterations - 1;
  cfg.beta = 0.0;
  cfg.log_every = 500;
  cfg.sampling.coarse = 32;
  cfg.sampling.fine = 32;
  DensityGrid g({16, 16, 16}, {{-0.8, -0.8, -0.3}, {0.8, 0.8, 1.0}});
  const auto res = optimize(g, data, cfg);
  CHECK(res.history.back().loss.primary < res.history.front().loss.primary);
  const auto depth = render_depth_view(g, cam, cfg.sampling);
  const double tol = kSpeedOfLight * 128e-12 / 2.0;
  for (const auto& s : data) {
    CHECK(depth.valid[s.pixel]);
    const double truth = -s.ray.origin.z / s.ray.direction.z;
    CHECK(std::abs(depth.values[s.pixel] - truth) <= tol);
  }
}

TEST_CASE("empty grid renders an all-invalid depth view") {
  DensityGrid g({6, 6, 6}, {{-1, -1, -1}, {1, 1, 1}}, 1e-6);
  const auto cam = CameraModel::look_at({0, 0, 3}, {0, 0, 0}, {0, 1, 0}, 1.0, 8, 6);
  const auto img = render_depth_view(g, cam, SamplingConfig{});
  CHECK(img.width == 8);
  CHECK(img.height == 6);
  CHECK(std::none_of(img.valid.begin(), img.valid.end(), [](bool b) { return b; }));
}

TEST_CASE("isosurface of a sphere density") {
  const int n = 32;
  const double r = 0.3;
  DensityGrid g({n, n, n}, {{-0.5, -0.5, -0.5}, {0.5, 0.5, 0.5}});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k)
        g.theta()[g.index(i, j, k)] = norm(g.node_position(i, j, k)) < r ? 100.0 : -100.0;
  const auto mesh = extract_mesh(g, 5.0);
  REQUIRE_FALSE(mesh.empty());
  CHECK(mesh.indices_valid());
  const double diag = norm(g.cell_size());
  for (const auto& v : mesh.vertices) {
    CHECK(std::abs(norm(v) - r) <= diag);
    CHECK(g.bounds().contains(v));
  }
  // Faces are oriented outward.
  int outward = 0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& [a, b, c] = mesh.faces[f];
    const Vec3 nrm = cross(mesh.vertices[b] - mesh.vertices[a], mesh.vertices[c] - mesh.vertices[a]);
    outward += dot(nrm, (mesh.vertices[a] + mesh.vertices[b] + mesh.vertices[c]) / 3.0) > 0.0;
  }
  CHECK(outward == static_cast<int>(mesh.faces.size()));

  // A smooth radial density gives a surface close to the true sphere area.
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k)
        g.theta()[g.index(i, j, k)] = softplus_inverse(std::max(1e-3, 5.0 + 50.0 * (r - norm(g.node_position(i, j, k)))));
  const auto smooth = extract_mesh(g, 5.0);
  CHECK(smooth.surface_area() == doctest::Approx(4.0 * test::kPi * r * r).epsilon(0.03));
  for (const auto& v : smooth.vertices) CHECK(std::abs(norm(v) - r) <= 0.25 * diag);

  DensityGrid empty({8, 8, 8}, {{0, 0, 0}, {1, 1, 1}});
  CHECK(extract_mesh(empty, 5.0).empty());
  CHECK_THROWS_AS(extract_mesh(empty, 0.0), std::invalid_argument);
}
