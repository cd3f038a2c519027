#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "tbl/errors.hpp"
#include "tbl/evaluation.hpp"

using namespace tbl;

namespace {

DepthImage ramp_image(int w, int h) {
  DepthImage img(w, h);
  for (std::size_t i = 0; i < img.size(); ++i) {
    img.values[i] = 1.0 + 0.01 * static_cast<double>(i);
    img.valid[i] = true;
  }
  return img;
}

PointCloud random_cloud(StreamRng& rng, int n) {
  PointCloud c(n);
  for (auto& p : c) p = test::random_in(rng, {{-1, -2, -0.5}, {1, 2, 0.5}});
  return c;
}

std::size_t count(const std::vector<bool>& v) { return std::count(v.begin(), v.end(), true); }

std::vector<PreprocessedView> simulate_views(const SceneDescription& d, int views) {
  SimulationParams p;
  std::vector<PreprocessedView> out;
  for (int k = 0; k < views; ++k)
    out.push_back(preprocess_view(simulate_view(d.scene, d.rig, k, p).image, p.pulse, {}));
  return out;
}

}  // namespace

TEST_CASE("depth error identities") {
  const auto truth = ramp_image(6, 5);
  CHECK(l1_depth(truth, truth) == 0.0);
  CHECK(psnr_depth(truth, truth, 4.0) == 100.0);
  auto shifted = truth;
  for (double& v : shifted.values) v += 0.1;
  CHECK(l1_depth(shifted, truth) == doctest::Approx(0.1).epsilon(1e-12));

  // MSE = peak^2 / 100 gives 20 dB.
  auto off = truth;
  for (double& v : off.values) v += 0.4;
  CHECK(psnr_depth(off, truth, 4.0) == doctest::Approx(20.0).epsilon(1e-12));

  // Mask and validity restrict the compared pixels.
  shifted.values[0] += 10.0;
  std::vector<bool> mask(truth.size(), true);
  mask[0] = false;
  CHECK(l1_depth(shifted, truth, mask) == doctest::Approx(0.1).epsilon(1e-12));
  shifted.valid[0] = false;
  CHECK(l1_depth(shifted, truth) == doctest::Approx(0.1).epsilon(1e-12));

  std::vector<bool> none(truth.size(), false);
  CHECK_THROWS_AS(l1_depth(truth, truth, none), std::invalid_argument);
  CHECK_THROWS_AS(psnr_depth(truth, truth, 4.0, none), std::invalid_argument);
  CHECK_THROWS_AS(l1_depth(ramp_image(5, 5), truth), std::invalid_argument);
}

TEST_CASE("lower error never lowers PSNR") {
  const auto truth = ramp_image(8, 8);
  StreamRng rng(1);
  auto pred = truth;
  for (double& v : pred.values) v += rng.uniform() - 0.5;
  double prev = psnr_depth(pred, truth, 3.0);
  for (int step = 0; step < 10; ++step) {
    for (std::size_t i = 0; i < pred.size(); ++i) pred.values[i] = truth.values[i] + 0.7 * (pred.values[i] - truth.values[i]);
    const double p = psnr_depth(pred, truth, 3.0);
    CHECK(p >= prev);
    prev = p;
  }
}

TEST_CASE("chamfer distance") {
  CHECK(chamfer({{0, 0, 0}}, {{1, 0, 0}}) == 1.0);
  StreamRng rng(2);
  const auto a = random_cloud(rng, 300);
  CHECK(chamfer(a, a) == 0.0);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = random_cloud(rng, 20 + trial * 3);
    const auto y = random_cloud(rng, 50 + trial);
    const double fast = chamfer(x, y);
    CHECK(std::abs(fast - chamfer_brute_force(x, y)) <= 1e-12);
    CHECK(fast == chamfer(y, x));
    CHECK(fast >= 0.0);
  }
  CHECK_THROWS_AS(chamfer({}, a), std::invalid_argument);
}

TEST_CASE("nearest neighbour queries are exact") {
  StreamRng rng(3);
  const auto pts = random_cloud(rng, 1000);
  const KdTree tree(pts);
  for (int i = 0; i < 200; ++i) {
    const Vec3 q = test::random_in(rng, {{-1.5, -2.5, -1}, {1.5, 2.5, 1}});
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : pts) best = std::min(best, distance(p, q));
    CHECK(tree.nearest_distance(q) == best);
  }
}

TEST_CASE("occupancy IoU") {
  const std::array<int, 3> res{14, 14, 14};
  const Aabb bounds{{0, 0, 0}, {14, 14, 14}};
  const Scene cube({test::box_primitive({2, 2, 2}, {12, 12, 12})}, 0.0);
  const Scene dilated({test::box_primitive({1, 1, 1}, {13, 13, 13})}, 0.0);
  const auto truth = truth_occupancy(cube, res, bounds);
  const auto pred = truth_occupancy(dilated, res, bounds);
  CHECK(count(truth.cells) == 1000);
  CHECK(count(pred.cells) == 1728);
  CHECK(occupancy_iou(pred.cells, truth.cells) == doctest::Approx(1000.0 / 1728.0).epsilon(1e-12));
  CHECK(occupancy_iou(pred.cells, truth.cells) == doctest::Approx(0.5787).epsilon(1e-4));
  CHECK(occupancy_iou(truth.cells, pred.cells) == occupancy_iou(pred.cells, truth.cells));
  CHECK(occupancy_iou(truth.cells, truth.cells) == 1.0);

  std::vector<bool> a(64, false), b(64, false);
  a[3] = true;
  b[4] = true;
  CHECK(occupancy_iou(a, b) == 0.0);
  CHECK(occupancy_iou(std::vector<bool>(64, false), std::vector<bool>(64, false)) == 1.0);
  std::vector<bool> region(64, false);
  region[3] = true;
  CHECK(occupancy_iou(a, a, region) == 1.0);
  CHECK(occupancy_iou(a, b, region) == 0.0);
  CHECK_THROWS_AS(occupancy_iou(a, std::vector<bool>(10)), std::invalid_argument);

  const auto inner = region_mask(truth, {{4, 4, 4}, {10, 10, 10}});
  CHECK(count(inner) == 216);
  CHECK(occupancy_iou(pred.cells, truth.cells, inner) == 1.0);
}

TEST_CASE("depth images of the truth scene") {
  const auto d = test::small_room(16);
  const auto img = truth_depth_image(d.scene, d.rig.camera);
  const auto raw = ground_truth_depth(d.scene, d.rig.camera);
  for (std::size_t i = 0; i < img.size(); ++i) {
    CHECK(img.valid[i]);
    CHECK(img.values[i] == raw[i]);
    CHECK(img.values[i] > 0.0);
  }
}

TEST_CASE("behind-object mask") {
  SUBCASE("empty room lit from every wall") {
    const auto d = test::small_room(16, false);
    const auto mask = behind_object_mask(d.scene, d.rig.camera, d.rig.targets);
    CHECK(count(mask) == 0);
  }
  SUBCASE("floor strip behind a pillar lit from one side") {
    SceneDescription d{Scene({test::box_primitive({-2, -2, -2}, {2, 2, 2}, false),
                              test::box_primitive({-0.4, -0.4, -2}, {0.4, 0.4, -0.4})},
                             0.0),
                       {}};
    d.rig.camera = CameraModel::look_at({0, 0, 1.9}, {0, 0, 0}, {0, 1, 0}, test::kPi / 2, 32, 32);
    const std::vector<Vec3> lights{{-2, -0.3, -0.8}, {-2, 0, -0.8}, {-2, 0.3, -0.8}};
    const auto mask = behind_object_mask(d.scene, d.rig.camera, lights);
    auto pixel_of = [&](const Vec3& p) {
      const auto uv = d.rig.camera.project_direction(normalize(p - d.rig.camera.position));
      REQUIRE(uv.has_value());
      return d.rig.camera.pixel_index(uv->first, uv->second);
    };
    CHECK(mask[pixel_of({0.6, 0, -2})]);
    CHECK(mask[pixel_of({1.0, 0.05, -2})]);
    CHECK_FALSE(mask[pixel_of({-1.5, 0, -2})]);
    CHECK_FALSE(mask[pixel_of({0, 1.5, -2})]);
    // The pillar top sits above every light.
    CHECK(mask[pixel_of({0, 0, -0.4})]);
    // Brute force over all lights.
    for (int u = 0; u < 32; ++u)
      for (int v = 0; v < 32; ++v) {
        const auto hit = d.scene.intersect(pixel_ray(d.rig.camera, u, v));
        bool seen = false;
        for (const auto& l : lights) seen = seen || d.scene.segment_visible(hit->point, l);
        CHECK(mask[d.rig.camera.pixel_index(u, v)] == !seen);
      }
    // More lights never grow the mask.
    auto more = lights;
    more.push_back({2, 0, -0.8});
    const auto smaller = behind_object_mask(d.scene, d.rig.camera, more);
    for (std::size_t i = 0; i < mask.size(); ++i) CHECK((!smaller[i] || mask[i]));
    CHECK(count(smaller) < count(mask));
  }
}

TEST_CASE("two-bounce path inversion") {
  StreamRng rng(4);
  for (int i = 0; i < 500; ++i) {
    const Vec3 sensor = test::random_in(rng, {{-1, -1, -1}, {1, 1, 1}});
    const Vec3 dir = test::random_unit(rng);
    const double d3 = 0.1 + 3.0 * rng.uniform();
    const Vec3 l = test::random_in(rng, {{-3, -3, -3}, {3, 3, 3}});
    const double path = distance(l, sensor + dir * d3) + d3;
    CHECK(std::abs(invert_two_bounce(sensor, dir, l, path) - d3) <= 1e-6);
  }
  // Path shorter than the straight line to l has no solution.
  CHECK(std::isnan(invert_two_bounce({0, 0, 0}, {1, 0, 0}, {3, 0, 0}, 2.0)));
}

TEST_CASE("shadow carving") {
  SUBCASE("empty room is carved between the sensor and the walls") {
    const auto d = test::small_room(16, false);
    const auto views = simulate_views(d, 4);
    const std::array<int, 3> res{16, 16, 16};
    const Aabb bounds{{-2, -2, -2}, {2, 2, 2}};
    const auto g = shadow_carve_baseline(views, res, bounds);
    // Nodes on the central column in front of the camera are free.
    const auto column = region_mask(g, {{-0.3, -0.3, -1.5}, {0.3, 0.3, 1.5}});
    REQUIRE(count(column) > 0);
    for (std::size_t i = 0; i < column.size(); ++i)
      if (column[i]) CHECK_FALSE(g.cells[i]);
    CHECK(count(g.cells) < g.cells.size() / 2);
  }
  SUBCASE("carving only removes") {
    const auto d = test::small_room(16);
    const auto views = simulate_views(d, 6);
    const std::array<int, 3> res{12, 12, 12};
    const Aabb bounds{{-2, -2, -2}, {2, 2, 2}};
    std::vector<bool> prev(12 * 12 * 12, true);
    for (std::size_t k = 1; k <= views.size(); ++k) {
      const std::vector<PreprocessedView> some(views.begin(), views.begin() + k);
      const auto g = shadow_carve_baseline(some, res, bounds);
      for (std::size_t i = 0; i < prev.size(); ++i) CHECK((!g.cells[i] || prev[i]));
      prev = g.cells;
    }
  }
  SUBCASE("separated laser is rejected") {
    const auto d = test::small_room(8);
    auto views = simulate_views(d, 1);
    views[0].laser = views[0].laser + Vec3{0.5, 0, 0};
    CHECK_THROWS_AS(shadow_carve_baseline(views, {8, 8, 8}, {{-2, -2, -2}, {2, 2, 2}}), DataError);
  }
}

TEST_CASE("orbit cameras") {
  const Vec3 center{0.1, -0.2, 0.3};
  const auto cams = orbit_cameras(center, 1.5, 0.4, 120, 1.0, 16, 12);
  REQUIRE(cams.size() == 120);
  for (const auto& c : cams) {
    const Vec3 off = c.position - center;
    CHECK(std::hypot(off.x, off.z) == doctest::Approx(1.5));
    CHECK(off.y == doctest::Approx(0.4));
    CHECK(c.width == 16);
    CHECK(c.height == 12);
    // The image center looks at the orbit center.
    const auto uv = c.project_direction(normalize(center - c.position));
    REQUIRE(uv.has_value());
    CHECK(uv->first >= 7);
    CHECK(uv->first <= 8);
    CHECK(uv->second >= 5);
    CHECK(uv->second <= 6);
  }
  CHECK_THROWS_AS(orbit_cameras(center, 1.0, 0.0, 0, 1.0, 4, 4), std::invalid_argument);
}
