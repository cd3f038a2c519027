#include "tbl/reconstruct.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include "tbl/binary_io.hpp"
#include "tbl/errors.hpp"
#include "tbl/parallel.hpp"
#include "tbl/rng.hpp"

namespace tbl {

std::vector<TrainingSample> build_dataset(const std::vector<PreprocessedView>& views) {
  std::vector<TrainingSample> out;
  if (views.empty()) return out;
  const CameraModel& cam = views.front().camera;
  for (std::size_t v = 0; v < views.size(); ++v) {
    const PreprocessedView& view = views[v];
    if (!(view.camera == cam))
      throw DataError("preprocessed views were captured with different camera metadata");
    for (int u = 0; u < cam.width; ++u)
      for (int vv = 0; vv < cam.height; ++vv) {
        const int i = cam.pixel_index(u, vv);
        if (!view.valid[i]) continue;
        TrainingSample s;
        s.ray = pixel_ray(cam, u, vv);
        s.l = view.l;
        s.d1 = view.d1;
        s.lit = view.lit[i] && std::isfinite(view.tof[i]);
        s.t_peak = s.lit ? view.tof[i] : 0.0;
        s.view = static_cast<int>(v);
        s.pixel = i;
        out.push_back(s);
      }
  }
  return out;
}

void TrainConfig::validate() const {
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (warmup < 0 || warmup >= iterations) throw ConfigError("warmup must satisfy 0 <= W_b < iterations");
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(learning_rate > 0.0) || !(final_learning_rate > 0.0))
    throw ConfigError("learning rates must be > 0");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  try {
    sampling.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

double TrainConfig::learning_rate_at(int iteration) const {
  const double frac = static_cast<double>(iteration) / iterations;
  return learning_rate * std::pow(final_learning_rate / learning_rate, frac);
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.iterations = 20000;
  c.warmup = 2500;
  c.batch_size = 1024;
  c.learning_rate = 0.5;
  c.final_learning_rate = 0.05;
  c.sampling.coarse = 48;
  c.sampling.fine = 32;
  c.sampling.near = 0.05;
  c.sampling.far = 12.0;
  c.sampling.secondary_coarse = 32;
  c.sampling.secondary_fine = 8;
  return c;
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig c = desk();
  c.iterations = 200000;
  c.warmup = 25000;
  c.sampling.coarse = 64;
  c.sampling.fine = 128;
  c.sampling.secondary_coarse = 64;
  c.sampling.secondary_fine = 64;
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"iterations", c.iterations},
          {"warmup", c.warmup},
          {"beta", c.beta},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"final_learning_rate", c.final_learning_rate},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_epsilon", c.adam_epsilon},
          {"seed", c.seed},
          {"deterministic", c.deterministic},
          {"log_every", c.log_every},
          {"sampling",
           {{"coarse", c.sampling.coarse},
            {"fine", c.sampling.fine},
            {"near", c.sampling.near},
            {"far", c.sampling.far},
            {"stratified", c.sampling.stratified},
            {"secondary_coarse", c.sampling.secondary_coarse},
            {"secondary_fine", c.sampling.secondary_fine},
            {"standoff", c.sampling.standoff}}}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  try {
    if (j.contains("preset")) {
      const auto preset = j["preset"].get<std::string>();
      if (preset == "full")
        c = TrainConfig::full_scale();
      else if (preset == "desk")
        c = TrainConfig::desk();
      else
        throw ConfigError("unknown training preset '" + preset + "'");
    }
    c.iterations = j.value("iterations", c.iterations);
    c.warmup = j.value("warmup", c.warmup);
    c.beta = j.value("beta", c.beta);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.final_learning_rate = j.value("final_learning_rate", c.final_learning_rate);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
    c.seed = j.value("seed", c.seed);
    c.deterministic = j.value("deterministic", c.deterministic);
    c.log_every = j.value("log_every", c.log_every);
    if (j.contains("sampling")) {
      const auto& s = j["sampling"];
      c.sampling.coarse = s.value("coarse", c.sampling.coarse);
      c.sampling.fine = s.value("fine", c.sampling.fine);
      c.sampling.near = s.value("near", c.sampling.near);
      c.sampling.far = s.value("far", c.sampling.far);
      c.sampling.stratified = s.value("stratified", c.sampling.stratified);
      c.sampling.secondary_coarse = s.value("secondary_coarse", c.sampling.secondary_coarse);
      c.sampling.secondary_fine = s.value("secondary_fine", c.sampling.secondary_fine);
      c.sampling.standoff = s.value("standoff", c.sampling.standoff);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
  return c;
}

namespace {

struct SampleLoss {
  double primary = 0.0;    // squared ns error (lit only)
  double secondary = 0.0;  // (s - p)^2
};

// Loss and gradient entries for one sample given its primary render. `secondary` renders
// the transmittance from x_p to l.
template <typename SecondaryFn>
SampleLoss sample_loss(const DensityGrid& grid, const TrainingSample& s, const DepthRender& depth,
                       double primary_scale, double secondary_scale, double beta,
                       bool with_secondary, bool want_grad, SecondaryFn&& secondary,
                       std::vector<GradEntry>& entries) {
  SampleLoss out;
  const Vec3 x_hat = s.ray.at(depth.depth);
  const Vec3 to_l = s.l - x_hat;
  const double d2 = norm(to_l);
  double d_loss_d_depth = 0.0;
  if (s.lit) {
    const double t_hat = (s.d1 + d2 + depth.depth) / kSpeedOfLightNs;
    const double err = t_hat - s.t_peak * 1e9;
    out.primary = err * err;
    // d t_hat / d depth: the depth moves x_p along the ray, changing both d2 and d3.
    const double dd2 = d2 > 0.0 ? -dot(to_l, s.ray.direction) / d2 : 0.0;
    d_loss_d_depth += primary_scale * 2.0 * err * (1.0 + dd2) / kSpeedOfLightNs;
  }
  if (with_secondary && d2 > 1e-6) {
    const TransmittanceRender tr = secondary(x_hat, s.l);
    const double diff = s.shadow_target() - tr.transmittance;
    out.secondary = diff * diff;
    const double d_loss_d_p = beta * secondary_scale * (-2.0 * diff);
    if (want_grad && d_loss_d_p != 0.0) {
      backward_transmittance(tr, d_loss_d_p, entries);
      d_loss_d_depth +=
          d_loss_d_p * dot(transmittance_position_gradient(grid, tr), s.ray.direction);
    }
  }
  if (want_grad) backward_depth(depth, d_loss_d_depth, entries);
  return out;
}

void scatter_atomic(const DensityGrid& grid, std::span<const GradEntry> entries, std::span<double> grad) {
  const auto [sx, sy, sz] = grid.strides();
  for (const auto& e : entries) {
    const GridCoord& c = e.coord;
    const double gx1 = e.g * c.fx, gx0 = e.g - gx1;
    const double g01 = gx0 * c.fy, g00 = gx0 - g01;
    const double g11 = gx1 * c.fy, g10 = gx1 - g11;
    const std::size_t b = c.base;
    const std::pair<std::size_t, double> corners[8] = {
        {b, g00 * (1.0 - c.fz)},           {b + sz, g00 * c.fz},
        {b + sy, g01 * (1.0 - c.fz)},      {b + sy + sz, g01 * c.fz},
        {b + sx, g10 * (1.0 - c.fz)},      {b + sx + sz, g10 * c.fz},
        {b + sx + sy, g11 * (1.0 - c.fz)}, {b + sx + sy + sz, g11 * c.fz}};
    for (const auto& [i, v] : corners) std::atomic_ref<double>(grad[i]).fetch_add(v);
  }
}

// Reusable per-sample buffers for the training loop.
struct Workspace {
  std::vector<std::vector<GradEntry>> entries;
  std::vector<SampleLoss> losses;
};

LossBreakdown evaluate_batch(const DensityGrid& grid, std::span<const TrainingSample> batch,
                             const SamplingConfig& sampling, const LossOptions& opt,
                             std::span<double> grad, Workspace& ws) {
  LossBreakdown out;
  out.beta = opt.beta;
  for (const auto& s : batch) (s.lit ? out.lit : out.shadow)++;
  if (batch.empty()) return out;
  const double primary_scale = out.lit > 0 ? 1.0 / out.lit : 0.0;
  const double secondary_scale = 1.0 / static_cast<double>(batch.size());
  const bool want_grad = !grad.empty();
  const bool with_secondary = opt.evaluate_secondary || opt.beta != 0.0;
  ws.losses.assign(batch.size(), {});
  if (ws.entries.size() < batch.size()) ws.entries.resize(batch.size());

  parallel_for(batch.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const TrainingSample& s = batch[i];
      const std::uint64_t key = hash_counters({opt.key, i});
      auto& entries = ws.entries[i];
      entries.clear();
      const DepthRender depth = render_depth(grid, s.ray, sampling, key);
      ws.losses[i] = sample_loss(
          grid, s, depth, primary_scale, secondary_scale, opt.beta, with_secondary, want_grad,
          [&](const Vec3& from, const Vec3& to) {
            return render_transmittance(grid, from, to, sampling, hash_counters({key, 2}));
          },
          entries);
      if (want_grad && !opt.deterministic) {
        scatter_atomic(grid, entries, grad);
        entries.clear();
      }
    }
  });

  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.primary += ws.losses[i].primary;
    out.secondary += ws.losses[i].secondary;
    if (want_grad && opt.deterministic) accumulate(grid, ws.entries[i], grad);
  }
  out.primary *= primary_scale;
  out.secondary *= secondary_scale;
  out.total = out.primary + opt.beta * out.secondary;
  return out;
}

}  // namespace

LossBreakdown compute_loss(const DensityGrid& grid, std::span<const TrainingSample> batch,
                           const SamplingConfig& sampling, const LossOptions& options,
                           std::span<double> grad) {
  Workspace ws;
  return evaluate_batch(grid, batch, sampling, options, grad, ws);
}

LossBreakdown compute_loss_fixed(const DensityGrid& grid, std::span<const TrainingSample> batch,
                                 const std::vector<std::vector<double>>& primary_distances,
                                 const SegmentSamples& secondary, double beta,
                                 std::span<double> grad) {
  LossBreakdown out;
  out.beta = beta;
  for (const auto& s : batch) (s.lit ? out.lit : out.shadow)++;
  if (batch.empty()) return out;
  const double primary_scale = out.lit > 0 ? 1.0 / out.lit : 0.0;
  const double secondary_scale = 1.0 / static_cast<double>(batch.size());
  std::vector<GradEntry> entries;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch[i];
    const DepthRender depth = render_depth_at(grid, s.ray, primary_distances[i], 0.0);
    entries.clear();
    const SampleLoss l = sample_loss(
        grid, s, depth, primary_scale, secondary_scale, beta, true, !grad.empty(),
        [&](const Vec3& from, const Vec3& to) {
          return render_transmittance_at(grid, from, to, secondary);
        },
        entries);
    out.primary += l.primary;
    out.secondary += l.secondary;
    if (!grad.empty()) accumulate(grid, entries, grad);
  }
  out.primary *= primary_scale;
  out.secondary *= secondary_scale;
  out.total = out.primary + beta * out.secondary;
  return out;
}

TrainResult optimize(DensityGrid& grid, const std::vector<TrainingSample>& dataset,
                     const TrainConfig& cfg, const TrainCallback& callback) {
  cfg.validate();
  if (dataset.empty()) throw DataError("training set is empty");
  TrainResult result;
  const std::size_t n = grid.size();
  std::vector<double> grad(n), m1(n, 0.0), m2(n, 0.0);
  std::vector<TrainingSample> batch(cfg.batch_size);
  Workspace ws;
  double b1_pow = 1.0, b2_pow = 1.0;

  for (int it = 0; it < cfg.iterations; ++it) {
    StreamRng pick(hash_counters({cfg.seed, 0xba7c4ULL, static_cast<std::uint64_t>(it)}));
    for (auto& s : batch) s = dataset[pick() % dataset.size()];
    const bool log_now = it % cfg.log_every == 0 || it + 1 == cfg.iterations;
    LossOptions opt;
    opt.beta = cfg.beta_at(it);
    opt.evaluate_secondary = log_now;
    opt.key = hash_counters({cfg.seed, 0x5a3e1ULL, static_cast<std::uint64_t>(it)});
    opt.deterministic = cfg.deterministic;
    std::fill(grad.begin(), grad.end(), 0.0);
    const LossBreakdown loss = evaluate_batch(grid, batch, cfg.sampling, opt, grad, ws);
    const double lr = cfg.learning_rate_at(it);

    if (!std::isfinite(loss.total)) {
      if (!cfg.failure_dump.empty()) {
        std::size_t bad_theta = 0;
        for (double t : grid.theta()) bad_theta += !std::isfinite(t);
        write_json_file({{"iteration", it},
                         {"primary", loss.primary},
                         {"secondary", loss.secondary},
                         {"beta", loss.beta},
                         {"learning_rate", lr},
                         {"non_finite_parameters", bad_theta},
                         {"config", to_json(cfg)}},
                        cfg.failure_dump);
      }
      throw NumericalError("non-finite loss at iteration " + std::to_string(it));
    }

    b1_pow *= cfg.adam_beta1;
    b2_pow *= cfg.adam_beta2;
    const double c1 = 1.0 / (1.0 - b1_pow);
    const double c2 = 1.0 / (1.0 - b2_pow);
    auto theta = grid.theta();
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2, eps = cfg.adam_epsilon;
    for (std::size_t i = 0; i < n; ++i) {
      const double g = grad[i];
      m1[i] = b1 * m1[i] + (1.0 - b1) * g;
      m2[i] = b2 * m2[i] + (1.0 - b2) * g * g;
      theta[i] -= lr * (m1[i] * c1) / (std::sqrt(m2[i] * c2) + eps);
    }

    if (log_now) {
      HistoryRow row{it, loss, lr};
      result.history.push_back(row);
      if (callback) callback(row);
    }
  }
  return result;
}

void write_history_csv(const std::vector<HistoryRow>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.precision(10);
  out << "iteration,L_primary,L_secondary,total,lr\n";
  for (const auto& r : history)
    out << r.iteration << ',' << r.loss.primary << ',' << r.loss.secondary << ',' << r.loss.total
        << ',' << r.learning_rate << '\n';
}

DepthImage render_depth_view(const DensityGrid& grid, const CameraModel& camera,
                             const SamplingConfig& sampling) {
  SamplingConfig cfg = sampling;
  cfg.stratified = false;
  DepthImage img(camera.width, camera.height);
  parallel_for(img.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const int u = static_cast<int>(i) / camera.height;
      const int v = static_cast<int>(i) % camera.height;
      const DepthRender r = render_depth(grid, pixel_ray(camera, u, v), cfg, i);
      img.values[i] = r.depth;
      img.valid[i] = r.weight_sum >= 0.5;
    }
  });
  return img;
}

namespace {

// Cube corner offsets (x, y, z bits) and the six tetrahedra sharing the 0-7 diagonal.
constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0},
                               {0, 0, 1}, {1, 0, 1}, {0, 1, 1}, {1, 1, 1}};
constexpr int kTets[6][4] = {{0, 7, 1, 3}, {0, 7, 3, 2}, {0, 7, 2, 6},
                             {0, 7, 6, 4}, {0, 7, 4, 5}, {0, 7, 5, 1}};

struct EdgeKey {
  std::size_t a, b;
  bool operator==(const EdgeKey&) const = default;
};
struct EdgeHash {
  std::size_t operator()(const EdgeKey& k) const { return mix64(k.a * 0x9e3779b97f4a7c15ULL ^ k.b); }
};

}  // namespace

TriangleMesh extract_mesh(const DensityGrid& grid, double isolevel) {
  if (!(isolevel > 0.0)) throw std::invalid_argument("isolevel must be > 0");
  const auto [nx, ny, nz] = grid.resolution();
  TriangleMesh mesh;
  std::vector<double> field(grid.size());
  const auto theta = grid.theta();
  for (std::size_t i = 0; i < field.size(); ++i) field[i] = softplus(theta[i]) - isolevel;
  std::unordered_map<EdgeKey, std::uint32_t, EdgeHash> edge_vertex;

  auto node_pos = [&](std::size_t idx) {
    const int ix = static_cast<int>(idx / (static_cast<std::size_t>(ny) * nz));
    const int iy = static_cast<int>((idx / nz) % ny);
    const int iz = static_cast<int>(idx % nz);
    return grid.node_position(ix, iy, iz);
  };
  auto vertex_on = [&](std::size_t a, std::size_t b) {
    if (a > b) std::swap(a, b);
    const EdgeKey key{a, b};
    if (auto it = edge_vertex.find(key); it != edge_vertex.end()) return it->second;
    const double fa = field[a], fb = field[b];
    const double t = fa / (fa - fb);
    const Vec3 pa = node_pos(a);
    const Vec3 pb = node_pos(b);
    const auto id = static_cast<std::uint32_t>(mesh.vertices.size());
    mesh.vertices.push_back(pa + (pb - pa) * t);
    edge_vertex.emplace(key, id);
    return id;
  };
  // Orient each triangle so its normal points from inside (field > 0) to outside.
  auto emit = [&](std::uint32_t a, std::uint32_t b, std::uint32_t c, const Vec3& inside_point) {
    const Vec3& pa = mesh.vertices[a];
    const Vec3 n = cross(mesh.vertices[b] - pa, mesh.vertices[c] - pa);
    if (norm(n) == 0.0) return;
    if (dot(n, inside_point - pa) > 0.0) std::swap(b, c);
    mesh.faces.push_back({a, b, c});
  };

  for (int ix = 0; ix + 1 < nx; ++ix)
    for (int iy = 0; iy + 1 < ny; ++iy)
      for (int iz = 0; iz + 1 < nz; ++iz) {
        std::size_t corner[8];
        bool any_in = false, any_out = false;
        for (int c = 0; c < 8; ++c) {
          corner[c] = grid.index(ix + kCorner[c][0], iy + kCorner[c][1], iz + kCorner[c][2]);
          (field[corner[c]] > 0.0 ? any_in : any_out) = true;
        }
        if (!any_in || !any_out) continue;
        for (const auto& tet : kTets) {
          std::size_t in[4], out[4];
          int n_in = 0, n_out = 0;
          for (int v : tet) {
            const std::size_t node = corner[v];
            if (field[node] > 0.0)
              in[n_in++] = node;
            else
              out[n_out++] = node;
          }
          if (n_in == 0 || n_out == 0) continue;
          if (n_in == 1 || n_out == 1) {
            // One vertex separated from the other three: one triangle.
            const bool lone_in = n_in == 1;
            const std::size_t lone = lone_in ? in[0] : out[0];
            const std::size_t* rest = lone_in ? out : in;
            const Vec3 inside = lone_in ? node_pos(lone) : node_pos(rest[0]);
            emit(vertex_on(lone, rest[0]), vertex_on(lone, rest[1]), vertex_on(lone, rest[2]),
                 inside);
          } else {
            // Two and two: a quad split into two triangles.
            const std::uint32_t a = vertex_on(in[0], out[0]);
            const std::uint32_t b = vertex_on(in[0], out[1]);
            const std::uint32_t c = vertex_on(in[1], out[1]);
            const std::uint32_t d = vertex_on(in[1], out[0]);
            const Vec3 inside = (node_pos(in[0]) + node_pos(in[1])) * 0.5;
            emit(a, b, c, inside);
            emit(a, c, d, inside);
          }
        }
      }
  return mesh;
}

}  // namespace tbl
