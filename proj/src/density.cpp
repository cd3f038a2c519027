#include "tbl/density.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tbl/binary_io.hpp"
#include "tbl/errors.hpp"
#include "tbl/rng.hpp"
#include "tbl/scene.hpp"

namespace tbl {

namespace {

constexpr char kGridMagic[] = "TBL_GR01";
// Added to importance weights so empty rays still spread fine samples.
constexpr double kPdfFloor = 1e-5;

// Inverse CDF over piecewise-constant density on cells [edges[i], edges[i+1]).
std::vector<double> invert_cdf(std::span<const double> edges, std::span<const double> weights,
                               int count, bool stratified, std::uint64_t key) {
  const std::size_t n = weights.size();
  std::vector<double> cdf(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) cdf[i + 1] = cdf[i] + std::max(weights[i], 0.0) + kPdfFloor;
  const double total = cdf[n];
  std::vector<double> out;
  out.reserve(count);
  StreamRng rng(hash_counters({key, 0xf17eULL}));
  for (int j = 0; j < count; ++j) {
    const double xi = stratified ? rng.uniform() : 0.5;
    const double target = (j + xi) / count * total;
    auto it = std::upper_bound(cdf.begin() + 1, cdf.end(), target);
    const std::size_t cell = std::min<std::size_t>(it - cdf.begin() - 1, n - 1);
    const double span = cdf[cell + 1] - cdf[cell];
    const double t = span > 0.0 ? (target - cdf[cell]) / span : 0.5;
    out.push_back(edges[cell] + std::clamp(t, 0.0, 1.0) * (edges[cell + 1] - edges[cell]));
  }
  return out;
}

std::vector<double> merge_strict(std::vector<double> a, const std::vector<double>& b) {
  a.insert(a.end(), b.begin(), b.end());
  std::sort(a.begin(), a.end());
  std::vector<double> out;
  out.reserve(a.size());
  for (double v : a)
    if (out.empty() || v > out.back() + 1e-12) out.push_back(v);
  return out;
}

// Voronoi cell widths of sorted points clipped to [lo, hi].
std::vector<double> voronoi_widths(std::span<const double> pts, double lo, double hi) {
  std::vector<double> w(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double a = i == 0 ? lo : 0.5 * (pts[i - 1] + pts[i]);
    const double b = i + 1 == pts.size() ? hi : 0.5 * (pts[i] + pts[i + 1]);
    w[i] = std::max(0.0, b - a);
  }
  return w;
}

void evaluate(const DensityGrid& grid, const Vec3& p, RaySample& s) {
  s.coord = grid.locate(p);
  if (!s.coord.inside) {
    s.sigma = 0.0;
    s.dsigma_draw = 0.0;
    return;
  }
  const double raw = grid.interpolate(s.coord);
  s.sigma = softplus(raw);
  s.dsigma_draw = sigmoid(raw);
}

}  // namespace

DensityGrid::DensityGrid(std::array<int, 3> resolution, const Aabb& bounds, double initial_sigma)
    : res_(resolution), bounds_(bounds) {
  for (int r : res_)
    if (r < 2) throw std::invalid_argument("grid resolution must be >= 2 along every axis");
  if (!bounds.valid()) throw std::invalid_argument("grid bounds must have min < max");
  if (!(initial_sigma > 0.0)) throw std::invalid_argument("initial density must be > 0");
  const Vec3 ext = bounds.extent();
  cell_ = {ext.x / res_[0], ext.y / res_[1], ext.z / res_[2]};
  theta_.assign(static_cast<std::size_t>(res_[0]) * res_[1] * res_[2], softplus_inverse(initial_sigma));
}

Vec3 DensityGrid::node_position(int ix, int iy, int iz) const {
  return {bounds_.min.x + (ix + 0.5) * cell_.x, bounds_.min.y + (iy + 0.5) * cell_.y,
          bounds_.min.z + (iz + 0.5) * cell_.z};
}

GridCoord DensityGrid::locate(const Vec3& p) const {
  GridCoord c;
  if (!bounds_.contains(p)) return c;
  c.inside = true;
  std::array<int, 3> i0{};
  std::array<double, 3> f{};
  for (int a = 0; a < 3; ++a) {
    const double g = (p[a] - bounds_.min[a]) / cell_[a] - 0.5;
    const int n = res_[a];
    if (g <= 0.0) {
      i0[a] = 0;
      f[a] = 0.0;
      c.clamped[a] = true;
    } else if (g >= n - 1) {
      i0[a] = n - 2;
      f[a] = 1.0;
      c.clamped[a] = true;
    } else {
      i0[a] = std::min(static_cast<int>(g), n - 2);
      f[a] = g - i0[a];
    }
  }
  c.base = static_cast<std::uint32_t>(index(i0[0], i0[1], i0[2]));
  c.fx = f[0];
  c.fy = f[1];
  c.fz = f[2];
  return c;
}

double DensityGrid::interpolate(const GridCoord& c) const {
  const auto [sx, sy, sz] = strides();
  const double* t = theta_.data() + c.base;
  const double c00 = t[0] + c.fz * (t[sz] - t[0]);
  const double c01 = t[sy] + c.fz * (t[sy + sz] - t[sy]);
  const double c10 = t[sx] + c.fz * (t[sx + sz] - t[sx]);
  const double c11 = t[sx + sy] + c.fz * (t[sx + sy + sz] - t[sx + sy]);
  const double c0 = c00 + c.fy * (c01 - c00);
  const double c1 = c10 + c.fy * (c11 - c10);
  return c0 + c.fx * (c1 - c0);
}

Vec3 DensityGrid::interpolate_gradient(const GridCoord& c) const {
  if (!c.inside) return {};
  const auto [sx, sy, sz] = strides();
  const double* t = theta_.data() + c.base;
  auto at = [&](int i, int j, int k) { return t[i * sx + j * sy + k * sz]; };
  auto lerp2 = [](double a00, double a01, double a10, double a11, double u, double v) {
    const double a0 = a00 + v * (a01 - a00);
    const double a1 = a10 + v * (a11 - a10);
    return a0 + u * (a1 - a0);
  };
  Vec3 g;
  if (!c.clamped[0])
    g.x = (lerp2(at(1, 0, 0), at(1, 0, 1), at(1, 1, 0), at(1, 1, 1), c.fy, c.fz) -
           lerp2(at(0, 0, 0), at(0, 0, 1), at(0, 1, 0), at(0, 1, 1), c.fy, c.fz)) /
          cell_.x;
  if (!c.clamped[1])
    g.y = (lerp2(at(0, 1, 0), at(0, 1, 1), at(1, 1, 0), at(1, 1, 1), c.fx, c.fz) -
           lerp2(at(0, 0, 0), at(0, 0, 1), at(1, 0, 0), at(1, 0, 1), c.fx, c.fz)) /
          cell_.y;
  if (!c.clamped[2])
    g.z = (lerp2(at(0, 0, 1), at(0, 1, 1), at(1, 0, 1), at(1, 1, 1), c.fx, c.fy) -
           lerp2(at(0, 0, 0), at(0, 1, 0), at(1, 0, 0), at(1, 1, 0), c.fx, c.fy)) /
          cell_.z;
  return g;
}

double DensityGrid::sigma(const Vec3& p) const {
  const GridCoord c = locate(p);
  return c.inside ? softplus(interpolate(c)) : 0.0;
}

void DensityGrid::scatter(const GridCoord& c, double g, std::span<double> grad) const {
  const auto [sx, sy, sz] = strides();
  double* out = grad.data() + c.base;
  const double gx1 = g * c.fx, gx0 = g - gx1;
  const double g01 = gx0 * c.fy, g00 = gx0 - g01;
  const double g11 = gx1 * c.fy, g10 = gx1 - g11;
  out[0] += g00 * (1.0 - c.fz);
  out[sz] += g00 * c.fz;
  out[sy] += g01 * (1.0 - c.fz);
  out[sy + sz] += g01 * c.fz;
  out[sx] += g10 * (1.0 - c.fz);
  out[sx + sz] += g10 * c.fz;
  out[sx + sy] += g11 * (1.0 - c.fz);
  out[sx + sy + sz] += g11 * c.fz;
}

void SamplingConfig::validate() const {
  if (coarse < 2) throw std::invalid_argument("coarse sample count must be >= 2");
  if (fine < 0 || secondary_fine < 0) throw std::invalid_argument("fine sample count must be >= 0");
  if (!(near >= 0.0 && near < far)) throw std::invalid_argument("need 0 <= near < far");
  if (secondary_coarse < 2) throw std::invalid_argument("secondary sample count must be >= 2");
  if (!(standoff >= 0.0)) throw std::invalid_argument("standoff must be >= 0");
}

void composite(RaySamples& rs) {
  const std::size_t n = rs.samples.size();
  rs.alpha.resize(n);
  rs.transmittance.resize(n);
  rs.weight.resize(n);
  double optical = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double tau = rs.samples[i].sigma * rs.samples[i].delta;
    rs.transmittance[i] = std::exp(-optical);
    rs.alpha[i] = -std::expm1(-tau);
    rs.weight[i] = rs.transmittance[i] * rs.alpha[i];
    optical += tau;
  }
}

std::vector<double> coarse_distances(int count, double near, double far, bool stratified,
                                     std::uint64_t key) {
  std::vector<double> out(count);
  const double step = (far - near) / count;
  StreamRng rng(hash_counters({key, 0xc0a45eULL}));
  for (int i = 0; i < count; ++i) {
    const double xi = stratified ? rng.uniform() : 0.5;
    out[i] = near + (i + xi) * step;
  }
  return out;
}

std::vector<double> importance_distances(std::span<const double> weights, double near, double far,
                                         int count, bool stratified, std::uint64_t key) {
  const std::size_t n = weights.size();
  std::vector<double> edges(n + 1);
  for (std::size_t i = 0; i <= n; ++i) edges[i] = near + (far - near) * i / n;
  return invert_cdf(edges, weights, count, stratified, key);
}

DepthRender render_depth_at(const DensityGrid& grid, const Ray& ray, std::span<const double> distances,
                            double near) {
  DepthRender r;
  r.near = near;
  r.far = distances.empty() ? near : distances.back();
  auto& s = r.cache.samples;
  s.resize(distances.size());
  double prev = near;
  for (std::size_t i = 0; i < distances.size(); ++i) {
    s[i].lambda = distances[i];
    s[i].delta = distances[i] - prev;
    prev = distances[i];
    evaluate(grid, ray.at(distances[i]), s[i]);
  }
  composite(r.cache);
  for (std::size_t i = 0; i < s.size(); ++i) {
    r.depth += r.cache.weight[i] * s[i].lambda;
    r.weight_sum += r.cache.weight[i];
  }
  return r;
}

std::vector<double> sample_primary(const DensityGrid* grid, const Ray& ray, const SamplingConfig& cfg,
                                   std::uint64_t key) {
  double near = cfg.near, far = cfg.far;
  if (grid) {
    double t0, t1;
    if (!ray_box_interval(ray, grid->bounds(), t0, t1)) return {};
    near = std::max(near, t0);
    far = std::min(far, t1);
    if (!(near < far)) return {};
  }
  std::vector<double> coarse = coarse_distances(cfg.coarse, near, far, cfg.stratified, key);
  if (!grid || cfg.fine == 0) return coarse;
  const DepthRender pass = render_depth_at(*grid, ray, coarse, near);
  const auto fine =
      importance_distances(pass.cache.weight, near, far, cfg.fine, cfg.stratified, key);
  return merge_strict(std::move(coarse), fine);
}

DepthRender render_depth(const DensityGrid& grid, const Ray& ray, const SamplingConfig& cfg,
                         std::uint64_t key) {
  double t0, t1;
  const double near = ray_box_interval(ray, grid.bounds(), t0, t1) ? std::max(cfg.near, t0) : cfg.near;
  const auto distances = sample_primary(&grid, ray, cfg, key);
  DepthRender r = render_depth_at(grid, ray, distances, near);
  if (distances.empty()) r.far = r.near;
  return r;
}

SegmentSamples secondary_fractions(int count, double standoff) {
  SegmentSamples out;
  const double lo = standoff / count;
  const double hi = 1.0 - lo;
  for (int i = 0; i < count; ++i) {
    const double f = (i + 0.5) / count;
    if (f >= lo && f <= hi) out.fractions.push_back(f);
  }
  out.widths = voronoi_widths(out.fractions, lo, hi);
  return out;
}

SegmentSamples refine_fractions(const SegmentSamples& coarse, std::span<const double> weights,
                                int count, double lo, double hi, bool stratified, std::uint64_t key) {
  if (coarse.fractions.empty() || count == 0) return coarse;
  const auto& f = coarse.fractions;
  std::vector<double> edges(f.size() + 1);
  edges.front() = lo;
  edges.back() = hi;
  for (std::size_t i = 1; i < f.size(); ++i) edges[i] = 0.5 * (f[i - 1] + f[i]);
  const auto extra = invert_cdf(edges, weights, count, stratified, key);
  SegmentSamples out;
  out.fractions = merge_strict(coarse.fractions, extra);
  out.widths = voronoi_widths(out.fractions, lo, hi);
  return out;
}

TransmittanceRender render_transmittance_at(const DensityGrid& grid, const Vec3& from, const Vec3& to,
                                            const SegmentSamples& segment) {
  TransmittanceRender r;
  r.from = from;
  r.to = to;
  r.length = distance(from, to);
  r.segment = segment;
  const Vec3 d = to - from;
  auto& s = r.cache.samples;
  s.resize(segment.fractions.size());
  double optical = 0.0;
  for (std::size_t j = 0; j < s.size(); ++j) {
    s[j].lambda = segment.fractions[j];
    s[j].delta = segment.widths[j] * r.length;
    evaluate(grid, from + d * segment.fractions[j], s[j]);
    optical += s[j].sigma * s[j].delta;
  }
  composite(r.cache);
  r.transmittance = std::exp(-optical);
  return r;
}

TransmittanceRender render_transmittance(const DensityGrid& grid, const Vec3& from, const Vec3& to,
                                         const SamplingConfig& cfg, std::uint64_t key) {
  if (distance(from, to) <= 1e-6)
    throw std::invalid_argument("secondary ray segment is degenerate");
  const SegmentSamples coarse = secondary_fractions(cfg.secondary_coarse, cfg.standoff);
  TransmittanceRender r = render_transmittance_at(grid, from, to, coarse);
  if (cfg.secondary_fine == 0 || coarse.fractions.empty()) return r;
  const double lo = cfg.standoff / cfg.secondary_coarse;
  const SegmentSamples fine = refine_fractions(coarse, r.cache.weight, cfg.secondary_fine, lo,
                                               1.0 - lo, cfg.stratified, key);
  return render_transmittance_at(grid, from, to, fine);
}

void backward_depth(const DepthRender& r, double upstream, std::vector<GradEntry>& out) {
  if (upstream == 0.0) return;
  const auto& s = r.cache.samples;
  const auto& T = r.cache.transmittance;
  const auto& w = r.cache.weight;
  const auto& alpha = r.cache.alpha;
  double suffix = 0.0;  // sum_{i>k} w_i lambda_i
  const std::size_t start = out.size();
  out.resize(start + s.size());
  std::size_t used = start;
  for (std::size_t k = s.size(); k-- > 0;) {
    if (s[k].coord.inside) {
      const double t_next = T[k] * (1.0 - alpha[k]);
      const double dd_dsigma = s[k].delta * (s[k].lambda * t_next - suffix);
      const double g = upstream * dd_dsigma * s[k].dsigma_draw;
      if (g != 0.0) out[used++] = {s[k].coord, g};
    }
    suffix += w[k] * s[k].lambda;
  }
  out.resize(used);
}

void backward_transmittance(const TransmittanceRender& r, double upstream, std::vector<GradEntry>& out) {
  if (upstream == 0.0) return;
  for (const auto& s : r.cache.samples) {
    if (!s.coord.inside) continue;
    const double g = upstream * (-s.delta * r.transmittance) * s.dsigma_draw;
    if (g != 0.0) out.push_back({s.coord, g});
  }
}

Vec3 transmittance_position_gradient(const DensityGrid& grid, const TransmittanceRender& r) {
  if (r.length <= 0.0) return {};
  const Vec3 dir = (r.to - r.from) / r.length;
  double sigma_width = 0.0;
  Vec3 spatial;
  const auto& s = r.cache.samples;
  for (std::size_t j = 0; j < s.size(); ++j) {
    if (!s[j].coord.inside) continue;
    const double width = r.segment.widths[j];
    sigma_width += s[j].sigma * width;
    spatial += grid.interpolate_gradient(s[j].coord) *
               (width * (1.0 - r.segment.fractions[j]) * s[j].dsigma_draw);
  }
  // log p = -L * sum(sigma_j w_j);  dL/dfrom = -dir.
  return (dir * sigma_width - spatial * r.length) * r.transmittance;
}

void accumulate(const DensityGrid& grid, std::span<const GradEntry> entries, std::span<double> grad) {
  for (const auto& e : entries) grid.scatter(e.coord, e.g, grad);
}

OccupancyGrid extract_occupancy(const DensityGrid& grid, double sigma_threshold) {
  if (!(sigma_threshold > 0.0)) throw std::invalid_argument("occupancy threshold must be > 0");
  OccupancyGrid occ;
  occ.resolution = grid.resolution();
  occ.bounds = grid.bounds();
  occ.cells.resize(grid.size());
  // softplus is monotone, so compare in parameter space.
  const double raw_threshold = softplus_inverse(sigma_threshold);
  const auto theta = grid.theta();
  for (std::size_t i = 0; i < theta.size(); ++i) occ.cells[i] = theta[i] >= raw_threshold;
  return occ;
}

void write_checkpoint(const DensityGrid& grid, const std::filesystem::path& path) {
  const auto& r = grid.resolution();
  const nlohmann::json header = {{"format", "TBL_GR01"},
                                 {"resolution", {r[0], r[1], r[2]}},
                                 {"bounds",
                                  {{"min", vec_to_json(grid.bounds().min)},
                                   {"max", vec_to_json(grid.bounds().max)}}},
                                 {"activation", "softplus"},
                                 {"layout", "x-major float32le"}};
  BinaryWriter w(path, kGridMagic, header);
  const auto theta = grid.theta();
  std::vector<float> buf(theta.begin(), theta.end());
  w.write_floats(buf);
  w.close();
}

DensityGrid read_checkpoint(const std::filesystem::path& path) {
  BinaryReader r(path, kGridMagic);
  const auto& h = r.header();
  std::array<int, 3> res{};
  Aabb bounds;
  try {
    res = h.at("resolution").get<std::array<int, 3>>();
    bounds = {vec_from_json(h.at("bounds").at("min")), vec_from_json(h.at("bounds").at("max"))};
  } catch (const std::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  DensityGrid grid(res, bounds);
  const auto values = r.read_floats(grid.size());
  r.expect_end();
  std::copy(values.begin(), values.end(), grid.theta().begin());
  return grid;
}

}  // namespace tbl
