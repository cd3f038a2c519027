#include "tbl/transient.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "tbl/binary_io.hpp"
#include "tbl/errors.hpp"
#include "tbl/parallel.hpp"
#include "tbl/rng.hpp"

namespace tbl {

namespace {

constexpr char kTransientMagic[] = "TBL_TR01";
// Cosines at or below this count as grazing and carry no light.
constexpr double kGrazingCos = 1e-9;
// Pulse deposition window in standard deviations.
constexpr double kPulseSupport = 8.0;

void deposit_pulse(std::span<float> hist, const PulseModel& pulse, double amplitude, double center,
                   double t_start, double t_res) {
  const double sigma = pulse.sigma();
  const double rel = (center - t_start) / t_res;
  const int lo = std::max(0, static_cast<int>(std::floor(rel - kPulseSupport * sigma / t_res)));
  const int hi = std::min(static_cast<int>(hist.size()) - 1,
                          static_cast<int>(std::ceil(rel + kPulseSupport * sigma / t_res)));
  const PulseModel scaled{pulse.fwhm, amplitude};
  for (int b = lo; b <= hi; ++b) {
    const double t0 = t_start + b * t_res;
    hist[b] += static_cast<float>(scaled.mass(center, t0, t0 + t_res));
  }
}

}  // namespace

TransientImage::TransientImage(const CameraModel& cam, int nt, double t_res_, double t_start_)
    : camera(cam), num_bins(nt), t_res(t_res_), t_start(t_start_) {
  if (nt < 1) throw std::invalid_argument("N_t must be >= 1");
  if (!(t_res_ > 0.0)) throw std::invalid_argument("t_res must be > 0");
  data.assign(static_cast<std::size_t>(cam.pixel_count()) * nt, 0.0f);
}

double TransientImage::total() const {
  double s = 0.0;
  for (float v : data) s += v;
  return s;
}

void TransientImage::validate() const {
  if (num_bins < 1 || !(t_res > 0.0)) throw DataError("transient: invalid timing metadata");
  if (data.size() != static_cast<std::size_t>(camera.pixel_count()) * num_bins)
    throw DataError("transient: payload size does not match N_u*N_v*N_t");
  for (float v : data)
    if (!(v >= 0.0f) || !std::isfinite(v)) throw DataError("transient: negative or non-finite bin");
}

double PulseModel::sigma() const { return fwhm / (2.0 * std::sqrt(2.0 * std::log(2.0))); }

double PulseModel::mass(double center, double lo, double hi) const {
  const double s = sigma() * std::sqrt(2.0);
  return 0.5 * amplitude * (std::erf((hi - center) / s) - std::erf((lo - center) / s));
}

std::vector<double> PulseModel::template_samples(double t_res) const {
  const int half = std::max(1, static_cast<int>(std::ceil(4.0 * sigma() / t_res)));
  std::vector<double> out(2 * half + 1);
  const PulseModel unit{fwhm, 1.0};
  const double center = (half + 0.5) * t_res;
  for (int i = 0; i < static_cast<int>(out.size()); ++i)
    out[i] = unit.mass(center, i * t_res, (i + 1) * t_res);
  const double energy = std::sqrt(std::inner_product(out.begin(), out.end(), out.begin(), 0.0));
  for (double& v : out) v /= energy;
  return out;
}

TwoBouncePath compute_path(const LidarRig& rig, const Scene& scene, const Vec3& l, const Vec3& x_p) {
  TwoBouncePath p;
  p.d1 = distance(rig.laser, l);
  p.d2 = distance(l, x_p);
  p.d3 = distance(x_p, rig.camera.position);
  if (p.d2 < 1e-6) {
    p.direct = true;
    return p;
  }
  p.lit = scene.segment_visible(l, x_p);
  if (p.lit) p.t_peak = (p.d1 + p.d2 + p.d3) / kSpeedOfLight;
  return p;
}

double two_bounce_weight(double albedo_l, const Vec3& n_l, const Vec3& l, double albedo_p,
                         const Vec3& n_p, const Vec3& x_p, const Vec3& sensor) {
  const Vec3 lp = x_p - l;
  const double d2 = norm(lp);
  if (d2 <= 0.0) return 0.0;
  const Vec3 w_lp = lp / d2;
  const Vec3 w_ps = normalize(sensor - x_p);
  const double c1 = dot(n_l, w_lp);
  const double c2 = -dot(n_p, w_lp);
  const double c3 = dot(n_p, w_ps);
  if (c1 <= kGrazingCos || c2 <= kGrazingCos || c3 <= kGrazingCos) return 0.0;
  return albedo_l * albedo_p * c1 * c2 * c3 / (d2 * d2);
}

std::vector<double> ground_truth_depth(const Scene& scene, const CameraModel& camera) {
  std::vector<double> depth(camera.pixel_count(), std::numeric_limits<double>::quiet_NaN());
  parallel_for(depth.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const int u = static_cast<int>(i) / camera.height;
      const int v = static_cast<int>(i) % camera.height;
      if (const auto hit = scene.intersect(pixel_ray(camera, u, v))) depth[i] = hit->t;
    }
  });
  return depth;
}

SimulatedView simulate_view(const Scene& scene, const LidarRig& rig, int k,
                            const SimulationParams& params) {
  if (k < 0 || k >= static_cast<int>(rig.targets.size()))
    throw std::out_of_range("illumination index out of range");
  const CameraModel& cam = rig.camera;
  const Vec3 l = rig.targets[k];
  const Vec3 to_l = l - rig.laser;
  const auto laser_hit = scene.intersect({rig.laser, normalize(to_l)});
  if (!laser_hit || distance(laser_hit->point, l) > 1e-4)
    throw DataError("illumination target does not resolve to a surface point");
  const Vec3 n_l = laser_hit->normal;
  const double albedo_l = laser_hit->albedo;

  SimulatedView out;
  out.image = TransientImage(cam, params.num_bins, params.t_res, params.t_start);
  out.image.laser = rig.laser;
  out.image.target = l;
  out.image.k = k;
  out.image.poisson = params.noise.poisson_sampling;
  ViewTruth& truth = out.truth;
  truth.target = l;
  truth.d1 = distance(rig.laser, l);
  const int n = cam.pixel_count();
  truth.status.assign(n, PixelStatus::Empty);
  truth.path_length.assign(n, std::numeric_limits<double>::quiet_NaN());

  // The pixel whose footprint contains the direction of l receives the one-bounce return.
  const Vec3 sensor_to_l = l - cam.position;
  if (scene.segment_visible(cam.position, l))
    if (const auto px = cam.project_direction(normalize(sensor_to_l)))
      truth.direct_pixel = cam.pixel_index(px->first, px->second);
  truth.one_bounce_time = (truth.d1 + norm(sensor_to_l)) / kSpeedOfLight;

  std::vector<double> weight(n, 0.0);
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const int u = static_cast<int>(i) / cam.height;
      const int v = static_cast<int>(i) % cam.height;
      const Ray ray = pixel_ray(cam, u, v);
      const auto hit = scene.intersect(ray);
      if (!hit) continue;
      if (static_cast<int>(i) == truth.direct_pixel || distance(hit->point, l) < 1e-3) {
        truth.status[i] = PixelStatus::Direct;
        continue;
      }
      const TwoBouncePath path = compute_path(rig, scene, l, hit->point);
      const double w = path.lit ? two_bounce_weight(albedo_l, n_l, l, hit->albedo, hit->normal,
                                                    hit->point, cam.position)
                                : 0.0;
      if (w > 0.0) {
        truth.status[i] = PixelStatus::Lit;
        truth.path_length[i] = path.d1 + path.d2 + path.d3;
        weight[i] = w;
      } else {
        truth.status[i] = PixelStatus::Shadow;
      }
    }
  });

  const double max_weight = *std::max_element(weight.begin(), weight.end());
  const double t_end = params.t_start + params.num_bins * params.t_res;
  int clipped = 0;
  for (int i = 0; i < n; ++i) {
    const int u = i / cam.height;
    const int v = i % cam.height;
    auto hist = out.image.histogram(u, v);
    double center = 0.0, amplitude = 0.0;
    if (truth.status[i] == PixelStatus::Lit) {
      center = truth.path_length[i] / kSpeedOfLight;
      amplitude = params.pulse.amplitude * weight[i];
    } else if (i == truth.direct_pixel) {
      center = truth.one_bounce_time;
      amplitude = params.pulse.amplitude * params.one_bounce_gain *
                  (max_weight > 0.0 ? max_weight : albedo_l);
    } else {
      continue;
    }
    if (center < params.t_start || center > t_end) ++clipped;
    deposit_pulse(hist, params.pulse, amplitude, center, params.t_start, params.t_res);
  }
  out.image.clipped_pulses = clipped;

  const NoiseModel& noise = params.noise;
  if (noise.ambient_rate > 0.0 || noise.poisson_sampling) {
    const int nt = params.num_bins;
    parallel_for(n, [&](std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) {
        const int u = static_cast<int>(i) / cam.height;
        const int v = static_cast<int>(i) % cam.height;
        auto hist = out.image.histogram(u, v);
        for (int b = 0; b < nt; ++b) {
          const double rate = static_cast<double>(hist[b]) + noise.ambient_rate;
          if (!noise.poisson_sampling) {
            hist[b] = static_cast<float>(rate);
          } else if (rate > 0.0) {
            StreamRng rng(hash_counters({noise.seed, static_cast<std::uint64_t>(k),
                                         static_cast<std::uint64_t>(u),
                                         static_cast<std::uint64_t>(v),
                                         static_cast<std::uint64_t>(b)}));
            std::poisson_distribution<long> draw(rate);
            hist[b] = static_cast<float>(draw(rng));
          } else {
            hist[b] = 0.0f;
          }
        }
      }
    });
  }
  return out;
}

TransientImage downsample_temporal(const TransientImage& img, int factor) {
  if (factor <= 0) throw std::invalid_argument("temporal downsampling factor must be >= 1");
  const int nt = img.num_bins / factor;
  if (nt < 1) throw std::invalid_argument("temporal downsampling factor exceeds N_t");
  TransientImage out(img.camera, nt, img.t_res * factor, img.t_start);
  out.laser = img.laser;
  out.target = img.target;
  out.k = img.k;
  out.poisson = img.poisson;
  out.clipped_pulses = img.clipped_pulses;
  out.dropped_bins = img.dropped_bins * factor + (img.num_bins - nt * factor);
  for (int u = 0; u < img.width(); ++u)
    for (int v = 0; v < img.height(); ++v) {
      const auto src = img.histogram(u, v);
      auto dst = out.histogram(u, v);
      for (int b = 0; b < nt; ++b) {
        float s = 0.0f;
        for (int j = 0; j < factor; ++j) s += src[b * factor + j];
        dst[b] = s;
      }
    }
  return out;
}

TransientImage downsample_spatial(const TransientImage& img, int factor) {
  if (factor <= 0) throw std::invalid_argument("spatial downsampling factor must be >= 1");
  if (img.width() % factor != 0 || img.height() % factor != 0)
    throw std::invalid_argument("spatial downsampling factor must divide N_u and N_v");
  CameraModel cam = img.camera;
  cam.width /= factor;
  cam.height /= factor;
  TransientImage out(cam, img.num_bins, img.t_res, img.t_start);
  out.laser = img.laser;
  out.target = img.target;
  out.k = img.k;
  out.poisson = img.poisson;
  out.clipped_pulses = img.clipped_pulses;
  out.dropped_bins = img.dropped_bins;
  for (int U = 0; U < cam.width; ++U)
    for (int V = 0; V < cam.height; ++V) {
      auto dst = out.histogram(U, V);
      for (int du = 0; du < factor; ++du)
        for (int dv = 0; dv < factor; ++dv) {
          const auto src = img.histogram(U * factor + du, V * factor + dv);
          for (int b = 0; b < img.num_bins; ++b) dst[b] += src[b];
        }
    }
  return out;
}

int bins_for_duration(double duration, double t_res) {
  if (!(duration > 0.0) || !(t_res > 0.0)) throw std::invalid_argument("duration and t_res must be > 0");
  // Tolerate representation error before rounding up.
  return static_cast<int>(std::ceil(duration / t_res - 1e-9));
}

nlohmann::json transient_metadata(const TransientImage& img) {
  return {{"format", "TBL_TR01"},
          {"N_u", img.width()},
          {"N_v", img.height()},
          {"N_t", img.num_bins},
          {"t_res", img.t_res},
          {"t_start", img.t_start},
          {"k", img.k},
          {"l", vec_to_json(img.target)},
          {"x_l", vec_to_json(img.laser)},
          {"camera", camera_to_json(img.camera)},
          {"layout", "u-major,v,t float32le"},
          {"flags",
           {{"poisson", img.poisson},
            {"dropped_bins", img.dropped_bins},
            {"clipped_pulses", img.clipped_pulses}}}};
}

void write_transient(const TransientImage& img, const std::filesystem::path& path) {
  BinaryWriter w(path, kTransientMagic, transient_metadata(img));
  w.write_floats(img.data);
  w.close();
}

TransientImage read_transient(const std::filesystem::path& path) {
  BinaryReader r(path, kTransientMagic);
  const auto& h = r.header();
  TransientImage img;
  try {
    img.camera = camera_from_json(h.at("camera"));
    if (h.at("N_u").get<int>() != img.camera.width || h.at("N_v").get<int>() != img.camera.height)
      throw DataError(path.string() + ": resolution disagrees with camera metadata");
    img.num_bins = h.at("N_t").get<int>();
    img.t_res = h.at("t_res").get<double>();
    img.t_start = h.at("t_start").get<double>();
    img.k = h.at("k").get<int>();
    img.target = vec_from_json(h.at("l"));
    img.laser = vec_from_json(h.at("x_l"));
    const auto& flags = h.at("flags");
    img.poisson = flags.value("poisson", false);
    img.dropped_bins = flags.value("dropped_bins", 0);
    img.clipped_pulses = flags.value("clipped_pulses", 0);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (img.num_bins < 1 || !(img.t_res > 0.0)) throw DataError(path.string() + ": bad timing");
  img.data = r.read_floats(static_cast<std::size_t>(img.camera.pixel_count()) * img.num_bins);
  r.expect_end();
  return img;
}

}  // namespace tbl
