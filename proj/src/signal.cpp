#include "tbl/signal.hpp"

#include <algorithm>
#include <cmath>

#include "tbl/binary_io.hpp"
#include "tbl/errors.hpp"
#include "tbl/parallel.hpp"

namespace tbl {

namespace {
constexpr char kViewMagic[] = "TBL_PV01";
}

PeakEstimate cross_correlate(std::span<const float> histogram, std::span<const double> pulse_template,
                             double t_res, double t_start) {
  PeakEstimate out;
  const int n = static_cast<int>(histogram.size());
  const int m = static_cast<int>(pulse_template.size());
  const int half = m / 2;
  double energy = 0.0;
  for (float v : histogram) energy += static_cast<double>(v) * v;
  if (n == 0 || !(energy > 0.0)) return out;

  auto corr = [&](int k) {
    double s = 0.0;
    const int j0 = std::max(0, half - k);
    const int j1 = std::min(m, n - k + half);
    for (int j = j0; j < j1; ++j) s += histogram[k - half + j] * pulse_template[j];
    return s;
  };
  int best = 0;
  double best_val = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < n; ++k) {
    // Only bins near nonzero data can win; skip empty stretches cheaply.
    if (histogram[k] == 0.0f) {
      bool any = false;
      for (int j = std::max(0, k - half); j <= std::min(n - 1, k + half) && !any; ++j)
        any = histogram[j] != 0.0f;
      if (!any) continue;
    }
    const double c = corr(k);
    if (c > best_val) {
      best_val = c;
      best = k;
    }
  }
  double offset = 0.0;
  if (best > 0 && best < n - 1) {
    const double a = corr(best - 1);
    const double c = corr(best + 1);
    const double denom = a - 2.0 * best_val + c;
    if (denom < 0.0) offset = std::clamp(0.5 * (a - c) / denom, -0.5, 0.5);
  }
  out.correlation = best_val;
  out.confidence = std::clamp(best_val / std::sqrt(energy), 0.0, 1.0);
  out.t_peak = t_start + (best + 0.5 + offset) * t_res;
  return out;
}

std::vector<bool> one_bounce_pixels(const CameraModel& camera, const Vec3& l, double angle_thresh) {
  std::vector<bool> out(camera.pixel_count(), false);
  const Vec3 dir = normalize(l - camera.position);
  const double cos_thresh = std::cos(angle_thresh);
  for (int u = 0; u < camera.width; ++u)
    for (int v = 0; v < camera.height; ++v)
      if (dot(pixel_ray(camera, u, v).direction, dir) >= cos_thresh)
        out[camera.pixel_index(u, v)] = true;
  if (const auto px = camera.project_direction(dir))
    out[camera.pixel_index(px->first, px->second)] = true;
  return out;
}

TransientImage filter_one_bounce(const TransientImage& img, const Vec3& l, double angle_thresh) {
  TransientImage out = img;
  const auto mask = one_bounce_pixels(img.camera, l, angle_thresh);
  for (int u = 0; u < img.width(); ++u)
    for (int v = 0; v < img.height(); ++v)
      if (mask[img.camera.pixel_index(u, v)]) std::ranges::fill(out.histogram(u, v), 0.0f);
  return out;
}

std::vector<bool> threshold_shadow(std::span<const double> confidence, double tau) {
  std::vector<bool> mask(confidence.size());
  for (std::size_t i = 0; i < confidence.size(); ++i) mask[i] = confidence[i] >= tau;
  return mask;
}

SourceEstimate estimate_d1(const TransientImage& img, const PulseModel& pulse) {
  if (distance(img.laser, img.camera.position) > 0.01)
    throw DataError(
        "laser and sensor are not colocated (> 1 cm); d1 cannot be inferred from the "
        "one-bounce time, use the illumination point from the dataset manifest");
  const auto tmpl = pulse.template_samples(img.t_res);
  SourceEstimate best;
  PeakEstimate best_peak;
  for (int u = 0; u < img.width(); ++u)
    for (int v = 0; v < img.height(); ++v) {
      const PeakEstimate p = cross_correlate(img.histogram(u, v), tmpl, img.t_res, img.t_start);
      if (std::isfinite(p.t_peak) && p.correlation > best_peak.correlation) {
        best_peak = p;
        best.pixel = img.camera.pixel_index(u, v);
      }
    }
  if (best.pixel < 0) throw DataError("no one-bounce pulse found in transient");
  best.d1 = 0.5 * kSpeedOfLight * best_peak.t_peak;
  const int u = best.pixel / img.camera.height;
  const int v = best.pixel % img.camera.height;
  best.l = img.camera.position + pixel_ray(img.camera, u, v).direction * best.d1;
  return best;
}

PreprocessedView preprocess_view(const TransientImage& img, const PulseModel& pulse,
                                 const PreprocessParams& params) {
  PreprocessedView view;
  view.camera = img.camera;
  view.laser = img.laser;
  view.k = img.k;
  view.t_res = img.t_res;
  view.threshold = params.shadow_threshold;
  if (params.estimate_source) {
    const SourceEstimate est = estimate_d1(img, pulse);
    view.l = est.l;
    view.d1 = est.d1;
  } else {
    view.l = img.target;
    view.d1 = distance(img.laser, img.target);
  }
  const auto excluded = one_bounce_pixels(img.camera, view.l, params.one_bounce_angle);
  const int n = img.camera.pixel_count();
  view.tof.assign(n, std::numeric_limits<double>::quiet_NaN());
  view.confidence.assign(n, 0.0);
  view.valid.assign(n, true);
  const auto tmpl = pulse.template_samples(img.t_res);
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      if (excluded[i]) continue;
      const int u = static_cast<int>(i) / img.camera.height;
      const int v = static_cast<int>(i) % img.camera.height;
      const PeakEstimate p = cross_correlate(img.histogram(u, v), tmpl, img.t_res, img.t_start);
      view.tof[i] = p.t_peak;
      view.confidence[i] = p.confidence;
    }
  });
  for (int i = 0; i < n; ++i) view.valid[i] = !excluded[i];
  view.lit = threshold_shadow(view.confidence, params.shadow_threshold);
  for (int i = 0; i < n; ++i)
    if (!view.valid[i]) view.lit[i] = false;
  return view;
}

void write_preprocessed(const PreprocessedView& view, const std::filesystem::path& path) {
  const nlohmann::json header = {{"format", "TBL_PV01"},
                                 {"camera", camera_to_json(view.camera)},
                                 {"x_l", vec_to_json(view.laser)},
                                 {"l", vec_to_json(view.l)},
                                 {"d1", view.d1},
                                 {"k", view.k},
                                 {"t_res", view.t_res},
                                 {"threshold", view.threshold},
                                 {"layout", "tof f32le[N], confidence f32le[N], lit bits, valid bits"}};
  BinaryWriter w(path, kViewMagic, header);
  std::vector<float> buf(view.tof.begin(), view.tof.end());
  w.write_floats(buf);
  buf.assign(view.confidence.begin(), view.confidence.end());
  w.write_floats(buf);
  w.write_bytes(pack_bits(view.lit));
  w.write_bytes(pack_bits(view.valid));
  w.close();
}

PreprocessedView read_preprocessed(const std::filesystem::path& path) {
  BinaryReader r(path, kViewMagic);
  const auto& h = r.header();
  PreprocessedView view;
  try {
    view.camera = camera_from_json(h.at("camera"));
    view.laser = vec_from_json(h.at("x_l"));
    view.l = vec_from_json(h.at("l"));
    view.d1 = h.at("d1").get<double>();
    view.k = h.at("k").get<int>();
    view.t_res = h.at("t_res").get<double>();
    view.threshold = h.at("threshold").get<double>();
  } catch (const std::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  const std::size_t n = view.camera.pixel_count();
  const auto tof = r.read_floats(n);
  const auto conf = r.read_floats(n);
  view.tof.assign(tof.begin(), tof.end());
  view.confidence.assign(conf.begin(), conf.end());
  const std::size_t nbytes = (n + 7) / 8;
  view.lit = unpack_bits(r.read_bytes(nbytes), n);
  view.valid = unpack_bits(r.read_bytes(nbytes), n);
  r.expect_end();
  return view;
}

GatingReport gating_report(std::span<const double> signal, double t_res, double t1, double t2,
                           double noise) {
  const double duration = static_cast<double>(signal.size()) * t_res;
  if (!(t1 >= 0.0 && t1 < t2 && t2 <= duration + 1e-15))
    throw std::invalid_argument("gate must satisfy 0 <= T1 < T2 <= T");
  GatingReport rep;
  rep.duration = duration;
  rep.gate_width = t2 - t1;
  double total = 0.0, gated = 0.0;
  for (std::size_t b = 0; b < signal.size(); ++b) {
    const double e = signal[b] * signal[b] * t_res;
    total += e;
    const double center = (static_cast<double>(b) + 0.5) * t_res;
    if (center >= t1 && center < t2) gated += e;
  }
  if (noise == 0.0) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    rep.sbr_ungated = total > 0.0 ? inf : 0.0;
    rep.sbr_gated = gated > 0.0 ? inf : 0.0;
    rep.improvement = inf;
    return rep;
  }
  rep.sbr_ungated = total / (noise * noise * rep.duration);
  rep.sbr_gated = gated / (noise * noise * rep.gate_width);
  rep.improvement = rep.sbr_ungated > 0.0 ? rep.sbr_gated / rep.sbr_ungated : 0.0;
  return rep;
}

}  // namespace tbl
