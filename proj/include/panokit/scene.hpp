#pragma once

// Synthetic 360-degree video: a textured sphere rendered to ERP with a target
// spherical cap moving on a great circle, optional distractor caps, and an
// optional occluder that hides the target for a window of frames. Ground
// truth is analytic (angular distance to the cap center).

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "panokit/geometry.hpp"
#include "panokit/nn.hpp"

namespace panokit {

using Color = std::array<double, 3>;

/// A cap of angular `radius` whose center starts at `start` and travels a
/// great circle with initial `heading` (0 = east, pi/2 = north) at `speed` rad/frame.
struct CapTrack {
  SphericalCoord start;
  double heading = 0.0;
  double speed = deg2rad(3.0);
  double radius = deg2rad(15.0);
  Color color{0.9, 0.2, 0.2};
  std::optional<Color> end_color;  ///< appearance drifts linearly to this by the last frame

  Color color_at(double t, std::size_t n_frames) const {
    if (!end_color || n_frames < 2) return color;
    const double a = t / static_cast<double>(n_frames - 1);
    return {color[0] + a * ((*end_color)[0] - color[0]), color[1] + a * ((*end_color)[1] - color[1]),
            color[2] + a * ((*end_color)[2] - color[2])};
  }

  Vec3 center_at(double t) const {
    const TangentFrame f(start);
    const double ch = std::cos(heading), sh = std::sin(heading);
    const Vec3 dir{ch * f.east[0] + sh * f.north[0], ch * f.east[1] + sh * f.north[1], ch * f.east[2] + sh * f.north[2]};
    const double a = speed * t, ca = std::cos(a), sa = std::sin(a);
    return {f.center[0] * ca + dir[0] * sa, f.center[1] * ca + dir[1] * sa, f.center[2] * ca + dir[2] * sa};
  }
};

struct OcclusionWindow {
  std::size_t start = 0;
  std::size_t length = 0;  ///< 0 disables the occluder
  Color color{0.25, 0.75, 0.3};
  double margin = deg2rad(2.0);
};

struct SceneConfig {
  ErpGrid grid{128, 256};
  std::size_t n_frames = 24;
  CapTrack target;
  std::vector<CapTrack> distractors;
  OcclusionWindow occlusion;
  std::uint64_t texture_seed = 7;
  double noise = 0.02;  ///< per-pixel uniform noise amplitude

  void validate() const {
    grid.validate();
    if (n_frames < 2) throw ConfigError("scene needs at least 2 frames");
    auto check = [](const CapTrack& c, const char* what) {
      if (!(c.radius > 0.0 && c.radius < kPi / 4.0))
        throw ConfigError(std::string(what) + ": angular radius must be in (0, pi/4)");
      if (!std::isfinite(c.speed) || !std::isfinite(c.heading) || !std::isfinite(c.start.lon) ||
          !std::isfinite(c.start.lat) || std::abs(c.start.lat) > kPi / 2.0)
        throw ConfigError(std::string(what) + ": invalid trajectory");
    };
    check(target, "target");
    for (const auto& d : distractors) check(d, "distractor");
    if (occlusion.length > 0 && (occlusion.start == 0 || occlusion.start + occlusion.length > n_frames))
      throw ConfigError("invalid trajectory: occlusion window must lie within frames 1..n_frames-1");
  }

  /// Occluder cap: centered on the target's mid-window position, large enough
  /// to cover the target for every frame in the window.
  std::pair<Vec3, double> occluder() const {
    const double mid = static_cast<double>(occlusion.start) + (static_cast<double>(occlusion.length) - 1.0) / 2.0;
    const double r = target.radius + std::abs(target.speed) * (static_cast<double>(occlusion.length) - 1.0) / 2.0 + occlusion.margin;
    return {target.center_at(mid), r};
  }
};

template <class T = double>
struct VideoSequence {
  std::vector<Tensor<T>> frames;  ///< [3,H,W] in [0,1]
  std::vector<BinaryMask> gt;
  std::vector<int> occlusion_gt;  ///< 1 when the target is visible
  std::size_t size() const { return frames.size(); }
};

namespace detail {

struct Wave {
  Vec3 k;
  double phase, amp;
};

inline std::vector<std::array<Wave, 4>> background_waves(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::array<Wave, 4>> out(3);
  for (auto& ch : out)
    for (auto& w : ch) {
      const double f = rng.uniform(1.0, 4.0);
      const Vec3 dir = normalized({rng.normal(), rng.normal(), rng.normal()});
      w = {{dir[0] * f, dir[1] * f, dir[2] * f}, rng.uniform(0.0, 2.0 * kPi), rng.uniform(0.04, 0.1)};
    }
  return out;
}

inline double shade(const Vec3& d, const Vec3& center, double base) {
  const double t = std::acos(std::clamp(dot(d, center), -1.0, 1.0));
  return std::clamp(base * (0.85 + 0.15 * std::cos(14.0 * t)), 0.0, 1.0);
}

}  // namespace detail

inline VideoSequence<double> synth_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto waves = detail::background_waves(cfg.texture_seed);
  Rng noise(seed);
  const ErpGrid g = cfg.grid;
  std::vector<Vec3> dirs(g.pixels());
  for (std::size_t i = 0; i < g.height; ++i)
    for (std::size_t j = 0; j < g.width; ++j) dirs[i * g.width + j] = to_unit_vector(erp_to_sphere(i, j, g));

  const bool occl = cfg.occlusion.length > 0;
  const auto [occ_c, occ_r] = occl ? cfg.occluder() : std::pair<Vec3, double>{Vec3{0, 0, 1}, 0.0};
  const double occ_cos = std::cos(occ_r);

  VideoSequence<double> seq;
  for (std::size_t t = 0; t < cfg.n_frames; ++t) {
    const double tf = static_cast<double>(t);
    const Vec3 tc = cfg.target.center_at(tf);
    const double t_cos = std::cos(cfg.target.radius);
    const Color t_color = cfg.target.color_at(tf, cfg.n_frames);
    std::vector<std::pair<Vec3, double>> dc;
    for (const auto& d : cfg.distractors) dc.push_back({d.center_at(tf), std::cos(d.radius)});

    Tensor<double> img({3, g.height, g.width});
    BinaryMask gt(g.height, g.width);
    for (std::size_t p = 0; p < g.pixels(); ++p) {
      const Vec3& d = dirs[p];
      Color c;
      for (int ch = 0; ch < 3; ++ch) {
        double v = 0.45;
        for (const auto& w : waves[ch]) v += w.amp * std::cos(dot(w.k, d) + w.phase);
        c[ch] = v;
      }
      for (std::size_t k = 0; k < dc.size(); ++k)
        if (dot(d, dc[k].first) >= dc[k].second)
          for (int ch = 0; ch < 3; ++ch) c[ch] = detail::shade(d, dc[k].first, cfg.distractors[k].color[ch]);
      const bool in_target = dot(d, tc) >= t_cos;
      const bool hidden = occl && dot(d, occ_c) >= occ_cos;
      if (in_target && !hidden) {
        for (int ch = 0; ch < 3; ++ch) c[ch] = detail::shade(d, tc, t_color[ch]);
        gt.set(p / g.width, p % g.width, true);
      }
      if (hidden)
        for (int ch = 0; ch < 3; ++ch) c[ch] = detail::shade(d, occ_c, cfg.occlusion.color[ch]);
      for (int ch = 0; ch < 3; ++ch)
        img[ch * g.pixels() + p] = std::clamp(c[ch] + cfg.noise * (noise.uniform() * 2.0 - 1.0), 0.0, 1.0);
    }
    seq.occlusion_gt.push_back(gt.any() ? 1 : 0);
    seq.frames.push_back(std::move(img));
    seq.gt.push_back(std::move(gt));
  }
  return seq;
}

/// Solid-angle-weighted pixel count: each pixel counts as its share of H*W/(4*pi)
/// steradians, so a cap of angular radius r scores 2*pi*(1-cos r)*H*W/(4*pi).
inline double spherical_pixel_area(const BinaryMask& m) {
  double a = 0.0;
  const ErpGrid g = m.grid();
  for (std::size_t i = 0; i < g.height; ++i) {
    const double w = kPi / 2.0 * std::cos(erp_to_sphere(i, 0, g).lat);
    for (std::size_t j = 0; j < g.width; ++j)
      if (m(i, j)) a += w;
  }
  return a;
}

// ---------------------------------------------------------------------------
// Random scene families

enum class SceneKind {
  Mixed,          ///< random trajectories, some crossing the seam, some occluded
  SeamCrossing,   ///< the target crosses the 0/360 seam mid-sequence
  Occlusion,      ///< the target disappears behind an occluder and re-enters
};

inline Color hue_color(double hue, double sat = 0.85, double val = 0.95) {
  const double h = std::fmod(hue, 1.0) * 6.0;
  const double c = val * sat, x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0)), m = val - c;
  Color rgb;
  if (h < 1) rgb = {c, x, 0};
  else if (h < 2) rgb = {x, c, 0};
  else if (h < 3) rgb = {0, c, x};
  else if (h < 4) rgb = {0, x, c};
  else if (h < 5) rgb = {x, 0, c};
  else rgb = {c, 0, x};
  return {rgb[0] + m, rgb[1] + m, rgb[2] + m};
}

struct SceneSampling {
  ErpGrid grid{64, 128};
  std::size_t n_frames = 16;
  double radius_min = deg2rad(14.0), radius_max = deg2rad(22.0);
  double speed_min = deg2rad(3.0), speed_max = deg2rad(6.0);
  double max_start_lat = deg2rad(55.0);
  std::size_t distractors = 1;
  double occlusion_prob = 0.3;  ///< for SceneKind::Mixed
  std::size_t occlusion_min = 3, occlusion_max = 6;
  std::size_t occlusion_start_min = 2;
  std::size_t recovery_frames = 3;  ///< visible frames kept after the window
  double hue_drift = 0.0;  ///< max target hue change over a sequence
};

inline SceneConfig sample_scene_config(SceneKind kind, const SceneSampling& s, Rng& rng) {
  SceneConfig c;
  c.grid = s.grid;
  c.n_frames = s.n_frames;
  c.texture_seed = rng.fork_seed();
  const double target_hue = rng.uniform();
  c.target.radius = rng.uniform(s.radius_min, s.radius_max);
  c.target.speed = rng.uniform(s.speed_min, s.speed_max);
  c.target.color = hue_color(target_hue);
  if (s.hue_drift > 0.0) c.target.end_color = hue_color(target_hue + rng.uniform(-s.hue_drift, s.hue_drift) + 1.0);
  c.target.start = {rng.uniform(-kPi, kPi), rng.uniform(-s.max_start_lat, s.max_start_lat)};
  c.target.heading = rng.uniform(0.0, 2.0 * kPi);
  if (kind == SceneKind::SeamCrossing || (kind == SceneKind::Mixed && rng.uniform() < 0.35)) {
    // Reach the seam around a third of the way through, heading roughly east.
    const double frames_to_seam = rng.uniform(0.2, 0.5) * static_cast<double>(s.n_frames);
    c.target.heading = rng.uniform(-0.4, 0.4);
    c.target.start.lat = rng.uniform(-deg2rad(35.0), deg2rad(35.0));
    c.target.start.lon = kPi - c.target.speed * frames_to_seam / std::max(0.3, std::cos(c.target.start.lat));
  }
  for (std::size_t k = 0; k < s.distractors; ++k) {
    CapTrack d;
    d.radius = rng.uniform(s.radius_min, s.radius_max);
    d.speed = rng.uniform(s.speed_min, s.speed_max);
    d.color = hue_color(target_hue + rng.uniform(0.25, 0.75));
    d.start = {rng.uniform(-kPi, kPi), rng.uniform(-s.max_start_lat, s.max_start_lat)};
    d.heading = rng.uniform(0.0, 2.0 * kPi);
    c.distractors.push_back(d);
  }
  const bool occluded = kind == SceneKind::Occlusion || (kind == SceneKind::Mixed && rng.uniform() < s.occlusion_prob);
  if (occluded) {
    const std::size_t len = s.occlusion_min + rng.index(s.occlusion_max - s.occlusion_min + 1);
    const std::size_t first = std::max<std::size_t>(1, s.occlusion_start_min);
    const std::size_t latest = s.n_frames > len + s.recovery_frames ? s.n_frames - len - s.recovery_frames : first;
    c.occlusion.length = len;
    c.occlusion.start = latest > first ? first + rng.index(latest - first + 1) : first;
    c.occlusion.color = hue_color(target_hue + rng.uniform(0.3, 0.7), 0.5, 0.8);
    if (c.occlusion.start + c.occlusion.length > c.n_frames) c.occlusion.length = 0;
  }
  return c;
}

}  // namespace panokit
