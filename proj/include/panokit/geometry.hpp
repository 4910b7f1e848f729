#pragma once

// Equirectangular (ERP) pixel <-> sphere mappings, bounding field-of-view
// estimation, gnomonic projection into a BFoV window and back, and an exact
// Euclidean distance transform.
//
// Pixel convention: pixel (i, j) covers [j, j+1) x [i, i+1) and its center is
// lon = 2*pi*(j+0.5)/W - pi, lat = pi/2 - pi*(i+0.5)/H.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "panokit/errors.hpp"
#include "panokit/tensor.hpp"

namespace panokit {

inline constexpr double kPi = std::numbers::pi;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

/// Wraps a longitude into [-pi, pi).
inline double wrap_lon(double lon) {
  double r = std::fmod(lon + kPi, 2.0 * kPi);
  if (r < 0) r += 2.0 * kPi;
  if (r >= 2.0 * kPi) r -= 2.0 * kPi;
  return r - kPi;
}

struct ErpGrid {
  std::size_t height = 0;
  std::size_t width = 0;

  void validate() const {
    if (height < 2 || width != 2 * height)
      throw DimensionError("ERP grid must satisfy W == 2H and H >= 2, got " + std::to_string(height) + "x" +
                           std::to_string(width));
  }
  std::size_t pixels() const { return height * width; }
  friend bool operator==(const ErpGrid&, const ErpGrid&) = default;
};

struct SphericalCoord {
  double lon = 0.0;
  double lat = 0.0;
};

/// Continuous pixel position; pixel centers sit at (i + 0.5, j + 0.5).
struct PixelPos {
  double row = 0.0;
  double col = 0.0;
};

/// Bounding field-of-view: a spherical window centered at (lon_c, lat_c).
struct BFoV {
  double lon_c = 0.0;
  double lat_c = 0.0;
  double fov_h = deg2rad(60.0);
  double fov_v = deg2rad(60.0);
};

inline constexpr double kMinFov = 2.0 * std::numbers::pi / 180.0;
inline constexpr double kMaxFov = 150.0 * std::numbers::pi / 180.0;

class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : h_(h), w_(w), data_(h * w, 0) {}
  BinaryMask(std::size_t h, std::size_t w, std::vector<std::uint8_t> data) : h_(h), w_(w), data_(std::move(data)) {
    if (data_.size() != h * w) throw DimensionError("BinaryMask: data length does not match " + std::to_string(h) + "x" + std::to_string(w));
    for (auto& v : data_)
      if (v > 1) throw DimensionError("BinaryMask: values must be 0 or 1");
  }

  std::size_t height() const noexcept { return h_; }
  std::size_t width() const noexcept { return w_; }
  std::size_t size() const noexcept { return data_.size(); }
  ErpGrid grid() const { return {h_, w_}; }

  std::uint8_t operator()(std::size_t i, std::size_t j) const { return data_[i * w_ + j]; }
  void set(std::size_t i, std::size_t j, bool v) { data_[i * w_ + j] = v ? 1 : 0; }
  std::uint8_t operator[](std::size_t k) const { return data_[k]; }
  const std::vector<std::uint8_t>& data() const noexcept { return data_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data_) n += v;
    return n;
  }
  bool any() const { return std::any_of(data_.begin(), data_.end(), [](auto v) { return v != 0; }); }

  template <class T = double>
  Tensor<T> to_tensor() const {
    Tensor<T> t({h_, w_});
    for (std::size_t k = 0; k < data_.size(); ++k) t[k] = data_[k] ? T{1} : T{0};
    return t;
  }

  /// Foreground where value > threshold.
  template <class T>
  static BinaryMask threshold(const Tensor<T>& t, T thr = T{0}) {
    require_rank(t, 2, "BinaryMask::threshold");
    BinaryMask m(t.dim(0), t.dim(1));
    for (std::size_t k = 0; k < t.size(); ++k) m.data_[k] = t[k] > thr ? 1 : 0;
    return m;
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  std::size_t h_ = 0, w_ = 0;
  std::vector<std::uint8_t> data_;
};

struct DistanceField {
  std::size_t height = 0, width = 0;
  std::vector<double> data;
  double d_max = 0.0;
  double operator()(std::size_t i, std::size_t j) const { return data[i * width + j]; }
};

// ---------------------------------------------------------------------------
// Vector helpers

using Vec3 = std::array<double, 3>;

inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 normalized(const Vec3& v) {
  const double n = std::sqrt(dot(v, v));
  return {v[0] / n, v[1] / n, v[2] / n};
}

inline Vec3 to_unit_vector(const SphericalCoord& c) {
  const double cl = std::cos(c.lat);
  return {cl * std::cos(c.lon), cl * std::sin(c.lon), std::sin(c.lat)};
}

inline SphericalCoord from_unit_vector(const Vec3& v) {
  const double z = std::clamp(v[2] / std::sqrt(dot(v, v)), -1.0, 1.0);
  return {wrap_lon(std::atan2(v[1], v[0])), std::asin(z)};
}

/// Orthonormal frame at a view center: `east` and `north` span the tangent plane.
struct TangentFrame {
  Vec3 center, east, north;

  explicit TangentFrame(const SphericalCoord& c) {
    const double so = std::sin(c.lon), co = std::cos(c.lon), sa = std::sin(c.lat), ca = std::cos(c.lat);
    center = {ca * co, ca * so, sa};
    east = {-so, co, 0.0};
    north = {-sa * co, -sa * so, ca};
  }
};

// ---------------------------------------------------------------------------
// ERP <-> sphere

inline SphericalCoord erp_to_sphere(std::size_t i, std::size_t j, const ErpGrid& grid) {
  if (i >= grid.height || j >= grid.width)
    throw DimensionError("erp_to_sphere: pixel (" + std::to_string(i) + "," + std::to_string(j) + ") outside grid");
  const double lon = 2.0 * kPi * (static_cast<double>(j) + 0.5) / static_cast<double>(grid.width) - kPi;
  const double lat = kPi / 2.0 - kPi * (static_cast<double>(i) + 0.5) / static_cast<double>(grid.height);
  return {lon, lat};
}

/// Continuous inverse of erp_to_sphere; columns land in [0, W).
inline PixelPos sphere_to_erp(const SphericalCoord& c, const ErpGrid& grid) {
  const double lon = wrap_lon(c.lon);
  double col = (lon + kPi) / (2.0 * kPi) * static_cast<double>(grid.width);
  if (col >= static_cast<double>(grid.width)) col -= static_cast<double>(grid.width);
  const double row = (kPi / 2.0 - c.lat) / kPi * static_cast<double>(grid.height);
  return {row, col};
}

// ---------------------------------------------------------------------------
// BFoV estimation

/// Center = normalized mean of foreground unit vectors; extents =
/// margin * 2 * max angular deviation along the tangent axes, clamped to [2, 150] degrees.
inline BFoV estimate_bfov(const BinaryMask& mask, double margin = 1.2) {
  const ErpGrid grid = mask.grid();
  Vec3 acc{0, 0, 0};
  std::vector<Vec3> dirs;
  for (std::size_t i = 0; i < grid.height; ++i)
    for (std::size_t j = 0; j < grid.width; ++j)
      if (mask(i, j)) {
        const Vec3 v = to_unit_vector(erp_to_sphere(i, j, grid));
        dirs.push_back(v);
        for (int k = 0; k < 3; ++k) acc[k] += v[k];
      }
  if (dirs.empty()) throw EmptyMaskError("estimate_bfov: mask has no foreground pixels");
  const double n = std::sqrt(dot(acc, acc));
  const SphericalCoord center = n > 1e-12 ? from_unit_vector(acc) : from_unit_vector(dirs.front());
  const TangentFrame frame(center);
  double dev_h = 0.0, dev_v = 0.0;
  for (const auto& v : dirs) {
    const double z = dot(v, frame.center);
    dev_h = std::max(dev_h, std::abs(std::atan2(dot(v, frame.east), z)));
    dev_v = std::max(dev_v, std::abs(std::atan2(dot(v, frame.north), z)));
  }
  BFoV b;
  b.lon_c = center.lon;
  b.lat_c = center.lat;
  b.fov_h = std::clamp(margin * 2.0 * dev_h, kMinFov, kMaxFov);
  b.fov_v = std::clamp(margin * 2.0 * dev_v, kMinFov, kMaxFov);
  return b;
}

// ---------------------------------------------------------------------------
// Gnomonic projection into the BFoV window

enum class Interp { Nearest, Bilinear };

namespace detail {

inline void check_bfov(const BFoV& b) {
  if (!(b.fov_h > 0.0) || !(b.fov_v > 0.0)) throw ProjectionError("BFoV extents must be positive");
  if (b.fov_h >= kPi || b.fov_v >= kPi) throw ProjectionError("gnomonic projection needs fov < 180 degrees");
}

inline double sample_nearest(const Tensor<double>& src, const PixelPos& p) {
  const long h = static_cast<long>(src.dim(0)), w = static_cast<long>(src.dim(1));
  const long i = std::clamp(static_cast<long>(std::floor(p.row)), 0L, h - 1);
  long j = static_cast<long>(std::floor(p.col)) % w;
  if (j < 0) j += w;
  return src[static_cast<std::size_t>(i * w + j)];
}

inline double sample_bilinear(const Tensor<double>& src, const PixelPos& p) {
  const long h = static_cast<long>(src.dim(0)), w = static_cast<long>(src.dim(1));
  const double y = p.row - 0.5, x = p.col - 0.5;
  const double fy = std::floor(y), fx = std::floor(x);
  const double ay = y - fy, ax = x - fx;
  const long i0 = std::clamp(static_cast<long>(fy), 0L, h - 1), i1 = std::clamp(static_cast<long>(fy) + 1, 0L, h - 1);
  const long j0 = ((static_cast<long>(fx) % w) + w) % w, j1 = (j0 + 1) % w;
  auto at = [&](long i, long j) { return src[static_cast<std::size_t>(i * w + j)]; };
  return (at(i0, j0) * (1 - ax) + at(i0, j1) * ax) * (1 - ay) + (at(i1, j0) * (1 - ax) + at(i1, j1) * ax) * ay;
}

}  // namespace detail

/// Samples an ERP scalar field [H,W] on the BFoV tangent plane, producing [out_h,out_w].
inline Tensor<double> tau_project(const Tensor<double>& src, const BFoV& bfov, std::size_t out_h, std::size_t out_w,
                                  Interp interp) {
  require_rank(src, 2, "tau_project");
  detail::check_bfov(bfov);
  if (out_h < 2 || out_w < 2) throw DimensionError("tau_project: output must be at least 2x2");
  const ErpGrid grid{src.dim(0), src.dim(1)};
  const TangentFrame f({bfov.lon_c, bfov.lat_c});
  const double th = std::tan(bfov.fov_h / 2.0), tv = std::tan(bfov.fov_v / 2.0);
  Tensor<double> out({out_h, out_w});
  for (std::size_t r = 0; r < out_h; ++r) {
    const double v = (1.0 - 2.0 * (static_cast<double>(r) + 0.5) / static_cast<double>(out_h)) * tv;
    for (std::size_t c = 0; c < out_w; ++c) {
      const double u = (2.0 * (static_cast<double>(c) + 0.5) / static_cast<double>(out_w) - 1.0) * th;
      const Vec3 ray{f.center[0] + u * f.east[0] + v * f.north[0], f.center[1] + u * f.east[1] + v * f.north[1],
                     f.center[2] + u * f.east[2] + v * f.north[2]};
      const PixelPos p = sphere_to_erp(from_unit_vector(ray), grid);
      out.at(r, c) = interp == Interp::Nearest ? detail::sample_nearest(src, p) : detail::sample_bilinear(src, p);
    }
  }
  return out;
}

inline BinaryMask tau_project(const BinaryMask& mask, const BFoV& bfov, std::size_t out_h, std::size_t out_w) {
  return BinaryMask::threshold(tau_project(mask.to_tensor(), bfov, out_h, out_w, Interp::Nearest), 0.5);
}

/// Tangent-plane cell hit by the ray through ERP pixel (i, j), or {-1,-1} outside the frustum.
inline std::array<long, 2> frustum_cell(std::size_t i, std::size_t j, const ErpGrid& grid, const TangentFrame& f,
                                        const BFoV& bfov, std::size_t h, std::size_t w) {
  const Vec3 d = to_unit_vector(erp_to_sphere(i, j, grid));
  const double z = dot(d, f.center);
  if (z <= 0.0) return {-1, -1};
  const double u = dot(d, f.east) / z / std::tan(bfov.fov_h / 2.0);
  const double v = dot(d, f.north) / z / std::tan(bfov.fov_v / 2.0);
  if (std::abs(u) > 1.0 || std::abs(v) > 1.0) return {-1, -1};
  const long c = std::clamp(static_cast<long>(std::floor((u + 1.0) / 2.0 * static_cast<double>(w))), 0L,
                            static_cast<long>(w) - 1);
  const long r = std::clamp(static_cast<long>(std::floor((1.0 - v) / 2.0 * static_cast<double>(h))), 0L,
                            static_cast<long>(h) - 1);
  return {r, c};
}

inline BinaryMask frustum_mask(const BFoV& bfov, const ErpGrid& grid) {
  detail::check_bfov(bfov);
  const TangentFrame f({bfov.lon_c, bfov.lat_c});
  BinaryMask m(grid.height, grid.width);
  for (std::size_t i = 0; i < grid.height; ++i)
    for (std::size_t j = 0; j < grid.width; ++j) m.set(i, j, frustum_cell(i, j, grid, f, bfov, 2, 2)[0] >= 0);
  return m;
}

/// Reprojects tangent-plane values [h,w] onto the ERP grid (nearest); pixels
/// whose ray leaves the frustum receive `fill`.
inline Tensor<double> tau_unproject(const Tensor<double>& values, const BFoV& bfov, const ErpGrid& grid, double fill) {
  require_rank(values, 2, "tau_unproject");
  detail::check_bfov(bfov);
  const std::size_t h = values.dim(0), w = values.dim(1);
  const TangentFrame f({bfov.lon_c, bfov.lat_c});
  Tensor<double> out({grid.height, grid.width}, fill);
  for (std::size_t i = 0; i < grid.height; ++i)
    for (std::size_t j = 0; j < grid.width; ++j) {
      const auto rc = frustum_cell(i, j, grid, f, bfov, h, w);
      if (rc[0] >= 0) out.at(i, j) = values.at(static_cast<std::size_t>(rc[0]), static_cast<std::size_t>(rc[1]));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Exact Euclidean distance transform

namespace detail {

/// Lower envelope of parabolas (q - v)^2 + f(v) over the finite entries of f.
inline void edt_1d(const std::vector<double>& f, std::vector<double>& out, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
  const std::size_t n = f.size();
  const double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  long k = -1;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    const double fq = f[q] + static_cast<double>(q * q);
    while (k >= 0) {
      const std::size_t p = v[static_cast<std::size_t>(k)];
      const double s = (fq - (f[p] + static_cast<double>(p * p))) / (2.0 * static_cast<double>(q) - 2.0 * static_cast<double>(p));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    const std::size_t ku = static_cast<std::size_t>(k);
    v[ku] = q;
    if (k == 0) {
      z[ku] = -inf;
    } else {
      const std::size_t p = v[ku - 1];
      z[ku] = (fq - (f[p] + static_cast<double>(p * p))) / (2.0 * static_cast<double>(q) - 2.0 * static_cast<double>(p));
    }
    z[ku + 1] = inf;
  }
  out.assign(n, inf);
  if (k < 0) return;
  std::size_t j = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[j + 1] < static_cast<double>(q)) ++j;
    const double d = static_cast<double>(q) - static_cast<double>(v[j]);
    out[q] = d * d + f[v[j]];
  }
}

}  // namespace detail

/// Exact Euclidean distance (pixels) from each pixel to the nearest foreground
/// pixel. Column sweeps give the vertical distance, then a lower-envelope pass
/// over each row combines them. Foreground pixels get 0.
inline DistanceField distance_transform(const BinaryMask& mask) {
  if (!mask.any()) throw EmptyMaskError("distance_transform: no foreground pixel");
  const std::size_t h = mask.height(), w = mask.width();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(h * w, inf);
  for (std::size_t j = 0; j < w; ++j) {
    double last = inf;
    for (std::size_t i = 0; i < h; ++i) {
      if (mask(i, j)) last = static_cast<double>(i);
      if (last != inf) g[i * w + j] = static_cast<double>(i) - last;
    }
    last = inf;
    for (std::size_t ii = h; ii-- > 0;) {
      if (mask(ii, j)) last = static_cast<double>(ii);
      if (last != inf) g[ii * w + j] = std::min(g[ii * w + j], last - static_cast<double>(ii));
    }
  }
  DistanceField df{h, w, std::vector<double>(h * w, 0.0), 0.0};
  std::vector<double> row(w), out;
  std::vector<std::size_t> v;
  std::vector<double> z;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double d = g[i * w + j];
      row[j] = d == inf ? inf : d * d;
    }
    detail::edt_1d(row, out, v, z);
    for (std::size_t j = 0; j < w; ++j) {
      const double d = std::sqrt(out[j]);
      df.data[i * w + j] = d;
      df.d_max = std::max(df.d_max, d);
    }
  }
  return df;
}

}  // namespace panokit
