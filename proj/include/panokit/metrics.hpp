#pragma once

// Region similarity J (IoU) and boundary F-measure for VOS evaluation.

#include <cmath>
#include <vector>

#include "panokit/geometry.hpp"
#include "panokit/loss.hpp"

namespace panokit {

/// Foreground pixels with a 4-neighbor in the background. With `seam_aware`
/// the left/right neighbors wrap around the image; otherwise pixels beyond
/// the left/right edge count as background. Rows beyond the poles are ignored.
inline BinaryMask boundary_map(const BinaryMask& m, bool seam_aware = true) {
  const std::size_t h = m.height(), w = m.width();
  BinaryMask b(h, w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      if (!m(i, j)) continue;
      bool edge = (i > 0 && !m(i - 1, j)) || (i + 1 < h && !m(i + 1, j));
      if (seam_aware) {
        edge = edge || !m(i, (j + w - 1) % w) || !m(i, (j + 1) % w);
      } else {
        edge = edge || j == 0 || j + 1 == w || !m(i, j - 1) || !m(i, j + 1);
      }
      if (edge) b.set(i, j, true);
    }
  return b;
}

inline std::size_t boundary_tolerance(std::size_t h, std::size_t w) {
  return static_cast<std::size_t>(std::ceil(0.008 * std::hypot(static_cast<double>(h), static_cast<double>(w))));
}

struct BoundaryScore {
  double precision = 1.0, recall = 1.0, f = 1.0;
};

namespace detail {

// Fraction of `from` boundary pixels with some `to` boundary pixel within
// Euclidean distance `tol`; column distance is cyclic when `seam_aware`.
inline double matched_fraction(const BinaryMask& from, const BinaryMask& to, std::size_t tol, bool seam_aware) {
  const std::size_t h = from.height(), w = from.width();
  const long r = static_cast<long>(tol);
  std::size_t n = 0, hit = 0;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      if (!from(i, j)) continue;
      ++n;
      bool found = false;
      for (long di = -r; di <= r && !found; ++di) {
        const long ii = static_cast<long>(i) + di;
        if (ii < 0 || ii >= static_cast<long>(h)) continue;
        for (long dj = -r; dj <= r && !found; ++dj) {
          if (di * di + dj * dj > r * r) continue;
          long jj = static_cast<long>(j) + dj;
          if (seam_aware) {
            jj = ((jj % static_cast<long>(w)) + static_cast<long>(w)) % static_cast<long>(w);
          } else if (jj < 0 || jj >= static_cast<long>(w)) {
            continue;
          }
          found = to(static_cast<std::size_t>(ii), static_cast<std::size_t>(jj));
        }
      }
      if (found) ++hit;
    }
  return n == 0 ? 1.0 : static_cast<double>(hit) / static_cast<double>(n);
}

}  // namespace detail

inline BoundaryScore boundary_f(const BinaryMask& pred, const BinaryMask& gt, std::size_t tol, bool seam_aware = true) {
  if (pred.height() != gt.height() || pred.width() != gt.width())
    throw DimensionError("boundary_f: grid mismatch");
  const BinaryMask bp = boundary_map(pred, seam_aware), bg = boundary_map(gt, seam_aware);
  const bool ep = !bp.any(), eg = !bg.any();
  if (ep && eg) return {};
  if (ep || eg) return {0.0, 0.0, 0.0};
  BoundaryScore s;
  s.precision = detail::matched_fraction(bp, bg, tol, seam_aware);
  s.recall = detail::matched_fraction(bg, bp, tol, seam_aware);
  s.f = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

struct MetricsReport {
  std::vector<double> j, f;  ///< per frame, including frame 0
  double j_mean = 0.0, f_mean = 0.0, jf = 0.0;
};

/// Frame 0 holds the prompt and is left out of the means, unless it is the only frame.
inline MetricsReport evaluate(const std::vector<BinaryMask>& pred, const std::vector<BinaryMask>& gt) {
  if (pred.size() != gt.size())
    throw DimensionError("evaluate: " + std::to_string(pred.size()) + " predictions for " + std::to_string(gt.size()) +
                         " ground-truth frames");
  MetricsReport r;
  if (gt.empty()) return r;
  const std::size_t tol = boundary_tolerance(gt[0].height(), gt[0].width());
  for (std::size_t t = 0; t < gt.size(); ++t) {
    if (pred[t].height() != gt[t].height() || pred[t].width() != gt[t].width())
      throw DimensionError("evaluate: grid mismatch at frame " + std::to_string(t));
    r.j.push_back(true_iou(pred[t], gt[t]));
    r.f.push_back(boundary_f(pred[t], gt[t], tol).f);
  }
  const std::size_t first = gt.size() > 1 ? 1 : 0;
  for (std::size_t t = first; t < gt.size(); ++t) {
    r.j_mean += r.j[t];
    r.f_mean += r.f[t];
  }
  const double n = static_cast<double>(gt.size() - first);
  r.j_mean /= n;
  r.f_mean /= n;
  r.jf = (r.j_mean + r.f_mean) / 2.0;
  return r;
}

}  // namespace panokit
