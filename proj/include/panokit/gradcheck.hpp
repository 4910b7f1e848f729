#pragma once

// Finite-difference audit of the loss gradients on random instances.

#include <algorithm>

#include "panokit/loss.hpp"
#include "panokit/nn.hpp"

namespace panokit {

struct GradcheckReport {
  double weighted_bce = 0.0, dice = 0.0, total = 0.0;  ///< max relative error over instances
  std::size_t instances = 0;
  double worst() const { return std::max({weighted_bce, dice, total}); }
};

namespace detail {

inline Tensor<double> uniform_tensor(Rng& rng, const Shape& shape, double lo, double hi) {
  Tensor<double> t(shape);
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Lays the decoder heads out in one flat vector: 3 logit maps, 3 IoU logits, occlusion logit, 2-d pointer.
inline DecoderOutput<double> heads_from_flat(const Var<double>& x, std::size_t h, std::size_t w) {
  const std::size_t n = 3 * h * w;
  DecoderOutput<double> out;
  out.y_sam = reshape(slice(x, 0, 0, n), {3, h, w});
  out.u = sigmoid(slice(x, 0, n, n + 3));
  out.o = slice(x, 0, n + 3, n + 4);
  out.p = slice(x, 0, n + 4, n + 6);
  return out;
}

}  // namespace detail

/// Random logits in [-3, 3], weights in [0.5, 2], ground truth ~30% foreground; eps 1e-6.
inline GradcheckReport loss_gradcheck(std::size_t instances, std::uint64_t seed, std::size_t h = 16,
                                      std::size_t w = 32) {
  Rng rng(seed);
  GradcheckReport r;
  r.instances = instances;
  const double eps = 1e-6;
  for (std::size_t t = 0; t < instances; ++t) {
    const BinaryMask gt = BinaryMask::threshold(detail::uniform_tensor(rng, {h, w}, 0.0, 1.0), 0.7);
    const Tensor<double> gt_t = gt.to_tensor<double>();
    const Tensor<double> wt = detail::uniform_tensor(rng, {h, w}, 0.5, 2.0);
    r.weighted_bce = std::max(
        r.weighted_bce, finite_diff_check<double>([&](const Var<double>& x) { return weighted_bce(x, gt_t, wt); },
                                                  detail::uniform_tensor(rng, {h, w}, -3.0, 3.0), eps));
    r.dice = std::max(r.dice,
                      finite_diff_check<double>([&](const Var<double>& x) { return dice_loss(sigmoid(x), gt_t); },
                                                detail::uniform_tensor(rng, {h, w}, -3.0, 3.0), eps));
    const double o_gt = static_cast<double>(t % 2);
    r.total = std::max(r.total, finite_diff_check<double>(
                                    [&](const Var<double>& x) {
                                      return total_loss(detail::heads_from_flat(x, h, w), gt, o_gt, wt, LossWeights{})
                                          .total;
                                    },
                                    detail::uniform_tensor(rng, {3 * h * w + 6}, -3.0, 3.0), eps));
  }
  return r;
}

}  // namespace panokit
