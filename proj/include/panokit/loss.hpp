#pragma once

// Distortion-guided pixel weights and the training objective.
//
// Weight generation: the ground-truth mask is viewed through its bounding
// field-of-view (gnomonic crop), the foreground gets a clipped |BG|/|FG|
// weight, background weights decay with distance to the object, and the map
// is pushed back onto the ERP grid with the smallest crop weight filling the
// rest of the sphere.

#include <algorithm>
#include <cmath>
#include <string>

#include "panokit/autograd.hpp"
#include "panokit/decoder_output.hpp"
#include "panokit/geometry.hpp"

namespace panokit {

struct WeightParams {
  double w_min = 0.5;
  double w_max = 2.0;
  double alpha = 0.5;

  void validate() const {
    if (!(w_min > 0.0 && w_min <= 1.0 && 1.0 <= w_max)) throw ConfigError("weight bounds need 0 < w_min <= 1 <= w_max");
    if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  }
};

struct LossWeights {
  double lambda_bce = 0.5;
  double lambda_dice = 0.5;
  double lambda_iou = 1.0;
  double lambda_occ = 0.1;

  void validate() const {
    if (lambda_bce < 0 || lambda_dice < 0 || lambda_iou < 0 || lambda_occ < 0)
      throw ConfigError("loss weights must be nonnegative");
  }
};

/// Tangent-plane search region used for weight generation. The margin is
/// wider than the tracking default so that |BG| > |FG| for compact objects.
struct WeightGeometry {
  std::size_t out_h = 64;
  std::size_t out_w = 64;
  double margin = 2.0;
};

inline double clipped_fg_weight(std::size_t fg_count, std::size_t bg_count, const WeightParams& params) {
  if (fg_count == 0) throw EmptyMaskError("clipped_fg_weight: no foreground pixels");
  const double ratio = static_cast<double>(bg_count) / static_cast<double>(fg_count);
  return std::clamp(ratio, params.w_min, params.w_max);
}

/// 1/w_f + (w_f - 1/w_f) * (1 - D/D_max)^alpha; D_max == 0 yields w_f.
inline double bg_weight(double d, double d_max, double w_f, double alpha) {
  if (d_max <= 0.0) return w_f;
  const double w_b = 1.0 / w_f;
  const double t = std::clamp(1.0 - d / d_max, 0.0, 1.0);
  return w_b + (w_f - w_b) * std::pow(t, alpha);
}

struct WeightMap {
  Tensor<double> data;     ///< [H,W], strictly positive
  bool empty_mask = false;  ///< no foreground: uniform 1.0
};

/// Every intermediate of the weight pipeline, for inspection and tests.
struct WeightMapTrace {
  BFoV bfov;
  BinaryMask projected;               ///< M^sr
  DistanceField distance;             ///< over the projected window
  Tensor<double> projected_weights;   ///< W^sr
  double w_f = 1.0;
  double fill = 1.0;                  ///< min(W^sr)
  WeightMap map;
};

inline WeightMapTrace generate_weight_map_traced(const BinaryMask& gt, const WeightParams& params,
                                                 const WeightGeometry& geo = {}) {
  params.validate();
  WeightMapTrace tr;
  const ErpGrid grid = gt.grid();
  auto uniform = [&] {
    tr.map.data = Tensor<double>({grid.height, grid.width}, 1.0);
    tr.map.empty_mask = true;
    return tr;
  };
  if (!gt.any()) return uniform();
  tr.bfov = estimate_bfov(gt, geo.margin);
  tr.projected = tau_project(gt, tr.bfov, geo.out_h, geo.out_w);
  const std::size_t fg = tr.projected.count();
  // A sliver can vanish under nearest sampling; treat it like an absent object.
  if (fg == 0) return uniform();
  const std::size_t bg = tr.projected.size() - fg;
  tr.w_f = clipped_fg_weight(fg, bg, params);
  tr.distance = distance_transform(tr.projected);
  tr.projected_weights = Tensor<double>({geo.out_h, geo.out_w});
  for (std::size_t k = 0; k < tr.projected.size(); ++k)
    tr.projected_weights[k] = tr.projected[k] ? tr.w_f : bg_weight(tr.distance.data[k], tr.distance.d_max, tr.w_f, params.alpha);
  tr.fill = *std::min_element(tr.projected_weights.storage().begin(), tr.projected_weights.storage().end());
  Tensor<double> w = tau_unproject(tr.projected_weights, tr.bfov, grid, 0.0);
  for (auto& v : w.storage())
    if (v == 0.0) v = tr.fill;
  tr.map.data = std::move(w);
  return tr;
}

inline WeightMap generate_weight_map(const BinaryMask& gt, const WeightParams& params, const WeightGeometry& geo = {}) {
  return generate_weight_map_traced(gt, params, geo).map;
}

// ---------------------------------------------------------------------------
// Loss terms on plain tensors: value and gradient.

template <class T>
struct LossGrad {
  double value = 0.0;
  Tensor<T> grad;
};

/// Stable log(1 + exp(-|x|)) + max(x, 0) - x*g.
inline double bce_logit_term(double x, double g) {
  return std::max(x, 0.0) - x * g + std::log1p(std::exp(-std::abs(x)));
}

/// mean(W * BCE(sigmoid(logits), gt)); gradient W*(sigmoid - gt)/N.
template <class T>
LossGrad<T> weighted_bce(const Tensor<T>& logits, const Tensor<T>& gt, const Tensor<T>& weights) {
  if (logits.shape() != gt.shape() || logits.shape() != weights.shape())
    throw DimensionError("weighted_bce: shape mismatch");
  LossGrad<T> r{0.0, Tensor<T>(logits.shape())};
  const double n = static_cast<double>(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const double x = logits[k], g = gt[k], w = weights[k];
    r.value += w * bce_logit_term(x, g);
    r.grad[k] = static_cast<T>(w * (sigmoid(x) - g) / n);
  }
  r.value /= n;
  return r;
}

/// 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)
template <class T>
LossGrad<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& gt, double eps = 1.0) {
  if (probs.shape() != gt.shape()) throw DimensionError("dice_loss: shape mismatch");
  double inter = 0.0, s = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    inter += static_cast<double>(probs[k]) * gt[k];
    s += static_cast<double>(probs[k]) + gt[k];
  }
  const double num = 2.0 * inter + eps, den = s + eps;
  LossGrad<T> r{1.0 - num / den, Tensor<T>(probs.shape())};
  for (std::size_t k = 0; k < probs.size(); ++k)
    r.grad[k] = static_cast<T>(-(2.0 * gt[k] * den - num) / (den * den));
  return r;
}

template <class T>
LossGrad<T> iou_mse(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) throw DimensionError("iou_mse: shape mismatch");
  LossGrad<T> r{0.0, Tensor<T>(pred.shape())};
  const double n = static_cast<double>(pred.size());
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double d = static_cast<double>(pred[k]) - target[k];
    r.value += d * d / n;
    r.grad[k] = static_cast<T>(2.0 * d / n);
  }
  return r;
}

inline LossGrad<double> occlusion_bce(double logit, double gt) {
  return {bce_logit_term(logit, gt), Tensor<double>::scalar(sigmoid(logit) - gt)};
}

/// |A and B| / |A or B|, 1 when both are empty.
inline double true_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.height() != b.height() || a.width() != b.width()) throw DimensionError("true_iou: grid mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    inter += a[k] & b[k];
    uni += a[k] | b[k];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Graph versions

namespace detail {
template <class T>
Var<T> loss_node(const Var<T>& x, LossGrad<T>&& lg, const char* name) {
  auto grad = std::make_shared<Tensor<T>>(std::move(lg.grad));
  return make_op<T>(Tensor<T>::scalar(static_cast<T>(lg.value)), {x},
                    [grad](Node<T>& n) {
                      Tensor<T> g = *grad;
                      for (auto& v : g.storage()) v *= n.grad[0];
                      n.parents[0]->accumulate(std::move(g));
                    },
                    name);
}
}  // namespace detail

template <class T>
Var<T> weighted_bce(const Var<T>& logits, const Tensor<T>& gt, const Tensor<T>& weights) {
  return detail::loss_node(logits, weighted_bce(logits.value(), gt, weights), "weighted_bce");
}

template <class T>
Var<T> dice_loss(const Var<T>& probs, const Tensor<T>& gt, double eps = 1.0) {
  return detail::loss_node(probs, dice_loss(probs.value(), gt, eps), "dice_loss");
}

template <class T>
Var<T> iou_mse(const Var<T>& pred, const Tensor<T>& target) {
  return detail::loss_node(pred, iou_mse(pred.value(), target), "iou_mse");
}

template <class T>
Var<T> occlusion_bce(const Var<T>& logit, double gt) {
  if (logit.size() != 1) throw DimensionError("occlusion_bce: logit must be a scalar");
  auto lg = occlusion_bce(static_cast<double>(logit.value()[0]), gt);
  return detail::loss_node(logit, LossGrad<T>{lg.value, Tensor<T>(logit.shape(), static_cast<T>(lg.grad[0]))},
                           "occlusion_bce");
}

template <class T>
struct LossBreakdown {
  Var<T> total;
  double iou = 0.0, bce = 0.0, dice = 0.0, occ = 0.0;
  std::size_t selected = 0;
  Tensor<T> u_true;
};

/// lambda_iou*MSE(u, IoU) + lambda_bce*BCE_W(best mask) + lambda_dice*Dice(best mask) + lambda_occ*BCE(o).
/// IoU targets threshold each predicted logit map at 0.
template <class T>
LossBreakdown<T> total_loss(const DecoderOutput<T>& out, const BinaryMask& gt, double o_gt, const Tensor<double>& weights,
                            const LossWeights& lw) {
  const std::size_t n_masks = out.y_sam.dim(0), h = out.y_sam.dim(1), w = out.y_sam.dim(2);
  if (gt.height() != h || gt.width() != w) throw DimensionError("total_loss: ground truth grid mismatch");
  require_shape(weights, {h, w}, "total_loss weights");
  LossBreakdown<T> r;
  r.u_true = Tensor<T>({n_masks});
  for (std::size_t k = 0; k < n_masks; ++k) {
    const T* lp = out.y_sam.value().data() + k * h * w;
    std::vector<std::uint8_t> bits(h * w);
    for (std::size_t i = 0; i < h * w; ++i) bits[i] = lp[i] > T{0} ? 1 : 0;
    r.u_true[k] = static_cast<T>(true_iou(BinaryMask(h, w, std::move(bits)), gt));
  }
  r.selected = best_mask_index(out.u.value());
  const Var<T> logits = reshape(slice(out.y_sam, 0, r.selected, r.selected + 1), {h, w});
  const Tensor<T> gt_t = gt.to_tensor<T>();
  const Tensor<T> w_t = weights.cast<T>();

  Var<T> l_iou = iou_mse(out.u, r.u_true);
  Var<T> l_bce = weighted_bce(logits, gt_t, w_t);
  Var<T> l_dice = dice_loss(sigmoid(logits), gt_t);
  Var<T> l_occ = occlusion_bce(out.o, o_gt);
  r.iou = l_iou.value()[0];
  r.bce = l_bce.value()[0];
  r.dice = l_dice.value()[0];
  r.occ = l_occ.value()[0];
  r.total = add(add(scale(l_iou, static_cast<T>(lw.lambda_iou)), scale(l_bce, static_cast<T>(lw.lambda_bce))),
                add(scale(l_dice, static_cast<T>(lw.lambda_dice)), scale(l_occ, static_cast<T>(lw.lambda_occ))));
  return r;
}

}  // namespace panokit
