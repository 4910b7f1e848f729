#pragma once

#include "panokit/autograd.hpp"

namespace panokit {

/// Per-frame decoder heads.
template <class T>
struct DecoderOutput {
  Var<T> y_sam;  ///< [3,H,W] mask logits
  Var<T> u;      ///< [3] predicted IoU, sigmoid-squashed into [0,1]
  Var<T> o;      ///< [1] occlusion (object-visible) logit
  Var<T> p;      ///< [d_p] object pointer
};

/// Argmax over predicted IoU; ties go to the lowest index.
template <class T>
std::size_t best_mask_index(const Tensor<T>& u) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < u.size(); ++k)
    if (u[k] > u[best]) best = k;
  return best;
}

}  // namespace panokit
