#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "panokit/nn.hpp"

namespace panokit {

/// Adam with decoupled weight decay over every tensor in a ParamStore.
template <class T>
class AdamW {
 public:
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;

  explicit AdamW(ParamStore<T>& store) : store_(&store) {
    for (const auto& [_, v] : store.items()) {
      m_.emplace_back(v.size(), 0.0);
      v_.emplace_back(v.size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    auto& items = store_->items();
    for (std::size_t k = 0; k < items.size(); ++k) {
      Var<T>& p = items[k].second;
      if (!p.has_grad()) continue;
      T* w = p.mutable_value().data();
      const T* g = p.grad().data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < m.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
        double wi = static_cast<double>(w[i]);
        wi -= lr * (m[i] / c1 / (std::sqrt(v[i] / c2) + eps) + weight_decay * wi);
        w[i] = static_cast<T>(wi);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  ParamStore<T>* store_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Cosine decay from `base` at step 0 to `base * floor` at `total` steps.
inline double cosine_lr(double base, std::size_t step, std::size_t total, double floor) {
  if (total <= 1) return base;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total - 1));
  return base * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

/// Global L2 norm over all populated gradients.
template <class T>
double grad_norm(const ParamStore<T>& store) {
  double s = 0.0;
  for (const auto& [_, v] : store.items()) {
    if (!v.has_grad()) continue;
    for (T g : v.grad().storage()) s += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(s);
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
template <class T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  const double n = grad_norm(store);
  if (max_norm > 0.0 && n > max_norm) {
    const T s = static_cast<T>(max_norm / n);
    for (auto& [_, v] : store.items()) {
      if (!v.has_grad()) continue;
      for (T& g : v.mutable_grad().storage()) g *= s;
    }
  }
  return n;
}

}  // namespace panokit
