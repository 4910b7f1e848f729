#pragma once

// Minimal reverse-mode differentiation over coarse tensor ops.
//
// A Var is a shared handle to a graph node. Ops record their parents and a
// backward rule only when some input requires a gradient, so inference builds
// no graph. backward() runs every recorded rule once in reverse topological
// order.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "panokit/ops.hpp"
#include "panokit/tensor.hpp"

namespace panokit {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  void accumulate(Tensor<T>&& g) {
    if (!requires_grad) return;
    if (!has_grad) {
      grad = std::move(g);
      has_grad = true;
      return;
    }
    T* d = grad.data();
    const T* s = g.data();
    for (std::size_t i = 0; i < grad.size(); ++i) d[i] += s[i];
  }
  void accumulate(const Tensor<T>& g) { accumulate(Tensor<T>(g)); }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_->has_grad; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad; }
  void zero_grad() {
    node_->grad = Tensor<T>{};
    node_->has_grad = false;
  }
  Var detach() const { return Var(node_->value, false); }
  Node<T>* get() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {
inline thread_local bool grad_enabled = true;
}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
Var<T> constant(Tensor<T> v) {
  return Var<T>(std::move(v), false);
}

template <class T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward,
               const char* name) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = name;
  if (detail::grad_enabled)
    for (const auto& in : inputs)
      if (in.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents.reserve(inputs.size());
    for (auto& in : inputs) n->parents.push_back(in.node());
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

/// Populates `grad` of every requires_grad leaf reachable from `loss`.
template <class T>
void backward(const Var<T>& loss) {
  if (loss.size() != 1) throw DimensionError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  Tensor<T> seed(loss.shape(), T{1});
  loss.get()->accumulate(std::move(seed));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->backward || !n->has_grad) continue;
    n->backward(*n);
    if (!n->parents.empty()) {
      n->grad = Tensor<T>{};
      n->has_grad = false;
    }
  }
}

namespace detail {
template <class T>
Node<T>& parent(Node<T>& n, std::size_t i) {
  return *n.parents[i];
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op<T>(std::move(out), {a, b},
                    [](Node<T>& n) {
                      for (auto& p : n.parents) p->accumulate(n.grad);
                    },
                    "add");
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("sub: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op<T>(std::move(out), {a, b},
                    [](Node<T>& n) {
                      n.parents[0]->accumulate(n.grad);
                      Tensor<T> g = n.grad;
                      for (auto& v : g.storage()) v = -v;
                      n.parents[1]->accumulate(std::move(g));
                    },
                    "sub");
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("mul: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op<T>(std::move(out), {a, b},
                    [](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      auto& pb = *n.parents[1];
                      if (pa.requires_grad) {
                        Tensor<T> g = n.grad;
                        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= pb.value[i];
                        pa.accumulate(std::move(g));
                      }
                      if (pb.requires_grad) {
                        Tensor<T> g = n.grad;
                        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= pa.value[i];
                        pb.accumulate(std::move(g));
                      }
                    },
                    "mul");
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= s;
  return make_op<T>(std::move(out), {a},
                    [s](Node<T>& n) {
                      Tensor<T> g = n.grad;
                      for (auto& v : g.storage()) v *= s;
                      n.parents[0]->accumulate(std::move(g));
                    },
                    "scale");
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v += s;
  return make_op<T>(std::move(out), {a}, [](Node<T>& n) { n.parents[0]->accumulate(n.grad); }, "add_scalar");
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = v > T{0} ? v : T{0};
  return make_op<T>(std::move(out), {a},
                    [](Node<T>& n) {
                      Tensor<T> g = n.grad;
                      const auto& x = n.parents[0]->value;
                      for (std::size_t i = 0; i < g.size(); ++i)
                        if (!(x[i] > T{0})) g[i] = T{0};
                      n.parents[0]->accumulate(std::move(g));
                    },
                    "relu");
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = sigmoid(v);
  return make_op<T>(std::move(out), {a},
                    [](Node<T>& n) {
                      Tensor<T> g = n.grad;
                      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= n.value[i] * (T{1} - n.value[i]);
                      n.parents[0]->accumulate(std::move(g));
                    },
                    "sigmoid");
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

template <class T>
Var<T> sum(const Var<T>& a) {
  T s{0};
  for (T v : a.value().values()) s += v;
  return make_op<T>(Tensor<T>::scalar(s), {a},
                    [](Node<T>& n) { n.parents[0]->accumulate(Tensor<T>(n.parents[0]->value.shape(), n.grad[0])); },
                    "sum");
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.size()));
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  return make_op<T>(a.value().reshaped(std::move(s)), {a},
                    [](Node<T>& n) { n.parents[0]->accumulate(n.grad.reshaped(n.parents[0]->value.shape())); },
                    "reshape");
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  return make_op<T>(transpose2d(a.value()), {a}, [](Node<T>& n) { n.parents[0]->accumulate(transpose2d(n.grad)); },
                    "transpose");
}

/// Concatenation along `axis`; all other dimensions must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  Shape s = xs[0].shape();
  if (axis >= s.size()) throw DimensionError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& x : xs) {
    Shape o = x.shape();
    if (o.size() != s.size()) throw DimensionError("concat: rank mismatch");
    total += o[axis];
    o[axis] = s[axis];
    if (o != s) throw DimensionError("concat: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(xs[0].shape()));
  }
  s[axis] = total;
  const auto sp = detail::split_axis(s, axis);
  Tensor<T> out(s);
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& x : xs) {
    const std::size_t n = x.dim(axis);
    widths.push_back(n);
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy(x.value().data() + o * n * sp.inner, x.value().data() + (o + 1) * n * sp.inner,
                out.data() + (o * sp.n + off) * sp.inner);
    off += n;
  }
  return make_op<T>(std::move(out), xs,
                    [sp, widths](Node<T>& n) {
                      std::size_t off = 0;
                      for (std::size_t k = 0; k < widths.size(); ++k) {
                        auto& p = *n.parents[k];
                        const std::size_t w = widths[k];
                        if (p.requires_grad) {
                          Tensor<T> g(p.value.shape());
                          for (std::size_t o = 0; o < sp.outer; ++o)
                            std::copy(n.grad.data() + (o * sp.n + off) * sp.inner,
                                      n.grad.data() + (o * sp.n + off + w) * sp.inner, g.data() + o * w * sp.inner);
                          p.accumulate(std::move(g));
                        }
                        off += w;
                      }
                    },
                    "concat");
}

/// Half-open range [begin,end) along `axis`.
template <class T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto sp = detail::split_axis(x.shape(), axis);
  if (begin > end || end > sp.n) throw DimensionError("slice: range out of bounds");
  Shape s = x.shape();
  s[axis] = end - begin;
  const std::size_t w = end - begin;
  Tensor<T> out(s);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy(x.value().data() + (o * sp.n + begin) * sp.inner, x.value().data() + (o * sp.n + end) * sp.inner,
              out.data() + o * w * sp.inner);
  return make_op<T>(std::move(out), {x},
                    [sp, begin, w](Node<T>& n) {
                      Tensor<T> g(n.parents[0]->value.shape());
                      for (std::size_t o = 0; o < sp.outer; ++o)
                        std::copy(n.grad.data() + o * w * sp.inner, n.grad.data() + (o + 1) * w * sp.inner,
                                  g.data() + (o * sp.n + begin) * sp.inner);
                      n.parents[0]->accumulate(std::move(g));
                    },
                    "slice");
}

/// Repeats a vector [d] into rows [n,d].
template <class T>
Var<T> broadcast_rows(const Var<T>& v, std::size_t n) {
  require_rank(v.value(), 1, "broadcast_rows");
  const std::size_t d = v.dim(0);
  Tensor<T> out({n, d});
  for (std::size_t i = 0; i < n; ++i) std::copy(v.value().data(), v.value().data() + d, out.data() + i * d);
  return make_op<T>(std::move(out), {v},
                    [n, d](Node<T>& nd) {
                      Tensor<T> g({d});
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < d; ++j) g[j] += nd.grad[i * d + j];
                      nd.parents[0]->accumulate(std::move(g));
                    },
                    "broadcast_rows");
}

/// Per-channel affine map over a [C,...] tensor: x * gamma[c] + beta[c].
/// Either modulation tensor may be undefined (identity scale / zero shift).
template <class T>
Var<T> channel_affine(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  const std::size_t c = x.dim(0), inner = x.size() / c;
  if (gamma.defined() && gamma.shape() != Shape{c}) throw DimensionError("channel_affine: gamma shape");
  if (beta.defined() && beta.shape() != Shape{c}) throw DimensionError("channel_affine: beta shape");
  Tensor<T> out = x.value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T g = gamma.defined() ? gamma.value()[ch] : T{1};
    const T b = beta.defined() ? beta.value()[ch] : T{0};
    T* p = out.data() + ch * inner;
    for (std::size_t i = 0; i < inner; ++i) p[i] = p[i] * g + b;
  }
  std::vector<Var<T>> ins{x};
  const bool has_g = gamma.defined(), has_b = beta.defined();
  if (has_g) ins.push_back(gamma);
  if (has_b) ins.push_back(beta);
  return make_op<T>(std::move(out), ins,
                    [c, inner, has_g, has_b](Node<T>& n) {
                      auto& px = *n.parents[0];
                      Node<T>* pg = has_g ? n.parents[1].get() : nullptr;
                      Node<T>* pb = has_b ? n.parents[has_g ? 2 : 1].get() : nullptr;
                      if (px.requires_grad) {
                        Tensor<T> g = n.grad;
                        if (pg)
                          for (std::size_t ch = 0; ch < c; ++ch)
                            for (std::size_t i = 0; i < inner; ++i) g[ch * inner + i] *= pg->value[ch];
                        px.accumulate(std::move(g));
                      }
                      if (pg && pg->requires_grad) {
                        Tensor<T> g({c});
                        for (std::size_t ch = 0; ch < c; ++ch)
                          for (std::size_t i = 0; i < inner; ++i) g[ch] += n.grad[ch * inner + i] * px.value[ch * inner + i];
                        pg->accumulate(std::move(g));
                      }
                      if (pb && pb->requires_grad) {
                        Tensor<T> g({c});
                        for (std::size_t ch = 0; ch < c; ++ch)
                          for (std::size_t i = 0; i < inner; ++i) g[ch] += n.grad[ch * inner + i];
                        pb->accumulate(std::move(g));
                      }
                    },
                    "channel_affine");
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  return make_op<T>(matmul(a.value(), b.value()), {a, b},
                    [](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      auto& pb = *n.parents[1];
                      if (pa.requires_grad) pa.accumulate(matmul_nt(n.grad, pb.value));
                      if (pb.requires_grad) pb.accumulate(matmul_tn(pa.value, n.grad));
                    },
                    "matmul");
}

/// a [n,k] x b[m,k]^T
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  return make_op<T>(matmul_nt(a.value(), b.value()), {a, b},
                    [](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      auto& pb = *n.parents[1];
                      if (pa.requires_grad) pa.accumulate(matmul(n.grad, pb.value));
                      if (pb.requires_grad) pb.accumulate(matmul_tn(n.grad, pa.value));
                    },
                    "matmul_nt");
}

template <class T>
Var<T> dense(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  return make_op<T>(dense(x.value(), weight.value(), bias.value()), {x, weight, bias},
                    [](Node<T>& n) {
                      auto& px = *n.parents[0];
                      auto& pw = *n.parents[1];
                      auto& pb = *n.parents[2];
                      if (px.requires_grad) px.accumulate(matmul(n.grad, pw.value));
                      if (pw.requires_grad) pw.accumulate(matmul_tn(n.grad, px.value));
                      if (pb.requires_grad) {
                        const std::size_t rows = n.grad.dim(0), cols = n.grad.dim(1);
                        Tensor<T> g({cols});
                        for (std::size_t i = 0; i < rows; ++i)
                          for (std::size_t j = 0; j < cols; ++j) g[j] += n.grad[i * cols + j];
                        pb.accumulate(std::move(g));
                      }
                    },
                    "dense");
}

template <class T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  return make_op<T>(softmax(x.value(), axis), {x},
                    [axis](Node<T>& n) { n.parents[0]->accumulate(softmax_backward(n.value, axis, n.grad)); },
                    "softmax");
}

// ---------------------------------------------------------------------------
// Spatial

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, const PadSpec& pad, std::size_t stride = 1) {
  return make_op<T>(conv2d(x.value(), kernel.value(), bias.value(), pad, stride), {x, kernel, bias},
                    [pad, stride](Node<T>& n) {
                      auto& px = *n.parents[0];
                      auto& pk = *n.parents[1];
                      auto& pb = *n.parents[2];
                      auto g = conv2d_backward(px.value, pk.value, pb.value, pad, stride, n.grad);
                      px.accumulate(std::move(g.input));
                      pk.accumulate(std::move(g.kernel));
                      pb.accumulate(std::move(g.bias));
                    },
                    "conv2d");
}

/// Same-size convolution for odd kernel k: padding (k-1)/2 on both axes.
template <class T>
Var<T> conv2d_same(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, HorizontalPad mode,
                   std::size_t stride = 1) {
  return conv2d(x, kernel, bias, PadSpec{mode, VerticalPad::Zero, (kernel.dim(2) - 1) / 2}, stride);
}

template <class T>
Var<T> conv_transpose2x2(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias) {
  return make_op<T>(conv_transpose2x2(x.value(), kernel.value(), bias.value()), {x, kernel, bias},
                    [](Node<T>& n) {
                      auto g = conv_transpose2x2_backward(n.parents[0]->value, n.parents[1]->value, n.grad);
                      n.parents[0]->accumulate(std::move(g.input));
                      n.parents[1]->accumulate(std::move(g.kernel));
                      n.parents[2]->accumulate(std::move(g.bias));
                    },
                    "conv_transpose2x2");
}

template <class T>
Var<T> upsample_bilinear(const Var<T>& x, std::size_t factor, bool wrap_columns) {
  return make_op<T>(upsample_bilinear(x.value(), factor, wrap_columns), {x},
                    [factor, wrap_columns](Node<T>& n) {
                      n.parents[0]->accumulate(
                          upsample_bilinear_backward(n.parents[0]->value.shape(), factor, wrap_columns, n.grad));
                    },
                    "upsample_bilinear");
}

/// [C,h,w] -> [h*w, C] token rows.
template <class T>
Var<T> map_to_tokens(const Var<T>& x) {
  require_rank(x.value(), 3, "map_to_tokens");
  return transpose(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
}

/// [h*w, C] -> [C,h,w].
template <class T>
Var<T> tokens_to_map(const Var<T>& t, std::size_t h, std::size_t w) {
  return reshape(transpose(t), {t.dim(1), h, w});
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
template <class T>
double finite_diff_check(const std::function<Var<T>(const Var<T>&)>& f, const Tensor<T>& x, double eps) {
  Var<T> xv(x, true);
  Var<T> y = f(xv);
  if (y.size() != 1) throw DimensionError("finite_diff_check: f must return a scalar");
  if (!std::isfinite(static_cast<double>(y.value()[0]))) throw NumericError("finite_diff_check: f is not finite");
  backward(y);
  const Tensor<T> analytic = xv.has_grad() ? xv.grad() : Tensor<T>(x.shape());
  double worst = 0.0;
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + static_cast<T>(eps);
    const double fp = static_cast<double>(f(constant(probe)).value()[0]);
    probe[i] = orig - static_cast<T>(eps);
    const double fm = static_cast<double>(f(constant(probe)).value()[0]);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("finite_diff_check: f is not finite");
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = std::abs(static_cast<double>(analytic[i]) - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace panokit
