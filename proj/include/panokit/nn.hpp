#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "panokit/autograd.hpp"

namespace panokit {

/// SplitMix-seeded xoshiro256** with platform-independent uniform/normal draws,
/// so synthetic data and initial weights match bit-for-bit across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& s : s_) {
      x += 0x9E3779B97F4A7C15ull;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
      z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
      s = z ^ (z >> 31);
    }
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  std::uint64_t fork_seed() { return next(); }

  std::array<std::uint64_t, 4> state() const { return {s_[0], s_[1], s_[2], s_[3]}; }
  void set_state(const std::array<std::uint64_t, 4>& s) {
    for (std::size_t i = 0; i < 4; ++i) s_[i] = s[i];
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t s_[4];
};

/// Named trainable tensors in creation order.
template <class T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.emplace_back(name, Var<T>(std::move(init), true));
    return params_.back().second;
  }

  Var<T> normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.storage()) v = static_cast<T>(rng.normal() * stddev);
    return add(name, std::move(t));
  }

  Var<T> filled(const std::string& name, Shape shape, double value) {
    return add(name, Tensor<T>(std::move(shape), static_cast<T>(value)));
  }

  const Var<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return params_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<std::pair<std::string, Var<T>>>& items() { return params_; }
  const std::vector<std::pair<std::string, Var<T>>>& items() const { return params_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : params_) v.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
struct Linear {
  Var<T> weight, bias;

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, std::size_t din, std::size_t dout, Rng& rng,
         double gain = 1.0) {
    weight = store.normal(name + ".weight", {dout, din}, gain / std::sqrt(static_cast<double>(din)), rng);
    bias = store.filled(name + ".bias", {dout}, 0.0);
  }
  Var<T> operator()(const Var<T>& x) const { return dense(x, weight, bias); }
};

template <class T>
struct Conv {
  Var<T> weight, bias;
  std::size_t stride = 1;

  Conv() = default;
  Conv(ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, Rng& rng,
       std::size_t stride_ = 1, double gain = std::sqrt(2.0))
      : stride(stride_) {
    weight = store.normal(name + ".weight", {cout, cin, k, k}, gain / std::sqrt(static_cast<double>(cin * k * k)), rng);
    bias = store.filled(name + ".bias", {cout}, 0.0);
  }
  Var<T> operator()(const Var<T>& x, HorizontalPad mode) const { return conv2d_same(x, weight, bias, mode, stride); }
};

/// Two-layer perceptron with a ReLU between.
template <class T>
struct Mlp {
  Linear<T> l1, l2;

  Mlp() = default;
  Mlp(ParamStore<T>& store, const std::string& name, std::size_t din, std::size_t hidden, std::size_t dout, Rng& rng,
      double out_gain = 1.0)
      : l1(store, name + ".0", din, hidden, rng, std::sqrt(2.0)), l2(store, name + ".1", hidden, dout, rng, out_gain) {}
  Var<T> operator()(const Var<T>& x) const { return l2(relu(l1(x))); }
};

/// Single-head scaled dot-product attention with input/output projections.
template <class T>
struct Attention {
  Linear<T> q, k, v, out;

  Attention() = default;
  Attention(ParamStore<T>& store, const std::string& name, std::size_t d_query, std::size_t d_kv, std::size_t d_attn,
            Rng& rng, double out_gain = 1.0)
      : q(store, name + ".q", d_query, d_attn, rng),
        k(store, name + ".k", d_kv, d_attn, rng),
        v(store, name + ".v", d_kv, d_attn, rng),
        out(store, name + ".out", d_attn, d_query, rng, out_gain) {}

  struct Result {
    Var<T> out;
    Var<T> weights;  ///< [n_query, n_key], rows sum to 1
  };

  Result run(const Var<T>& queries, const Var<T>& keys, const Var<T>& values) const {
    const Var<T> qq = q(queries), kk = k(keys), vv = v(values);
    const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(qq.dim(1))));
    Var<T> a = softmax(scale(matmul_nt(qq, kk), s), 1);
    return {out(matmul(a, vv)), a};
  }
  Var<T> operator()(const Var<T>& queries, const Var<T>& kv) const { return run(queries, kv, kv).out; }
};

}  // namespace panokit
