#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "panokit/errors.hpp"

namespace panokit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. Value semantics; the gradient graph lives in `Var`.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& at(std::size_t c, std::size_t i, std::size_t j) { return data_[(c * shape_[1] + i) * shape_[2] + j]; }
  const T& at(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }

  T item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data_.size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensord = Tensor<double>;
using Tensorf = Tensor<float>;

template <class T>
void require_shape(const Tensor<T>& t, const Shape& s, const char* what) {
  if (t.shape() != s)
    throw DimensionError(std::string(what) + ": expected shape " + shape_str(s) + ", got " + shape_str(t.shape()));
}

template <class T>
void require_rank(const Tensor<T>& t, std::size_t r, const char* what) {
  if (t.rank() != r)
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(r) + ", got shape " +
                         shape_str(t.shape()));
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("max_abs_diff: shape mismatch");
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(a[i] > b[i] ? a[i] - b[i] : b[i] - a[i]));
  return m;
}

/// Horizontal cyclic shift of the last axis by `s` columns (positive = right).
template <class T>
Tensor<T> roll_columns(const Tensor<T>& t, long s) {
  if (t.rank() < 1) throw DimensionError("roll_columns: rank 0");
  const std::size_t w = t.shape().back();
  const std::size_t rows = t.size() / w;
  Tensor<T> out(t.shape());
  const long wl = static_cast<long>(w);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < w; ++j) {
      const long dst = ((static_cast<long>(j) + s) % wl + wl) % wl;
      out[r * w + static_cast<std::size_t>(dst)] = t[r * w + j];
    }
  return out;
}

}  // namespace panokit
