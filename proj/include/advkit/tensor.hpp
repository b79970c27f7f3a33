#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace advkit {

inline size_t numel(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<size_t>& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

// Dense row-major tensor. The scalar type doubles as the dtype: float for
// training and attacks, double for gradient checking.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<size_t> shape)
      : shape_(std::move(shape)), data_(numel(shape_), T(0)) {}
  Tensor(std::vector<size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size())
      throw std::invalid_argument("tensor: shape " + shape_str(shape_) +
                                  " does not match " +
                                  std::to_string(data_.size()) + " values");
  }

  static Tensor zeros(std::vector<size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<size_t> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static Tensor scalar(T v) { return Tensor({}, {v}); }

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t size() const { return data_.size(); }
  size_t dim(size_t i) const { return shape_[i]; }
  bool is_scalar() const { return shape_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  T item() const {
    if (data_.size() != 1)
      throw std::logic_error("item() on tensor of size " + std::to_string(data_.size()));
    return data_[0];
  }

  // Cast between float/double tensors.
  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  std::vector<size_t> shape_;
  std::vector<T> data_;
};

// ---- raw tensor utilities used outside the autodiff graph ----------------

template <class T>
Tensor<T> sign(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (size_t i = 0; i < x.size(); ++i)
    out[i] = x[i] > T(0) ? T(1) : (x[i] < T(0) ? T(-1) : T(0));  // sign(0) = 0
  return out;
}

template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  Tensor<T> out(x.shape());
  for (size_t i = 0; i < x.size(); ++i) out[i] = std::min(hi, std::max(lo, x[i]));
  return out;
}

template <class T>
void axpy(Tensor<T>& y, T a, const Tensor<T>& x) {
  for (size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

template <class T>
T max_abs(const Tensor<T>& x) {
  T m = 0;
  for (size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i]));
  return m;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out(a.shape());
  for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

}  // namespace advkit
