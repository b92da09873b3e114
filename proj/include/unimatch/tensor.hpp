#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace unimatch {

// Error taxonomy shared across the library. The CLI maps ConfigError to
// exit code 2 and every std::runtime_error to exit code 3.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

/// Dense row-major tensor with value semantics. Rank-4 tensors are NCHW.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(count(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_))
      throw ContractError("tensor data size does not match shape " + shape_str(shape_));
  }

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

  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept {
    return data_[i * shape_[1] + j];
  }
  T& operator()(std::size_t n, std::size_t h, std::size_t w) noexcept {
    return data_[(n * shape_[1] + h) * shape_[2] + w];
  }
  const T& operator()(std::size_t n, std::size_t h, std::size_t w) const noexcept {
    return data_[(n * shape_[1] + h) * shape_[2] + w];
  }
  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  bool same_shape(const Tensor<U>& o) const noexcept {
    return shape_ == o.shape();
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  static std::size_t count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using FloatTensor = Tensor<float>;
using IndexTensor = Tensor<std::int32_t>;
using ByteTensor = Tensor<std::uint8_t>;

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

template <typename T, typename U>
void require_same_shape(const Tensor<T>& a, const Tensor<U>& b, const char* what) {
  if (!a.same_shape(b))
    throw ContractError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](T v) { return std::isfinite(static_cast<double>(v)); });
}

/// Spatial plane size H*W of a rank-3 or rank-4 tensor.
template <typename T>
std::size_t plane(const Tensor<T>& t) {
  return t.dim(t.rank() - 2) * t.dim(t.rank() - 1);
}

/// Concatenate rank-N tensors along the leading (batch) axis.
template <typename T>
Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == b.rank(), "concat_batch: rank mismatch");
  for (std::size_t i = 1; i < a.rank(); ++i)
    require(a.dim(i) == b.dim(i), "concat_batch: trailing dims mismatch");
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<T> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  return Tensor<T>(std::move(s), std::move(out));
}

/// Rows [begin, end) of the leading axis.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& t, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= t.dim(0), "slice_batch: range out of bounds");
  const std::size_t stride = t.size() / std::max<std::size_t>(t.dim(0), 1);
  Shape s = t.shape();
  s[0] = end - begin;
  std::vector<T> out(t.values().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                     t.values().begin() + static_cast<std::ptrdiff_t>(end * stride));
  return Tensor<T>(std::move(s), std::move(out));
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src, T scale = T{1}) {
  require_same_shape(dst, src, "add_into");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

}  // namespace unimatch
