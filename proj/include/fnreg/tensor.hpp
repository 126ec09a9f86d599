#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fnreg/error.hpp"

namespace fnreg {

using Shape = std::vector<std::size_t>;

/// Allocator with a fixed 64-byte alignment. Vectorized kernels peel
/// differently depending on the start address, so a fixed alignment keeps
/// floating-point results independent of where the heap put a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major array. The first extent is the batch dimension whenever a
/// tensor holds a batch.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_size(shape_), fill);
  }

  template <typename Alloc>
  Tensor(Shape shape, const std::vector<T, Alloc>& data)
      : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end())) {}

  Tensor(Shape shape, Buffer<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
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
  Buffer<T>& storage() noexcept { return data_; }
  const Buffer<T>& storage() const noexcept { return data_; }
  std::vector<T> to_vector() const { return std::vector<T>(data_.begin(), data_.end()); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Number of samples (leading extent).
  std::size_t batch() const { return shape_.empty() ? 0 : shape_[0]; }

  /// Extents after the batch dimension.
  Shape sample_shape() const { return shape_.empty() ? Shape{} : Shape(shape_.begin() + 1, shape_.end()); }

  std::size_t sample_size() const { return batch() == 0 ? 0 : size() / batch(); }

  std::span<const T> sample(std::size_t i) const {
    const std::size_t n = sample_size();
    return std::span<const T>(data_).subspan(i * n, n);
  }
  std::span<T> sample(std::size_t i) {
    const std::size_t n = sample_size();
    return std::span<T>(data_).subspan(i * n, n);
  }

  void reshape(Shape shape) {
    if (shape_size(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    shape_ = std::move(shape);
  }

  Tensor reshaped(Shape shape) const {
    Tensor out = *this;
    out.reshape(std::move(shape));
    return out;
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  /// Gathers the listed samples into a new batch tensor.
  Tensor gather(std::span<const std::size_t> rows) const {
    Shape shape = shape_;
    shape[0] = rows.size();
    Tensor out(std::move(shape));
    const std::size_t n = sample_size();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(rows[r] * n), n,
                  out.data_.begin() + static_cast<std::ptrdiff_t>(r * n));
    }
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, Buffer<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
    }
  }

  Shape shape_;
  Buffer<T> data_;
};

/// Prepends a batch extent to a per-sample shape.
inline Shape batched(std::size_t batch, const Shape& sample) {
  Shape out;
  out.reserve(sample.size() + 1);
  out.push_back(batch);
  out.insert(out.end(), sample.begin(), sample.end());
  return out;
}

/// Sum of squares accumulated in double.
template <typename T>
double squared_norm(std::span<const T> values) {
  double acc = 0.0;
  for (T v : values) acc += static_cast<double>(v) * static_cast<double>(v);
  return acc;
}

template <typename T>
double squared_norm(std::span<T> values) {
  return squared_norm(std::span<const T>(values));
}

}  // namespace fnreg
