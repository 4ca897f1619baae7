#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "echoqa/rng.hpp"

namespace echoqa {

using Shape = std::vector<std::size_t>;

/// Number of elements for a shape. Throws std::invalid_argument for an empty
/// shape or a zero dimension.
std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array. For shape [A, B] element (i, j) lives at i * B + j.
///
/// A default-constructed tensor is a placeholder with no shape; every other
/// constructor enforces a non-empty shape with positive dimensions.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), T(0)) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(shape_));
  }

  static Tensor filled(Shape shape, T value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t flat) noexcept { return data_[flat]; }
  const T& operator[](std::size_t flat) const noexcept { return data_[flat]; }

  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) throw std::out_of_range("index rank does not match tensor rank");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
      if (i >= shape_[axis]) throw std::out_of_range("tensor index out of range");
      flat = flat * shape_[axis] + i;
      ++axis;
    }
    return flat;
  }
  T& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
  const T& at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

  void fill(T value) noexcept { std::fill(data_.begin(), data_.end(), value); }

  Tensor reshaped(Shape shape) const& {
    Tensor t = *this;
    return std::move(t).reshaped(std::move(shape));
  }
  Tensor reshaped(Shape shape) && {
    if (shape_size(shape) != data_.size())
      throw std::invalid_argument("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    shape_ = std::move(shape);
    return std::move(*this);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
Tensor<T> zeros(const Shape& shape) {
  return Tensor<T>(shape);
}

template <typename T>
Tensor<T> identity(std::size_t n) {
  Tensor<T> t({n, n});
  for (std::size_t i = 0; i < n; ++i) t[i * n + i] = T(1);
  return t;
}

template <typename T>
Tensor<T> randn(const Shape& shape, SeededRng& rng, double mean = 0.0, double stddev = 1.0) {
  if (!(stddev >= 0.0)) throw std::invalid_argument("randn: stddev must be non-negative");
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(mean + stddev * rng.normal());
  return t;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

enum class ElementwiseOp { add, sub, mul };

/// a (op) b. b may also hold a single element, which is broadcast.
template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(ElementwiseOp::add, a, b); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(ElementwiseOp::sub, a, b); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(ElementwiseOp::mul, a, b); }
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// Binary layout, little-endian: u32 rank, u32 dims[rank], raw scalars.
template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t);
template <typename T>
Tensor<T> read_tensor(std::istream& in);

}  // namespace echoqa
