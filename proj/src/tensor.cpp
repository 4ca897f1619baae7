#include "echoqa/tensor.hpp"

#include <algorithm>
#include <bit>
#include <istream>
#include <ostream>

#include "echoqa/kernels.hpp"

namespace echoqa {

std::size_t shape_size(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must not be empty");
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw std::invalid_argument("tensor dimension must be positive: " + shape_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul expects 2-d tensors");
  if (a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul dimension mismatch: " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()));
  Tensor<T> c({a.dim(0), b.dim(1)});
  kernels::matmul(a.dim(0), b.dim(1), a.dim(1), a.data(), b.data(), c.data());
  return c;
}

template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b) {
  const bool broadcast = b.size() == 1;
  if (!broadcast && a.shape() != b.shape())
    throw std::invalid_argument("elementwise shape mismatch: " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T rhs = broadcast ? b[0] : b[i];
    switch (op) {
      case ElementwiseOp::add: out[i] = a[i] + rhs; break;
      case ElementwiseOp::sub: out[i] = a[i] - rhs; break;
      case ElementwiseOp::mul: out[i] = a[i] * rhs; break;
    }
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * factor;
  return out;
}

namespace {

template <typename U>
void put_le(std::ostream& out, U value) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(bytes, sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(U));
  if (!in) throw std::runtime_error("tensor stream truncated");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

}  // namespace

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (T v : t.values()) put_le<Bits<T>>(out, std::bit_cast<Bits<T>>(v));
  if (!out) throw std::runtime_error("failed to write tensor");
}

template <typename T>
Tensor<T> read_tensor(std::istream& in) {
  const auto rank = get_le<std::uint32_t>(in);
  if (rank == 0 || rank > 16) throw std::runtime_error("corrupt tensor header: rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_le<std::uint32_t>(in);
  std::vector<T> data(shape_size(shape));
  for (auto& v : data) v = std::bit_cast<T>(get_le<Bits<T>>(in));
  return Tensor<T>(std::move(shape), std::move(data));
}

#define ECHOQA_INSTANTIATE_TENSOR(T)                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> elementwise(ElementwiseOp, const Tensor<T>&, const Tensor<T>&);  \
  template Tensor<T> scale(const Tensor<T>&, T);                                      \
  template void write_tensor(std::ostream&, const Tensor<T>&);                        \
  template Tensor<T> read_tensor<T>(std::istream&);

ECHOQA_INSTANTIATE_TENSOR(float)
ECHOQA_INSTANTIATE_TENSOR(double)

#undef ECHOQA_INSTANTIATE_TENSOR

}  // namespace echoqa
