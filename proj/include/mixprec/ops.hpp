#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mixprec/numerics.hpp"
#include "mixprec/tape.hpp"
#include "mixprec/tensor.hpp"

// Primitive operations on Tensor.
//
// Every primitive computes in binary32 and rounds each result, including the
// partial sums of reductions and dot products, to the output's dtype. Output
// dtypes follow the promotion lattice; weak scalars never promote.
// Non-finite values propagate without error.

namespace mixprec {

enum class Unary { Neg, Exp, Log, Relu, Gelu, Sqrt, ReluGrad, GeluGrad };
enum class Binary { Add, Sub, Mul, Div };
enum class Reduce { Sum, Mean, Max };

inline constexpr float kLayerNormEps = 1e-5f;

Tensor elementwise(Unary op, const Tensor& a);
Tensor elementwise(Binary op, const Tensor& a, const Tensor& b);
Tensor elementwise(Binary op, const Tensor& a, const Scalar& s);
Tensor elementwise(Binary op, const Scalar& s, const Tensor& a);
Tensor cast(const Tensor& t, DType dtype);
Tensor reshape(const Tensor& t, Shape shape);
Tensor transpose(const Tensor& t, std::vector<std::size_t> perm);
Tensor broadcast_to(const Tensor& t, const Shape& shape);
Tensor sum_to(const Tensor& t, const Shape& shape);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor reduce(Reduce op, const Tensor& a, std::optional<int> axis = std::nullopt,
              bool keepdims = false);
Tensor softmax(const Tensor& a, int axis);
Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias);
Tensor cross_entropy(const Tensor& logits, const Tensor& labels);

namespace detail {

inline float round_to(float v, DType d) noexcept {
  return d == DType::F32 ? v : quantize(v, d);
}

/// Running sum that rounds after every addition.
struct Accumulator {
  DType dtype;
  float value = 0.0f;
  void add(float x) noexcept { value = round_to(value + x, dtype); }
};

inline void require_float(DType d, const char* op) {
  if (!is_float(d)) {
    throw ContractViolation(std::string(op) + ": requires a float dtype, got " +
                            std::string(name(d)));
  }
}

inline std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("broadcast: incompatible shapes " + to_string(a) + " and " +
                       to_string(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

/// Strides of `in` viewed as broadcast to `out` (0 along broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  const auto own = strides_of(in);
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    strides[i + offset] = in[i] == 1 ? 0 : own[i];
  }
  return strides;
}

/// Calls fn(out_index, offset_a, offset_b) for every element of `out` in
/// row-major order.
template <class Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
  const std::size_t total = numel(out);
  if (total == 0) return;
  std::vector<std::size_t> index(out.size(), 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t n = 0; n < total; ++n) {
    fn(n, ia, ib);
    for (std::size_t d = out.size(); d-- > 0;) {
      if (++index[d] < out[d]) {
        ia += sa[d];
        ib += sb[d];
        break;
      }
      ia -= sa[d] * (out[d] - 1);
      ib -= sb[d] * (out[d] - 1);
      index[d] = 0;
    }
  }
}

inline float gelu_value(float x) noexcept {
  constexpr float c = 0.7978845608028654f;  // sqrt(2/pi)
  const float t = std::tanh(c * (x + 0.044715f * x * x * x));
  return 0.5f * x * (1.0f + t);
}

inline float gelu_derivative(float x) noexcept {
  constexpr float c = 0.7978845608028654f;
  const float t = std::tanh(c * (x + 0.044715f * x * x * x));
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * c * (1.0f + 3.0f * 0.044715f * x * x);
}

inline float unary_value(Unary op, float x) noexcept {
  switch (op) {
    case Unary::Neg:
      return -x;
    case Unary::Exp:
      return std::exp(x);
    case Unary::Log:
      return std::log(x);
    case Unary::Relu:
      return x > 0.0f ? x : 0.0f;
    case Unary::Gelu:
      return gelu_value(x);
    case Unary::Sqrt:
      return std::sqrt(x);
    case Unary::ReluGrad:
      return x > 0.0f ? 1.0f : 0.0f;
    case Unary::GeluGrad:
      return gelu_derivative(x);
  }
  return x;
}

inline float binary_value(Binary op, float x, float y) noexcept {
  switch (op) {
    case Binary::Add:
      return x + y;
    case Binary::Sub:
      return x - y;
    case Binary::Mul:
      return x * y;
    case Binary::Div:
      return x / y;
  }
  return x;
}

inline const char* op_name(Binary op) noexcept {
  switch (op) {
    case Binary::Add:
      return "add";
    case Binary::Sub:
      return "sub";
    case Binary::Mul:
      return "mul";
    case Binary::Div:
      return "div";
  }
  return "binary";
}

inline const char* op_name(Unary op) noexcept {
  switch (op) {
    case Unary::Neg:
      return "neg";
    case Unary::Exp:
      return "exp";
    case Unary::Log:
      return "log";
    case Unary::Relu:
      return "relu";
    case Unary::Gelu:
      return "gelu";
    case Unary::Sqrt:
      return "sqrt";
    case Unary::ReluGrad:
      return "relu_grad";
    case Unary::GeluGrad:
      return "gelu_grad";
  }
  return "unary";
}

inline Tensor unary_kernel(Unary op, const Tensor& a) {
  require_float(a.dtype(), op_name(op));
  const DType d = a.dtype();
  const auto in = a.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = round_to(unary_value(op, in[i]), d);
  return Tensor::from_quantized(a.shape(), d, std::move(out));
}

inline Tensor binary_kernel(Binary op, const Tensor& a, const Tensor& b) {
  const DType d = promote(a.dtype(), b.dtype());
  require_float(d, op_name(op));
  const auto x = a.data();
  const auto y = b.data();
  if (a.shape() == b.shape()) {
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = round_to(binary_value(op, x[i], y[i]), d);
    return Tensor::from_quantized(a.shape(), d, std::move(out));
  }
  const Shape shape = broadcast_shapes(a.shape(), b.shape());
  std::vector<float> out(numel(shape));
  for_each_broadcast(shape, broadcast_strides(a.shape(), shape),
                     broadcast_strides(b.shape(), shape),
                     [&](std::size_t n, std::size_t ia, std::size_t ib) {
                       out[n] = round_to(binary_value(op, x[ia], y[ib]), d);
                     });
  return Tensor::from_quantized(shape, d, std::move(out));
}

inline float scalar_operand(const Scalar& s) {
  const auto v = static_cast<float>(s.value);
  return s.weak || !is_float(s.dtype) ? v : quantize(v, s.dtype);
}

inline Tensor scalar_kernel(Binary op, const Tensor& a, const Scalar& s, bool scalar_left) {
  const DType d = promote_with_scalar(a.dtype(), s);
  require_float(d, op_name(op));
  const float c = scalar_operand(s);
  const auto x = a.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = round_to(scalar_left ? binary_value(op, c, x[i]) : binary_value(op, x[i], c), d);
  }
  return Tensor::from_quantized(a.shape(), d, std::move(out));
}

inline Tensor transpose_last(const Tensor& t) {
  std::vector<std::size_t> perm(t.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[t.rank() - 1], perm[t.rank() - 2]);
  return transpose(t, std::move(perm));
}

/// Splits `shape` around `axis` into (outer, length, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline Tensor reduce_kernel(Reduce op, const Tensor& a, std::optional<std::size_t> axis,
                            bool keepdims) {
  const char* label = op == Reduce::Sum ? "sum" : op == Reduce::Mean ? "mean" : "max";
  require_float(a.dtype(), label);
  const DType d = a.dtype();
  AxisSplit split;
  Shape out_shape;
  if (axis) {
    split = split_at(a.shape(), *axis);
    for (std::size_t i = 0; i < a.rank(); ++i) {
      if (i != *axis) {
        out_shape.push_back(a.shape()[i]);
      } else if (keepdims) {
        out_shape.push_back(1);
      }
    }
  } else {
    split.length = a.numel();
    if (keepdims) out_shape.assign(a.rank(), 1);
  }
  if (split.length == 0 && op != Reduce::Sum) {
    throw ShapeError(std::string(label) + ": reduction over an empty axis");
  }
  const auto x = a.data();
  std::vector<float> out(split.outer * split.inner);
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t i = 0; i < split.inner; ++i) {
      const std::size_t base = o * split.length * split.inner + i;
      float result = 0.0f;
      if (op == Reduce::Max) {
        result = x[base];
        for (std::size_t l = 1; l < split.length; ++l) {
          const float v = x[base + l * split.inner];
          if (v > result || std::isnan(v)) result = v;
          if (std::isnan(result)) break;
        }
      } else {
        Accumulator acc{d};
        for (std::size_t l = 0; l < split.length; ++l) acc.add(x[base + l * split.inner]);
        result = acc.value;
        if (op == Reduce::Mean) {
          result = round_to(result / static_cast<float>(split.length), d);
        }
      }
      out[o * split.inner + i] = result;
    }
  }
  return Tensor::from_quantized(std::move(out_shape), d, std::move(out));
}

inline Tensor sum_to_kernel(const Tensor& t, const Shape& shape) {
  // Validates that `shape` broadcasts to t's shape.
  if (broadcast_shapes(shape, t.shape()) != t.shape()) {
    throw ShapeError("sum_to: " + to_string(shape) + " does not broadcast to " +
                     to_string(t.shape()));
  }
  const DType d = t.dtype();
  std::vector<float> out(numel(shape), 0.0f);
  const auto x = t.data();
  const auto target_strides = broadcast_strides(shape, t.shape());
  const std::vector<std::size_t> unit(t.rank(), 0);
  for_each_broadcast(t.shape(), target_strides, unit,
                     [&](std::size_t n, std::size_t io, std::size_t) {
                       out[io] = round_to(out[io] + x[n], d);
                     });
  return Tensor::from_quantized(shape, d, std::move(out));
}

inline Tensor broadcast_kernel(const Tensor& t, const Shape& shape) {
  if (broadcast_shapes(t.shape(), shape) != shape) {
    throw ShapeError("broadcast_to: " + to_string(t.shape()) + " does not broadcast to " +
                     to_string(shape));
  }
  std::vector<float> out(numel(shape));
  const auto x = t.data();
  const std::vector<std::size_t> unit(shape.size(), 0);
  for_each_broadcast(shape, broadcast_strides(t.shape(), shape), unit,
                     [&](std::size_t n, std::size_t ia, std::size_t) { out[n] = x[ia]; });
  return Tensor::from_quantized(shape, t.dtype(), std::move(out));
}

inline Tensor matmul_kernel(const Tensor& a, const Tensor& b) {
  const DType d = promote(a.dtype(), b.dtype());
  require_float(d, "matmul");
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  }
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t kb = b.shape()[b.rank() - 2];
  const std::size_t n = b.shape()[b.rank() - 1];
  const Shape batch(a.shape().begin(), a.shape().end() - 2);
  const bool shared_rhs = b.rank() == 2;
  if (k != kb || (!shared_rhs && Shape(b.shape().begin(), b.shape().end() - 2) != batch)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t batches = numel(batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<float> out(batches * m * n);
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t p = 0; p < batches; ++p) {
    const float* lhs = x.data() + p * m * k;
    const float* rhs = y.data() + (shared_rhs ? 0 : p * k * n);
    float* dst = out.data() + p * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        Accumulator acc{d};
        for (std::size_t l = 0; l < k; ++l) acc.add(round_to(lhs[i * k + l] * rhs[l * n + j], d));
        dst[i * n + j] = acc.value;
      }
    }
  }
  return Tensor::from_quantized(std::move(out_shape), d, std::move(out));
}

inline Tensor softmax_kernel(const Tensor& a, std::size_t axis) {
  require_float(a.dtype(), "softmax");
  const DType d = a.dtype();
  const auto split = split_at(a.shape(), axis);
  const auto x = a.data();
  std::vector<float> out(x.size());
  std::vector<float> e(split.length);
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t i = 0; i < split.inner; ++i) {
      const std::size_t base = o * split.length * split.inner + i;
      float peak = -INFINITY;
      for (std::size_t l = 0; l < split.length; ++l) peak = std::max(peak, x[base + l * split.inner]);
      Accumulator total{d};
      for (std::size_t l = 0; l < split.length; ++l) {
        e[l] = round_to(std::exp(round_to(x[base + l * split.inner] - peak, d)), d);
        total.add(e[l]);
      }
      for (std::size_t l = 0; l < split.length; ++l) {
        out[base + l * split.inner] = round_to(e[l] / total.value, d);
      }
    }
  }
  return Tensor::from_quantized(a.shape(), d, std::move(out));
}

inline Tensor layernorm_kernel(const Tensor& a, const Tensor& gain, const Tensor& bias) {
  const DType d = promote(promote(a.dtype(), gain.dtype()), bias.dtype());
  require_float(d, "layernorm");
  if (a.rank() == 0 || a.shape().back() == 0) {
    throw ShapeError("layernorm: needs a non-empty last axis, got " + to_string(a.shape()));
  }
  const std::size_t n = a.shape().back();
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
    throw ShapeError("layernorm: gain " + to_string(gain.shape()) + " and bias " +
                     to_string(bias.shape()) + " must both be [" + std::to_string(n) + "]");
  }
  const auto x = a.data();
  const auto g = gain.data();
  const auto b = bias.data();
  const auto count = static_cast<float>(n);
  std::vector<float> out(x.size());
  std::vector<float> diff(n);
  for (std::size_t row = 0; row < x.size() / n; ++row) {
    const float* xs = x.data() + row * n;
    Accumulator sum{d};
    for (std::size_t i = 0; i < n; ++i) sum.add(xs[i]);
    const float mean = round_to(sum.value / count, d);
    Accumulator sq{d};
    for (std::size_t i = 0; i < n; ++i) {
      diff[i] = round_to(xs[i] - mean, d);
      sq.add(round_to(diff[i] * diff[i], d));
    }
    const float var = round_to(sq.value / count, d);
    const float denom = round_to(std::sqrt(round_to(var + kLayerNormEps, d)), d);
    for (std::size_t i = 0; i < n; ++i) {
      const float normed = round_to(diff[i] / denom, d);
      out[row * n + i] = round_to(round_to(normed * g[i], d) + b[i], d);
    }
  }
  return Tensor::from_quantized(a.shape(), d, std::move(out));
}

inline void check_labels(const Tensor& logits, const Tensor& labels) {
  require_float(logits.dtype(), "cross_entropy");
  if (labels.dtype() != DType::I32) {
    throw ContractViolation("cross_entropy: labels must be i32");
  }
  if (logits.rank() != 2 || labels.shape() != Shape{logits.shape()[0]}) {
    throw ShapeError("cross_entropy: expected logits [B,C] and labels [B], got " +
                     to_string(logits.shape()) + " and " + to_string(labels.shape()));
  }
  const auto classes = static_cast<float>(logits.shape()[1]);
  for (float label : labels.data()) {
    if (label < 0.0f || label >= classes) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(label) +
                              " outside [0, " + std::to_string(logits.shape()[1]) + ")");
    }
  }
}

inline Tensor cross_entropy_kernel(const Tensor& logits, const Tensor& labels) {
  check_labels(logits, labels);
  const DType d = logits.dtype();
  const std::size_t rows = logits.shape()[0];
  const std::size_t classes = logits.shape()[1];
  if (rows == 0 || classes == 0) {
    throw ShapeError("cross_entropy: empty batch or class axis");
  }
  const auto x = logits.data();
  const auto y = labels.data();
  Accumulator total{d};
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = x.data() + r * classes;
    const float peak = *std::max_element(row, row + classes);
    Accumulator sum{d};
    for (std::size_t c = 0; c < classes; ++c) sum.add(round_to(std::exp(round_to(row[c] - peak, d)), d));
    const float lse = round_to(peak + round_to(std::log(sum.value), d), d);
    total.add(round_to(lse - row[static_cast<std::size_t>(y[r])], d));
  }
  const float loss = round_to(total.value / static_cast<float>(rows), d);
  return Tensor::from_quantized(Shape{}, d, std::vector<float>{loss});
}

}  // namespace detail

inline Tensor elementwise(Unary op, const Tensor& a) {
  return autodiff::apply(
      detail::op_name(op), {a},
      [op](std::span<const Tensor> in) { return detail::unary_kernel(op, in[0]); },
      [op](std::span<const Tensor> in, const Tensor& out,
           const Tensor& g) -> std::vector<std::optional<Tensor>> {
        switch (op) {
          case Unary::Neg:
            return {elementwise(Unary::Neg, g)};
          case Unary::Exp:
            return {elementwise(Binary::Mul, g, out)};
          case Unary::Log:
            return {elementwise(Binary::Div, g, in[0])};
          case Unary::Relu:
            return {elementwise(Binary::Mul, g, elementwise(Unary::ReluGrad, in[0]))};
          case Unary::Gelu:
            return {elementwise(Binary::Mul, g, elementwise(Unary::GeluGrad, in[0]))};
          case Unary::Sqrt:
            return {elementwise(Binary::Div, g, elementwise(Binary::Mul, out, Scalar{2.0}))};
          case Unary::ReluGrad:
          case Unary::GeluGrad:
            break;
        }
        throw ContractViolation("higher-order differentiation is not supported");
      });
}

inline Tensor elementwise(Binary op, const Tensor& a, const Tensor& b) {
  return autodiff::apply(
      detail::op_name(op), {a, b},
      [op](std::span<const Tensor> in) { return detail::binary_kernel(op, in[0], in[1]); },
      [op](std::span<const Tensor> in, const Tensor& out,
           const Tensor& g) -> std::vector<std::optional<Tensor>> {
        const Tensor& x = in[0];
        const Tensor& y = in[1];
        switch (op) {
          case Binary::Add:
            return {sum_to(g, x.shape()), sum_to(g, y.shape())};
          case Binary::Sub:
            return {sum_to(g, x.shape()), sum_to(elementwise(Unary::Neg, g), y.shape())};
          case Binary::Mul:
            return {sum_to(elementwise(Binary::Mul, g, y), x.shape()),
                    sum_to(elementwise(Binary::Mul, g, x), y.shape())};
          case Binary::Div: {
            const Tensor gy = elementwise(Binary::Div, g, y);
            return {sum_to(gy, x.shape()),
                    sum_to(elementwise(Unary::Neg, elementwise(Binary::Mul, gy, out)), y.shape())};
          }
        }
        return {std::nullopt, std::nullopt};
      });
}

namespace detail {
inline Tensor scalar_op(Binary op, const Tensor& a, const Scalar& s, bool scalar_left) {
  return autodiff::apply(
      std::string(op_name(op)) + "_scalar", {a},
      [op, s, scalar_left](std::span<const Tensor> in) {
        return scalar_kernel(op, in[0], s, scalar_left);
      },
      [op, s, scalar_left](std::span<const Tensor> in, const Tensor& out,
                           const Tensor& g) -> std::vector<std::optional<Tensor>> {
        const Scalar c{scalar_operand(s), true, DType::F32};
        switch (op) {
          case Binary::Add:
            return {g};
          case Binary::Sub:
            return {scalar_left ? elementwise(Unary::Neg, g) : g};
          case Binary::Mul:
            return {elementwise(Binary::Mul, g, c)};
          case Binary::Div:
            if (!scalar_left) return {elementwise(Binary::Div, g, c)};
            return {elementwise(Unary::Neg,
                                elementwise(Binary::Div, elementwise(Binary::Mul, g, out), in[0]))};
        }
        return {std::nullopt};
      });
}
}  // namespace detail

inline Tensor elementwise(Binary op, const Tensor& a, const Scalar& s) {
  return detail::scalar_op(op, a, s, false);
}

inline Tensor elementwise(Binary op, const Scalar& s, const Tensor& a) {
  return detail::scalar_op(op, a, s, true);
}

/// Re-rounds a tensor into another dtype. Casting to the current dtype is a
/// no-op and records nothing. The cotangent flows back in the source dtype.
inline Tensor cast(const Tensor& t, DType dtype) {
  if (t.dtype() == dtype) return t;
  if (!is_float(dtype)) {
    throw ContractViolation("cast: casting to integer dtypes is not supported");
  }
  return autodiff::apply(
      "cast", {t},
      [dtype](std::span<const Tensor> in) {
        return Tensor(in[0].shape(), dtype, std::vector<float>(in[0].data().begin(), in[0].data().end()));
      },
      [](std::span<const Tensor>, const Tensor&, const Tensor& g)
          -> std::vector<std::optional<Tensor>> { return {g}; });
}

inline Tensor reshape(const Tensor& t, Shape shape) {
  if (numel(shape) != t.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(t.shape()) + " as " + to_string(shape));
  }
  return autodiff::apply(
      "reshape", {t},
      [shape](std::span<const Tensor> in) {
        return Tensor::from_quantized(shape, in[0].dtype(),
                                      std::vector<float>(in[0].data().begin(), in[0].data().end()));
      },
      [](std::span<const Tensor> in, const Tensor&, const Tensor& g)
          -> std::vector<std::optional<Tensor>> { return {reshape(g, in[0].shape())}; });
}

inline Tensor transpose(const Tensor& t, std::vector<std::size_t> perm) {
  if (perm.size() != t.rank()) {
    throw ShapeError("transpose: permutation rank does not match " + to_string(t.shape()));
  }
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || seen[p]) throw ShapeError("transpose: invalid permutation");
    seen[p] = true;
  }
  return autodiff::apply(
      "transpose", {t},
      [perm](std::span<const Tensor> in) {
        const Tensor& x = in[0];
        Shape out_shape(perm.size());
        const auto src_strides = detail::strides_of(x.shape());
        std::vector<std::size_t> strides(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i) {
          out_shape[i] = x.shape()[perm[i]];
          strides[i] = src_strides[perm[i]];
        }
        std::vector<float> out(x.numel());
        const auto values = x.data();
        const std::vector<std::size_t> unit(perm.size(), 0);
        detail::for_each_broadcast(out_shape, strides, unit,
                                   [&](std::size_t n, std::size_t is, std::size_t) {
                                     out[n] = values[is];
                                   });
        return Tensor::from_quantized(std::move(out_shape), x.dtype(), std::move(out));
      },
      [perm](std::span<const Tensor>, const Tensor&, const Tensor& g)
          -> std::vector<std::optional<Tensor>> {
        std::vector<std::size_t> inverse(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
        return {transpose(g, inverse)};
      });
}

inline Tensor broadcast_to(const Tensor& t, const Shape& shape) {
  if (t.shape() == shape) return t;
  return autodiff::apply(
      "broadcast_to", {t},
      [shape](std::span<const Tensor> in) { return detail::broadcast_kernel(in[0], shape); },
      [](std::span<const Tensor> in, const Tensor&, const Tensor& g)
          -> std::vector<std::optional<Tensor>> { return {sum_to(g, in[0].shape())}; });
}

/// Sums a broadcast result back down to `shape` (the adjoint of broadcast_to).
inline Tensor sum_to(const Tensor& t, const Shape& shape) {
  if (t.shape() == shape) return t;
  return autodiff::apply(
      "sum_to", {t},
      [shape](std::span<const Tensor> in) { return detail::sum_to_kernel(in[0], shape); },
      [](std::span<const Tensor> in, const Tensor&, const Tensor& g)
          -> std::vector<std::optional<Tensor>> { return {broadcast_to(g, in[0].shape())}; });
}

/// Matrix product over the last two axes. `b` is either a single matrix
/// shared across a's leading axes, or has exactly a's leading axes.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  return autodiff::apply(
      "matmul", {a, b},
      [](std::span<const Tensor> in) { return detail::matmul_kernel(in[0], in[1]); },
      [](std::span<const Tensor> in, const Tensor&,
         const Tensor& g) -> std::vector<std::optional<Tensor>> {
        const Tensor& x = in[0];
        const Tensor& y = in[1];
        Tensor dx = matmul(g, detail::transpose_last(y));
        Tensor dy;
        if (y.rank() == 2 && x.rank() > 2) {
          const std::size_t k = x.shape().back();
          const std::size_t n = g.shape().back();
          const std::size_t rows = x.numel() / k;
          dy = matmul(detail::transpose_last(reshape(x, {rows, k})), reshape(g, {rows, n}));
        } else {
          dy = matmul(detail::transpose_last(x), g);
        }
        return {dx, dy};
      });
}

inline Tensor reduce(Reduce op, const Tensor& a, std::optional<int> axis, bool keepdims) {
  std::optional<std::size_t> ax;
  if (axis) ax = detail::normalize_axis(*axis, a.rank(), "reduce");
  return autodiff::apply(
      op == Reduce::Sum ? "sum" : op == Reduce::Mean ? "mean" : "max", {a},
      [op, ax, keepdims](std::span<const Tensor> in) {
        return detail::reduce_kernel(op, in[0], ax, keepdims);
      },
      [op, ax](std::span<const Tensor> in, const Tensor& out,
               const Tensor& g) -> std::vector<std::optional<Tensor>> {
        const Tensor& x = in[0];
        Shape kept = x.shape();
        if (ax) {
          kept[*ax] = 1;
        } else {
          std::fill(kept.begin(), kept.end(), 1);
        }
        const Tensor gk = reshape(g, kept);
        if (op == Reduce::Sum) return {broadcast_to(gk, x.shape())};
        if (op == Reduce::Mean) {
          const std::size_t count = ax ? x.shape()[*ax] : x.numel();
          return {elementwise(Binary::Div, broadcast_to(gk, x.shape()),
                              Scalar{static_cast<double>(count)})};
        }
        // Max: route the cotangent to the first maximal element of each slice.
        const auto split = ax ? detail::split_at(x.shape(), *ax)
                              : detail::AxisSplit{1, x.numel(), 1};
        std::vector<float> routed(x.numel(), 0.0f);
        const auto xs = x.data();
        const auto peaks = out.data();
        const auto gs = gk.data();
        for (std::size_t o = 0; o < split.outer; ++o) {
          for (std::size_t i = 0; i < split.inner; ++i) {
            const std::size_t slot = o * split.inner + i;
            for (std::size_t l = 0; l < split.length; ++l) {
              const std::size_t at = o * split.length * split.inner + l * split.inner + i;
              if (xs[at] == peaks[slot]) {
                routed[at] = gs[slot];
                break;
              }
            }
          }
        }
        return {Tensor::from_quantized(x.shape(), g.dtype(), std::move(routed))};
      });
}

inline Tensor sum(const Tensor& a, std::optional<int> axis = std::nullopt, bool keepdims = false) {
  return reduce(Reduce::Sum, a, axis, keepdims);
}
inline Tensor mean(const Tensor& a, std::optional<int> axis = std::nullopt, bool keepdims = false) {
  return reduce(Reduce::Mean, a, axis, keepdims);
}
inline Tensor max(const Tensor& a, std::optional<int> axis = std::nullopt, bool keepdims = false) {
  return reduce(Reduce::Max, a, axis, keepdims);
}

/// Numerically stabilized softmax along `axis`, computed in the input dtype.
inline Tensor softmax(const Tensor& a, int axis) {
  const std::size_t ax = detail::normalize_axis(axis, a.rank(), "softmax");
  return autodiff::apply(
      "softmax", {a},
      [ax](std::span<const Tensor> in) { return detail::softmax_kernel(in[0], ax); },
      [ax](std::span<const Tensor>, const Tensor& y,
           const Tensor& g) -> std::vector<std::optional<Tensor>> {
        const int axis = static_cast<int>(ax);
        const Tensor dot = sum(elementwise(Binary::Mul, g, y), axis, true);
        return {elementwise(Binary::Mul, y, elementwise(Binary::Sub, g, dot))};
      });
}

/// Normalizes over the last axis: (a - mean) / sqrt(var + 1e-5) * gain + bias.
inline Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias) {
  return autodiff::apply(
      "layernorm", {a, gain, bias},
      [](std::span<const Tensor> in) { return detail::layernorm_kernel(in[0], in[1], in[2]); },
      [](std::span<const Tensor> in, const Tensor&,
         const Tensor& g) -> std::vector<std::optional<Tensor>> {
        const Tensor& x = in[0];
        const Tensor& gain = in[1];
        const Tensor& bias = in[2];
        const Tensor centered = elementwise(Binary::Sub, x, mean(x, -1, true));
        const Tensor var = mean(elementwise(Binary::Mul, centered, centered), -1, true);
        const Tensor denom = elementwise(
            Unary::Sqrt, elementwise(Binary::Add, var, Scalar{static_cast<double>(kLayerNormEps)}));
        const Tensor normed = elementwise(Binary::Div, centered, denom);
        const Tensor gn = elementwise(Binary::Mul, g, gain);
        const Tensor proj = elementwise(Binary::Mul, normed, mean(elementwise(Binary::Mul, gn, normed), -1, true));
        const Tensor dx = elementwise(
            Binary::Div,
            elementwise(Binary::Sub, elementwise(Binary::Sub, gn, mean(gn, -1, true)), proj), denom);
        return {dx, sum_to(elementwise(Binary::Mul, g, normed), gain.shape()),
                sum_to(g, bias.shape())};
      });
}

/// Mean negative log-likelihood of integer labels under softmax(logits),
/// evaluated with a stabilized log-sum-exp in the logits' dtype.
inline Tensor cross_entropy(const Tensor& logits, const Tensor& labels) {
  return autodiff::apply(
      "cross_entropy", {logits, labels},
      [](std::span<const Tensor> in) { return detail::cross_entropy_kernel(in[0], in[1]); },
      [](std::span<const Tensor> in, const Tensor&,
         const Tensor& g) -> std::vector<std::optional<Tensor>> {
        const Tensor& x = in[0];
        const std::size_t rows = x.shape()[0];
        const std::size_t classes = x.shape()[1];
        std::vector<float> hot(x.numel(), 0.0f);
        const auto labels = in[1].data();
        for (std::size_t r = 0; r < rows; ++r) {
          hot[r * classes + static_cast<std::size_t>(labels[r])] = 1.0f;
        }
        const Tensor onehot = Tensor::from_quantized(x.shape(), x.dtype(), std::move(hot));
        const Tensor diff = elementwise(Binary::Sub, softmax(x, -1), onehot);
        const Tensor scaled = elementwise(Binary::Mul, diff, g);
        return {elementwise(Binary::Div, scaled, Scalar{static_cast<double>(rows)}), std::nullopt};
      });
}

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(Binary::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(Binary::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(Binary::Mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return elementwise(Binary::Div, a, b); }
inline Tensor neg(const Tensor& a) { return elementwise(Unary::Neg, a); }
inline Tensor exp(const Tensor& a) { return elementwise(Unary::Exp, a); }
inline Tensor log(const Tensor& a) { return elementwise(Unary::Log, a); }
inline Tensor relu(const Tensor& a) { return elementwise(Unary::Relu, a); }
inline Tensor gelu(const Tensor& a) { return elementwise(Unary::Gelu, a); }
inline Tensor sqrt(const Tensor& a) { return elementwise(Unary::Sqrt, a); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Plain doubles act as weak scalars.
inline Tensor operator+(const Tensor& a, double s) { return elementwise(Binary::Add, a, Scalar{s}); }
inline Tensor operator-(const Tensor& a, double s) { return elementwise(Binary::Sub, a, Scalar{s}); }
inline Tensor operator*(const Tensor& a, double s) { return elementwise(Binary::Mul, a, Scalar{s}); }
inline Tensor operator/(const Tensor& a, double s) { return elementwise(Binary::Div, a, Scalar{s}); }
inline Tensor operator+(double s, const Tensor& a) { return elementwise(Binary::Add, Scalar{s}, a); }
inline Tensor operator-(double s, const Tensor& a) { return elementwise(Binary::Sub, Scalar{s}, a); }
inline Tensor operator*(double s, const Tensor& a) { return elementwise(Binary::Mul, Scalar{s}, a); }
inline Tensor operator/(double s, const Tensor& a) { return elementwise(Binary::Div, Scalar{s}, a); }

}  // namespace mixprec

namespace mixprec::autodiff {

inline std::vector<Tensor> Tape::replay(std::span<const Tensor> leaf_values) const {
  RecordingScope paused(nullptr);
  std::vector<Tensor> values(nodes_.size());
  std::size_t next_leaf = 0;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& node = nodes_[i];
    if (node.is_leaf()) {
      if (next_leaf >= leaf_values.size()) {
        throw std::invalid_argument("Tape::replay: too few leaf values");
      }
      values[i] = leaf_values[next_leaf++].detached();
      continue;
    }
    std::vector<Tensor> inputs(node.inputs.size());
    for (std::size_t j = 0; j < inputs.size(); ++j) {
      inputs[j] = node.sources[j] ? values[*node.sources[j]] : node.inputs[j];
    }
    values[i] = node.kernel(inputs);
  }
  return values;
}

inline std::vector<std::optional<Tensor>> Tape::backward(std::size_t root,
                                                         const Tensor& seed) const {
  RecordingScope paused(nullptr);
  std::vector<std::optional<Tensor>> cotangents(nodes_.size());
  cotangents.at(root) = seed.detached();
  for (std::size_t i = root + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (node.is_leaf() || !cotangents[i]) continue;
    auto contributions = node.vjp(node.inputs, node.output, *cotangents[i]);
    for (std::size_t j = 0; j < node.sources.size(); ++j) {
      if (!node.sources[j] || j >= contributions.size() || !contributions[j]) continue;
      const Tensor& input = node.inputs[j];
      if (!is_float(input.dtype())) continue;
      Tensor contribution = cast(*contributions[j], input.dtype());
      if (contribution.shape() != input.shape()) {
        throw ShapeError("backward: " + node.op + " produced a cotangent of shape " +
                         to_string(contribution.shape()) + " for an input of shape " +
                         to_string(input.shape()));
      }
      auto& slot = cotangents[*node.sources[j]];
      slot = slot ? add(*slot, contribution) : std::move(contribution);
    }
    if (i != root) cotangents[i].reset();
  }
  return cotangents;
}

}  // namespace mixprec::autodiff
