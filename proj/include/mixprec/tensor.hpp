#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mixprec/numerics.hpp"

namespace mixprec {

class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace autodiff {
class Tape;
}

namespace detail {
// Identifies the tape node that produced a tensor. tape == 0 means untracked.
struct TapeRef {
  std::uint64_t tape = 0;
  std::size_t node = 0;
};
}  // namespace detail

/// Immutable n-dimensional array with a nominal dtype.
///
/// Payloads are always stored as binary32, but every value is representable
/// in the nominal dtype: constructing a tensor quantizes its values, and every
/// operation quantizes its results. I32 tensors hold integral values.
class Tensor {
public:
  Tensor() : Tensor(Shape{}, DType::F32, std::vector<float>{0.0f}) {}

  Tensor(Shape shape, DType dtype, std::vector<float> values)
      : shape_(std::move(shape)), dtype_(dtype) {
    if (values.size() != mixprec::numel(shape_)) {
      throw ShapeError("Tensor: payload has " + std::to_string(values.size()) +
                       " values but shape " + mixprec::to_string(shape_) + " needs " +
                       std::to_string(mixprec::numel(shape_)));
    }
    if (is_float(dtype_)) {
      if (dtype_ != DType::F32) {
        for (auto& v : values) v = quantize(v, dtype_);
      }
    } else {
      for (float v : values) {
        if (std::trunc(v) != v || v < -2147483648.0f || v >= 2147483648.0f) {
          throw ContractViolation("Tensor: i32 payload value " + std::to_string(v) +
                                  " is not a 32-bit integer");
        }
      }
    }
    data_ = std::make_shared<const std::vector<float>>(std::move(values));
  }

  Tensor(Shape shape, DType dtype, std::initializer_list<float> values)
      : Tensor(std::move(shape), dtype, std::vector<float>(values)) {}

  static Tensor scalar(float value, DType dtype = DType::F32) {
    return Tensor(Shape{}, dtype, std::vector<float>{value});
  }
  static Tensor full(Shape shape, float value, DType dtype = DType::F32) {
    const auto n = mixprec::numel(shape);
    return Tensor(std::move(shape), dtype, std::vector<float>(n, value));
  }
  static Tensor zeros(Shape shape, DType dtype = DType::F32) {
    return full(std::move(shape), 0.0f, dtype);
  }
  static Tensor vector(std::vector<float> values, DType dtype = DType::F32) {
    Shape shape{values.size()};
    return Tensor(std::move(shape), dtype, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_->size(); }
  DType dtype() const noexcept { return dtype_; }
  std::span<const float> data() const noexcept { return *data_; }
  float operator[](std::size_t i) const { return (*data_).at(i); }

  /// The single value of a one-element tensor.
  float item() const {
    if (numel() != 1) {
      throw ShapeError("item: tensor of shape " + mixprec::to_string(shape_) +
                       " is not a scalar");
    }
    return (*data_)[0];
  }

  bool is_tracked() const noexcept { return ref_.tape != 0; }
  /// The same value with any tape association dropped.
  Tensor detached() const {
    Tensor out = *this;
    out.ref_ = {};
    return out;
  }

  const detail::TapeRef& tape_ref() const noexcept { return ref_; }

  /// Builds a tensor from values already representable in dtype.
  static Tensor from_quantized(Shape shape, DType dtype, std::vector<float> values) {
    Tensor out;
    out.shape_ = std::move(shape);
    out.dtype_ = dtype;
    out.data_ = std::make_shared<const std::vector<float>>(std::move(values));
    return out;
  }

private:
  friend class autodiff::Tape;

  Tensor with_ref(detail::TapeRef ref) const {
    Tensor out = *this;
    out.ref_ = ref;
    return out;
  }

  Shape shape_;
  DType dtype_ = DType::F32;
  std::shared_ptr<const std::vector<float>> data_;
  detail::TapeRef ref_{};
};

/// Analytic footprint of a tensor at its nominal precision.
inline std::size_t bytes_of(const Tensor& t) noexcept {
  return t.numel() * static_cast<std::size_t>(byte_width(t.dtype()));
}

/// Same shape, same dtype and identical payload bit patterns.
inline bool bitwise_equal(const Tensor& a, const Tensor& b) noexcept {
  if (a.dtype() != b.dtype() || a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

inline bool all_finite(const Tensor& t) noexcept {
  if (!is_float(t.dtype())) return true;
  for (float v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

inline std::string to_string(const Tensor& t) {
  std::ostringstream out;
  out.precision(9);
  out << name(t.dtype()) << mixprec::to_string(t.shape()) << "(";
  const auto values = t.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out << ", ";
    out << values[i];
  }
  out << ")";
  return out.str();
}

}  // namespace mixprec
