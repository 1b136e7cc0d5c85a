#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mixprec {

/// Raised when a caller breaks an operation's precondition (for example,
/// asking to quantize into an integer format).
class ContractViolation : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

enum class DType : std::uint8_t { F16, BF16, F32, I32 };

constexpr int byte_width(DType d) noexcept {
  switch (d) {
    case DType::F16:
    case DType::BF16:
      return 2;
    case DType::F32:
    case DType::I32:
      return 4;
  }
  return 0;
}

constexpr bool is_float(DType d) noexcept { return d != DType::I32; }

constexpr std::string_view name(DType d) noexcept {
  switch (d) {
    case DType::F16:
      return "f16";
    case DType::BF16:
      return "bf16";
    case DType::F32:
      return "f32";
    case DType::I32:
      return "i32";
  }
  return "?";
}

/// A literal constant. Weak scalars sit below every dtype in the promotion
/// lattice and therefore never raise an operation's precision; strong ones
/// carry an explicit dtype and promote like a tensor of that dtype.
struct Scalar {
  double value = 0.0;
  bool weak = true;
  DType dtype = DType::F32;

  static constexpr Scalar weak_value(double v) noexcept { return {v, true, DType::F32}; }
  static constexpr Scalar strong(double v, DType d) noexcept { return {v, false, d}; }

  friend bool operator==(const Scalar&, const Scalar&) = default;
};

namespace detail {

inline float quantize_f16(float value) noexcept {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
  const std::uint32_t sign = bits & 0x80000000u;
  std::uint32_t mag = bits & 0x7FFFFFFFu;

  if (mag >= 0x7F800000u) {  // inf or NaN
    return value;
  }
  // 65520 is the midpoint between 65504 and the (unrepresentable) 65536.
  if (mag >= 0x477FF000u) {
    return std::bit_cast<float>(sign | 0x7F800000u);
  }
  if (mag >= 0x38800000u) {
    // Normal binary16 range: drop 13 mantissa bits, ties to even.
    const std::uint32_t lsb = (mag >> 13) & 1u;
    mag += 0x0FFFu + lsb;
    mag &= ~0x1FFFu;
    return std::bit_cast<float>(sign | mag);
  }
  // Subnormal binary16 range: quantum is 2^-24. Scaling by 2^24 is exact.
  const float scaled = std::bit_cast<float>(mag) * 16777216.0f;
  float whole = std::floor(scaled);
  const float frac = scaled - whole;
  if (frac > 0.5f || (frac == 0.5f && std::fmod(whole, 2.0f) != 0.0f)) {
    whole += 1.0f;
  }
  const float rounded = whole * 5.9604644775390625e-08f;
  return std::bit_cast<float>(sign | std::bit_cast<std::uint32_t>(rounded));
}

inline float quantize_bf16(float value) noexcept {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
  if ((bits & 0x7FFFFFFFu) > 0x7F800000u) {
    return std::bit_cast<float>(bits | 0x00400000u);
  }
  const std::uint32_t lsb = (bits >> 16) & 1u;
  bits += 0x7FFFu + lsb;
  bits &= 0xFFFF0000u;
  return std::bit_cast<float>(bits);
}

}  // namespace detail

/// Rounds a binary32 value to the nearest value representable in `target`
/// (round-to-nearest, ties to even, with subnormals and IEEE overflow to inf).
/// The result is returned widened back to binary32.
inline float quantize(float value, DType target) {
  switch (target) {
    case DType::F16:
      return detail::quantize_f16(value);
    case DType::BF16:
      return detail::quantize_bf16(value);
    case DType::F32:
      return value;
    case DType::I32:
      break;
  }
  throw ContractViolation("quantize: integer dtypes are never quantized");
}

/// Largest finite value of a float dtype.
inline float max_finite(DType d) {
  switch (d) {
    case DType::F16:
      return 65504.0f;
    case DType::BF16:
      return std::bit_cast<float>(0x7F7F0000u);
    case DType::F32:
      return std::numeric_limits<float>::max();
    case DType::I32:
      break;
  }
  throw ContractViolation("max_finite: not a float dtype");
}

/// Distance between `x` and the next representable magnitude of dtype `d`.
inline float ulp(float x, DType d) {
  if (!is_float(d)) {
    throw ContractViolation("ulp: not a float dtype");
  }
  const int mantissa_bits = d == DType::F16 ? 10 : d == DType::BF16 ? 7 : 23;
  const int min_exp = d == DType::F16 ? -14 : -126;
  int e = 0;
  std::frexp(std::fabs(x), &e);
  const int exp = x == 0.0f ? min_exp : std::max(e - 1, min_exp);
  return std::ldexp(1.0f, exp - mantissa_bits);
}

/// Join in the promotion lattice  I32 < {F16, BF16} < F32.
constexpr DType promote(DType a, DType b) noexcept {
  if (a == b) return a;
  if (a == DType::I32) return b;
  if (b == DType::I32) return a;
  // Two distinct float formats: either one of them is F32, or they are the
  // two incomparable half formats whose common parent is F32.
  return DType::F32;
}

constexpr DType promote_with_scalar(DType t, const Scalar& s) noexcept {
  return s.weak ? t : promote(t, s.dtype);
}

}  // namespace mixprec
