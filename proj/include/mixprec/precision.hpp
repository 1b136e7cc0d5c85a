#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>

#include "mixprec/autodiff.hpp"
#include "mixprec/numerics.hpp"
#include "mixprec/ops.hpp"
#include "mixprec/tree.hpp"

namespace mixprec {

// ---------------------------------------------------------------------------
// Half-precision selection

namespace detail {
inline std::atomic<DType>& half_precision_setting() noexcept {
  static std::atomic<DType> setting{DType::F16};
  return setting;
}
}  // namespace detail

/// Selects the 16-bit format used by cast_to_half_precision and by the
/// mixed-precision gradient transforms constructed afterwards.
inline void set_half_precision(DType dtype) {
  if (dtype != DType::F16 && dtype != DType::BF16) {
    throw ContractViolation("set_half_precision: expected f16 or bf16, got " +
                            std::string(name(dtype)));
  }
  detail::half_precision_setting().store(dtype);
}

inline DType half_precision() noexcept { return detail::half_precision_setting().load(); }

// ---------------------------------------------------------------------------
// Tree casting

/// Casts every float tensor leaf (and strong float scalar) to `dtype`.
/// Integer tensors, weak scalars and opaque leaves pass through untouched.
inline Tree cast_tree(const Tree& tree, DType dtype) {
  if (!is_float(dtype)) {
    throw ContractViolation("cast_tree: target dtype must be float, got " +
                            std::string(name(dtype)));
  }
  return tree_map(
      [dtype](const Leaf& leaf) -> Leaf {
        if (const auto* t = std::get_if<Tensor>(&leaf)) {
          return is_float(t->dtype()) ? cast(*t, dtype) : *t;
        }
        if (const auto* s = std::get_if<Scalar>(&leaf); s && !s->weak && is_float(s->dtype)) {
          return Scalar::strong(quantize(static_cast<float>(s->value), dtype), dtype);
        }
        return leaf;
      },
      tree);
}

inline Tree cast_to_float16(const Tree& t) { return cast_tree(t, DType::F16); }
inline Tree cast_to_bfloat16(const Tree& t) { return cast_tree(t, DType::BF16); }
inline Tree cast_to_float32(const Tree& t) { return cast_tree(t, DType::F32); }
inline Tree cast_to_half_precision(const Tree& t) { return cast_tree(t, half_precision()); }

namespace detail {

template <class T>
decltype(auto) cast_argument(T&& value, DType dtype) {
  using V = std::decay_t<T>;
  if constexpr (std::is_same_v<V, Tree>) {
    return cast_tree(value, dtype);
  } else if constexpr (std::is_same_v<V, Tensor>) {
    return is_float(value.dtype()) ? cast(value, dtype) : value;
  } else {
    return std::forward<T>(value);
  }
}

}  // namespace detail

/// Wraps `f` so that every Tensor or Tree argument is cast to `dtype` before
/// the call, and the result is cast to `return_dtype` when one is given.
/// Other arguments (axes, flags, ...) are forwarded unchanged.
template <class F>
auto cast_function(F f, DType dtype, std::optional<DType> return_dtype = std::nullopt) {
  if (!is_float(dtype) || (return_dtype && !is_float(*return_dtype))) {
    throw ContractViolation("cast_function: dtypes must be float");
  }
  return [f = std::move(f), dtype, return_dtype](auto&&... args) {
    auto out = std::invoke(f, detail::cast_argument(std::forward<decltype(args)>(args), dtype)...);
    using Out = decltype(out);
    if (return_dtype) return Out(detail::cast_argument(std::move(out), *return_dtype));
    return out;
  };
}

/// Runs `f` in full precision: inputs are cast to f32 and the result to
/// `return_dtype`. Use around overflow-prone reductions (sum, mean, softmax,
/// layernorm) inside an otherwise half-precision function.
template <class F>
auto force_full_precision(F f, DType return_dtype) {
  if (!is_float(return_dtype)) {
    throw ContractViolation("force_full_precision: return dtype must be float");
  }
  return [f = std::move(f), return_dtype](auto&&... args) {
    auto out = std::invoke(f, detail::cast_argument(std::forward<decltype(args)>(args), DType::F32)...);
    return detail::cast_argument(std::move(out), return_dtype);
  };
}

// ---------------------------------------------------------------------------
// Dynamic loss scaling

/// Dynamic loss-scaling state. A plain value: every operation returns a new
/// state instead of mutating this one.
struct LossScaling {
  float scale = 32768.0f;  // 2^15
  int growth_interval = 2000;
  float growth_factor = 2.0f;
  float backoff_factor = 0.5f;
  int steps_since_growth = 0;
  float min_scale = 1.0f;

  void validate() const {
    if (!(min_scale > 0.0f) || !std::isfinite(min_scale)) {
      throw ContractViolation("LossScaling: min_scale must be positive and finite");
    }
    if (!std::isfinite(scale) || scale < min_scale) {
      throw ContractViolation("LossScaling: scale must be finite and >= min_scale");
    }
    if (growth_interval <= 0) throw ContractViolation("LossScaling: growth_interval must be positive");
    if (!(growth_factor > 1.0f)) throw ContractViolation("LossScaling: growth_factor must exceed 1");
    if (!(backoff_factor > 0.0f && backoff_factor < 1.0f)) {
      throw ContractViolation("LossScaling: backoff_factor must lie in (0, 1)");
    }
    if (steps_since_growth < 0 || steps_since_growth >= growth_interval) {
      throw ContractViolation("LossScaling: steps_since_growth must lie in [0, growth_interval)");
    }
  }

  friend bool operator==(const LossScaling&, const LossScaling&) = default;
};

/// Multiplies a float tensor by the loss scale, keeping its dtype.
inline Tensor scale(const LossScaling& s, const Tensor& t) {
  if (!is_float(t.dtype())) return t;
  return elementwise(Binary::Mul, t, Scalar{static_cast<double>(s.scale)});
}

/// Multiplies every float tensor leaf by the loss scale, keeping its dtype.
inline Tree scale(const LossScaling& s, const Tree& t) {
  return map_tensors([&s](const Tensor& x) { return scale(s, x); }, t);
}

/// Casts a float tensor to f32 and divides it by the loss scale.
inline Tensor unscale(const LossScaling& s, const Tensor& t) {
  if (!is_float(t.dtype())) return t;
  return elementwise(Binary::Div, cast(t, DType::F32), Scalar{static_cast<double>(s.scale)});
}

inline Tree unscale(const LossScaling& s, const Tree& t) {
  return map_tensors([&s](const Tensor& x) { return unscale(s, x); }, t);
}

/// Backs off on non-finite gradients; grows after growth_interval
/// consecutive finite steps. Growth that would overflow f32 is skipped.
inline LossScaling adjust(const LossScaling& s, bool grads_finite) {
  LossScaling next = s;
  if (!grads_finite) {
    next.scale = std::max(s.scale * s.backoff_factor, s.min_scale);
    next.steps_since_growth = 0;
    return next;
  }
  if (s.steps_since_growth + 1 >= s.growth_interval) {
    const float grown = s.scale * s.growth_factor;
    if (std::isfinite(grown)) next.scale = grown;
    next.steps_since_growth = 0;
    return next;
  }
  next.steps_since_growth = s.steps_since_growth + 1;
  return next;
}

// ---------------------------------------------------------------------------
// Mixed-precision gradients

struct GradResult {
  LossScaling scaling;
  bool grads_finite = true;
  Tree grads;                   // params structure; float leaves are f32
  std::optional<Tree> aux;      // as produced by the function
  std::optional<Tensor> value;  // unscaled f32 loss (value-and-grad variant only)
  std::size_t activation_bytes = 0;
};

namespace detail {

template <class F>
GradResult mixed_grad(F& f, const LossScaling& scaling, bool use_mixed_precision, DType half,
                      const Tree& params, const Tree& args) {
  GradResult out;
  if (!use_mixed_precision) {
    ValueAndGrad vg = value_and_grad(f, params, args);
    out.scaling = scaling;
    out.grads = cast_to_float32(vg.grads);
    out.grads_finite = all_finite(out.grads);
    out.aux = std::move(vg.aux);
    out.value = cast(vg.value, DType::F32);
    out.activation_bytes = vg.activation_bytes;
    return out;
  }

  const Tree half_params = cast_tree(params, half);
  const Tree half_args = cast_tree(args, half);
  // The scaled loss lives in f32 so that a loss above max_finite / scale
  // does not overflow; the seed reaching the half graph is still the scale.
  auto scaled = [&f, &scaling](const Tree& p, const Tree& a) {
    auto result = f(p, a);
    if constexpr (std::is_same_v<std::decay_t<decltype(result)>, WithAux>) {
      return WithAux{scale(scaling, cast(result.loss, DType::F32)), std::move(result.aux)};
    } else {
      return scale(scaling, cast(Tensor(result), DType::F32));
    }
  };
  ValueAndGrad vg = value_and_grad(scaled, half_params, half_args);
  out.grads = unscale(scaling, vg.grads);
  out.grads_finite = all_finite(out.grads);
  out.scaling = adjust(scaling, out.grads_finite);
  out.aux = std::move(vg.aux);
  out.value = unscale(scaling, vg.value);
  out.activation_bytes = vg.activation_bytes;
  return out;
}

}  // namespace detail

/// Mixed-precision value and gradient of `f(params, args)`.
///
/// With mixed precision enabled, the returned callable casts params and args
/// to the half-precision format selected at construction, evaluates `f`,
/// multiplies the loss by the current scale, differentiates, unscales the
/// gradients to f32, checks them for finiteness and adjusts the scaling.
/// Without it, it is plain value_and_grad with the scaling passed through.
template <class F>
auto filter_value_and_grad(F f, LossScaling scaling, bool use_mixed_precision = true) {
  scaling.validate();
  const DType half = half_precision();
  return [f = std::move(f), scaling, use_mixed_precision, half](const Tree& params,
                                                               const Tree& args) mutable {
    return detail::mixed_grad(f, scaling, use_mixed_precision, half, params, args);
  };
}

/// filter_value_and_grad without the loss value.
template <class F>
auto filter_grad(F f, LossScaling scaling, bool use_mixed_precision = true) {
  auto inner = filter_value_and_grad(std::move(f), scaling, use_mixed_precision);
  return [inner = std::move(inner)](const Tree& params, const Tree& args) mutable {
    GradResult result = inner(params, args);
    result.value.reset();
    return result;
  };
}

}  // namespace mixprec
