#pragma once

#include <memory>
#include <optional>
#include <type_traits>
#include <utility>
#include <variant>

#include "mixprec/ops.hpp"
#include "mixprec/tape.hpp"
#include "mixprec/tree.hpp"

namespace mixprec {

/// Return type for differentiated functions that also produce auxiliary data.
struct WithAux {
  Tensor loss;
  Tree aux;
};

namespace autodiff {

/// A function evaluated with its float parameters registered on a tape.
struct Trace {
  std::unique_ptr<Tape> tape;
  Tree params;  // params with float tensor leaves tracked by `tape`
  Tensor loss;
  std::optional<Tree> aux;
};

template <class F>
Trace trace(F&& f, const Tree& params, const Tree& args) {
  Trace out;
  out.tape = std::make_unique<Tape>();
  Tape& tape = *out.tape;
  out.params = map_tensors(
      [&tape](const Tensor& t) { return is_float(t.dtype()) ? tape.add_leaf(t) : t; }, params);
  RecordingScope recording(&tape);
  using Result = std::invoke_result_t<F&, const Tree&, const Tree&>;
  if constexpr (std::is_same_v<std::decay_t<Result>, WithAux>) {
    WithAux result = f(out.params, args);
    out.loss = std::move(result.loss);
    out.aux = map_tensors([](const Tensor& t) { return t.detached(); }, result.aux);
  } else {
    static_assert(std::is_convertible_v<Result, Tensor>,
                  "differentiated functions return a Tensor or WithAux");
    out.loss = f(out.params, args);
  }
  return out;
}

}  // namespace autodiff

struct ValueAndGrad {
  Tensor value;
  Tree grads;  // same structure as params; None where a leaf is not differentiable
  std::optional<Tree> aux;
  std::size_t activation_bytes = 0;  // analytic bytes of recorded intermediates
};

/// Reverse-mode value and gradient of `f(params, args)` with respect to the
/// float tensor leaves of `params`. `f` must return a scalar float tensor,
/// or WithAux carrying one.
///
/// Backward rules run through the same quantizing primitives as the forward
/// pass, so cotangents are rounded to the dtype of the value they belong to.
template <class F>
ValueAndGrad value_and_grad(F&& f, const Tree& params, const Tree& args) {
  autodiff::Trace traced = autodiff::trace(std::forward<F>(f), params, args);
  const Tensor& loss = traced.loss;
  if (loss.rank() != 0 || !is_float(loss.dtype())) {
    throw ShapeError("value_and_grad: function must return a scalar float tensor, got " +
                     std::string(name(loss.dtype())) + to_string(loss.shape()));
  }
  const autodiff::Tape& tape = *traced.tape;
  std::vector<std::optional<Tensor>> cotangents;
  if (tape.tracks(loss)) {
    cotangents = tape.backward(loss.tape_ref().node, Tensor::scalar(1.0f, loss.dtype()));
  }

  ValueAndGrad out;
  out.value = loss.detached();
  out.aux = std::move(traced.aux);
  out.activation_bytes = tape.activation_bytes();
  out.grads = tree_map(
      [&](const Leaf& leaf) -> Leaf {
        const auto* t = std::get_if<Tensor>(&leaf);
        if (t == nullptr || !is_float(t->dtype())) return None{};
        const std::size_t node = t->tape_ref().node;
        if (node < cotangents.size() && cotangents[node]) return cotangents[node]->detached();
        return Tensor::zeros(t->shape(), t->dtype());
      },
      traced.params);
  return out;
}

}  // namespace mixprec
