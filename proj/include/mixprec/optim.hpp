#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>

#include "mixprec/ops.hpp"
#include "mixprec/precision.hpp"
#include "mixprec/tree.hpp"

namespace mixprec {

enum class OptimizerKind { Sgd, Adam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Sgd;
  float learning_rate = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
  std::int64_t step_count = 0;
  TreeStructure params_structure{Tree::mapping()};
  std::optional<Tree> first_moment;   // Adam only; f32 leaves
  std::optional<Tree> second_moment;  // Adam only; f32 leaves
};

inline bool bitwise_equal(const OptimizerState& a, const OptimizerState& b) {
  auto same_tree = [](const std::optional<Tree>& x, const std::optional<Tree>& y) {
    return x.has_value() == y.has_value() && (!x || bitwise_equal(*x, *y));
  };
  return a.kind == b.kind && a.learning_rate == b.learning_rate && a.beta1 == b.beta1 &&
         a.beta2 == b.beta2 && a.epsilon == b.epsilon && a.step_count == b.step_count &&
         a.params_structure == b.params_structure && same_tree(a.first_moment, b.first_moment) &&
         same_tree(a.second_moment, b.second_moment);
}

namespace detail {

inline void require_float_leaf(const Tree& params, const char* who) {
  if (float_leaves(params).empty()) {
    throw ContractViolation(std::string(who) + ": params contain no float tensor leaves");
  }
}

inline Tree zero_moments(const Tree& params) {
  return tree_map(
      [](const Leaf& leaf) -> Leaf {
        const auto* t = std::get_if<Tensor>(&leaf);
        if (t == nullptr || !is_float(t->dtype())) return None{};
        return Tensor::zeros(t->shape(), DType::F32);
      },
      params);
}

inline void require_structure(const OptimizerState& state, const Tree& tree, const char* who) {
  if (structure(tree) != state.params_structure) {
    throw TreeError("", std::string(who) + ": tree structure does not match the optimizer's params");
  }
}

}  // namespace detail

inline OptimizerState sgd_init(const Tree& params, float learning_rate) {
  detail::require_float_leaf(params, "sgd_init");
  OptimizerState state;
  state.kind = OptimizerKind::Sgd;
  state.learning_rate = learning_rate;
  state.params_structure = structure(params);
  return state;
}

inline OptimizerState adam_init(const Tree& params, float learning_rate, float beta1 = 0.9f,
                                float beta2 = 0.999f, float epsilon = 1e-8f) {
  detail::require_float_leaf(params, "adam_init");
  OptimizerState state;
  state.kind = OptimizerKind::Adam;
  state.learning_rate = learning_rate;
  state.beta1 = beta1;
  state.beta2 = beta2;
  state.epsilon = epsilon;
  state.params_structure = structure(params);
  state.first_moment = detail::zero_moments(params);
  state.second_moment = detail::zero_moments(params);
  return state;
}

/// Turns f32 gradients into f32 parameter updates and the advanced state.
inline std::pair<Tree, OptimizerState> compute_updates(const OptimizerState& state,
                                                       const Tree& grads) {
  detail::require_structure(state, grads, "compute_updates");
  OptimizerState next = state;
  next.step_count = state.step_count + 1;
  const double lr = state.learning_rate;

  if (state.kind == OptimizerKind::Sgd) {
    Tree updates = map_tensors(
        [lr](const Tensor& g) { return elementwise(Binary::Mul, cast(g, DType::F32), Scalar{-lr}); },
        grads);
    return {std::move(updates), std::move(next)};
  }

  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double eps = state.epsilon;
  const auto t = static_cast<double>(next.step_count);
  const double correction1 = 1.0 - std::pow(b1, t);
  const double correction2 = 1.0 - std::pow(b2, t);

  auto moment = [](double decay, bool squared) {
    return [decay, squared](const Leaf& m, const Leaf& g) -> Leaf {
      const auto* mt = std::get_if<Tensor>(&m);
      const auto* gt = std::get_if<Tensor>(&g);
      if (mt == nullptr || gt == nullptr) return m;
      const Tensor grad = cast(*gt, DType::F32);
      const Tensor term = squared ? grad * grad : grad;
      return (*mt) * decay + term * (1.0 - decay);
    };
  };
  Tree first = tree_zip_map(moment(b1, false), *state.first_moment, grads);
  Tree second = tree_zip_map(moment(b2, true), *state.second_moment, grads);
  Tree updates = tree_zip_map(
      [&](const Leaf& m, const Leaf& v) -> Leaf {
        const auto* mt = std::get_if<Tensor>(&m);
        const auto* vt = std::get_if<Tensor>(&v);
        if (mt == nullptr || vt == nullptr) return None{};
        const Tensor m_hat = (*mt) / correction1;
        const Tensor v_hat = (*vt) / correction2;
        return (m_hat * -lr) / (sqrt(v_hat) + eps);
      },
      first, second);
  // Leaves without a gradient produce no update.
  updates = tree_zip_map(
      [](const Leaf& u, const Leaf& g) -> Leaf {
        return std::holds_alternative<Tensor>(g) ? u : Leaf(None{});
      },
      updates, grads);
  next.first_moment = std::move(first);
  next.second_moment = std::move(second);
  return {std::move(updates), std::move(next)};
}

/// Adds updates leafwise, rounding each result to the parameter's own dtype.
/// Leaves whose update is None are left untouched.
inline Tree apply_updates(const Tree& model, const Tree& updates) {
  return tree_zip_map(
      [](const Leaf& p, const Leaf& u) -> Leaf {
        const auto* pt = std::get_if<Tensor>(&p);
        const auto* ut = std::get_if<Tensor>(&u);
        if (pt == nullptr || ut == nullptr || !is_float(pt->dtype())) return p;
        return cast(add(*pt, *ut), pt->dtype());
      },
      model, updates);
}

/// Applies one optimizer step only when the gradients are finite; otherwise
/// returns the model and state unchanged.
inline std::pair<Tree, OptimizerState> optimizer_update(const Tree& model,
                                                        const OptimizerState& state,
                                                        const Tree& grads, bool grads_finite) {
  detail::require_structure(state, model, "optimizer_update");
  if (!grads_finite) return {model, state};
  auto [updates, next] = compute_updates(state, grads);
  return {apply_updates(model, updates), std::move(next)};
}

}  // namespace mixprec
