#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "mixprec/mixprec.hpp"
#include "test_models.hpp"

namespace mixprec {
namespace {

TEST(SgdTest, Example) {
  const Tree params = Tree::mapping({{"w", Tensor::vector({1.0f, 2.0f})}});
  const Tree grads = Tree::mapping({{"w", Tensor::vector({0.5f, -1.0f})}});
  const OptimizerState s = sgd_init(params, 0.1f);
  auto [p, next] = optimizer_update(params, s, grads, true);
  EXPECT_FLOAT_EQ(p.at("w").tensor()[0], 0.95f);
  EXPECT_FLOAT_EQ(p.at("w").tensor()[1], 2.1f);
  EXPECT_EQ(next.step_count, 1);
}

TEST(AdamTest, FirstStepMovesByLearningRate) {
  const Tree params = Tree::mapping({{"w", Tensor::vector({1.0f, 2.0f})}});
  const Tree grads = Tree::mapping({{"w", Tensor::vector({0.5f, -4.0f})}});
  const OptimizerState s = adam_init(params, 0.01f);
  auto [p, next] = optimizer_update(params, s, grads, true);
  // With bias correction the first update is lr * g / (|g| + eps).
  EXPECT_NEAR(p.at("w").tensor()[0], 0.99f, 1e-6);
  EXPECT_NEAR(p.at("w").tensor()[1], 2.01f, 1e-6);
  EXPECT_EQ(next.first_moment->at("w").tensor().dtype(), DType::F32);
  EXPECT_FLOAT_EQ(next.first_moment->at("w").tensor()[0], 0.05f);
}

TEST(AdamTest, MatchesDoubleReferenceOverSteps) {
  std::mt19937_64 rng(12);
  const Tensor w0 = testing::normal_tensor(rng, {6}, 1.0f);
  Tree params = Tree::mapping({{"w", w0}});
  OptimizerState s = adam_init(params, 0.05f);
  std::vector<double> w(w0.data().begin(), w0.data().end()), m(6, 0), v(6, 0);
  for (int t = 1; t <= 20; ++t) {
    const Tensor g = testing::normal_tensor(rng, {6}, 1.0f);
    std::tie(params, s) = optimizer_update(params, s, Tree::mapping({{"w", g}}), true);
    for (int i = 0; i < 6; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.999, t));
      w[i] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(params.at("w").tensor()[i], w[i], 1e-5);
}

TEST(OptimizerTest, InitRequiresFloatLeaves) {
  const Tree ints = Tree::mapping({{"k", Tensor(Shape{1}, DType::I32, {1})}});
  EXPECT_THROW(sgd_init(ints, 0.1f), ContractViolation);
  EXPECT_THROW(adam_init(Tree::mapping(), 0.1f), ContractViolation);
}

TEST(OptimizerTest, StructureMismatchThrows) {
  const Tree params = Tree::mapping({{"w", Tensor::vector({1})}});
  const OptimizerState s = sgd_init(params, 0.1f);
  EXPECT_THROW(optimizer_update(params, s, Tree::mapping({{"v", Tensor::vector({1})}}), true), TreeError);
}

TEST(OptimizerTest, NonFloatLeavesAreUntouched) {
  const Tree params = Tree::mapping({{"w", Tensor::vector({1})},
                                     {"k", Tensor(Shape{1}, DType::I32, {5})}});
  const ValueAndGrad vg = value_and_grad(
      [](const Tree& p, const Tree&) { return sum(p.at("w").tensor()); }, params, Tree());
  for (auto init : {sgd_init(params, 0.1f), adam_init(params, 0.1f)}) {
    auto [p, s] = optimizer_update(params, init, vg.grads, true);
    EXPECT_TRUE(bitwise_equal(p.at("k").leaf(), params.at("k").leaf()));
  }
}

TEST(OptimizerTest, MasterWeightsKeepTheirDtype) {
  const Tree params = Tree::mapping({{"w", Tensor::vector({1.0f})}, {"h", Tensor::vector({1.0f}, DType::F16)}});
  const Tree grads = Tree::mapping({{"w", Tensor::vector({1e-4f})}, {"h", Tensor::vector({1e-4f})}});
  auto [p, s] = optimizer_update(params, sgd_init(params, 1.0f), grads, true);
  EXPECT_EQ(p.at("w").tensor().dtype(), DType::F32);
  EXPECT_EQ(p.at("h").tensor().dtype(), DType::F16);
  EXPECT_LT(p.at("w").tensor()[0], 1.0f);
  // 1 - 1e-4 rounds back to 1 in f16: small updates vanish without f32 masters.
  EXPECT_EQ(p.at("h").tensor()[0], 1.0f);
}

TEST(OptimizerTest, GatingProperty) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = testing::random_mlp(rng);
    const ValueAndGrad vg = value_and_grad(testing::mlp_loss, c.params, c.args);
    for (auto state : {sgd_init(c.params, 0.01f), adam_init(c.params, 0.01f)}) {
      // Advance once so the state is not trivially fresh.
      std::tie(std::ignore, state) = optimizer_update(c.params, state, vg.grads, true);

      auto [skip_p, skip_s] = optimizer_update(c.params, state, vg.grads, false);
      EXPECT_TRUE(bitwise_equal(skip_p, c.params));
      EXPECT_TRUE(bitwise_equal(skip_s, state));

      auto [p, s] = optimizer_update(c.params, state, vg.grads, true);
      auto [updates, expected_state] = compute_updates(state, vg.grads);
      EXPECT_TRUE(bitwise_equal(p, apply_updates(c.params, updates)));
      EXPECT_TRUE(bitwise_equal(s, expected_state));
      EXPECT_EQ(s.step_count, state.step_count + 1);
    }
  }
}

}  // namespace
}  // namespace mixprec
