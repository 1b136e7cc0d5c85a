#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "mixprec/mixprec.hpp"
#include "scaling_oracle.hpp"
#include "test_models.hpp"

namespace mixprec {
namespace {

TEST(CastTreeTest, CastsFloatLeavesOnly) {
  const Tree t = Tree::mapping({{"w", Tensor::vector({1.0f, 0.1f})},
                                {"k", Tensor(Shape{1}, DType::I32, {3})},
                                {"n", Opaque{"x"}},
                                {"s", Scalar::weak_value(0.1)}});
  const Tree h = cast_to_float16(t);
  EXPECT_EQ(h.at("w").tensor().dtype(), DType::F16);
  EXPECT_EQ(h.at("w").tensor()[1], quantize(0.1f, DType::F16));
  EXPECT_EQ(h.at("k").tensor().dtype(), DType::I32);
  EXPECT_TRUE(bitwise_equal(h.at("n").leaf(), t.at("n").leaf()));
  EXPECT_TRUE(bitwise_equal(h.at("s").leaf(), t.at("s").leaf()));
  EXPECT_EQ(cast_to_bfloat16(t).at("w").tensor().dtype(), DType::BF16);
  EXPECT_THROW(cast_tree(t, DType::I32), ContractViolation);
}

TEST(CastTreeTest, RoundTripThroughF32IsIdentityOnHalfTrees) {
  std::mt19937_64 rng(3);
  for (DType d : {DType::F16, DType::BF16}) {
    for (int trial = 0; trial < 20; ++trial) {
      const auto c = testing::random_mlp(rng);
      const Tree half = cast_tree(c.params, d);
      EXPECT_TRUE(bitwise_equal(cast_tree(cast_to_float32(half), d), half));
    }
  }
}

TEST(HalfPrecisionTest, SelectsFormat) {
  EXPECT_EQ(half_precision(), DType::F16);
  set_half_precision(DType::BF16);
  EXPECT_EQ(cast_to_half_precision(Tree(Tensor::scalar(1))).tensor().dtype(), DType::BF16);
  set_half_precision(DType::F16);
  EXPECT_THROW(set_half_precision(DType::F32), ContractViolation);
}

TEST(CastFunctionTest, CastsArgumentsAndResult) {
  auto f = cast_function([](const Tensor& a, const Tensor& b) { return a + b; }, DType::F16, DType::F32);
  const Tensor out = f(Tensor::vector({1.0f}), Tensor::vector({0.1f}));
  EXPECT_EQ(out.dtype(), DType::F32);
  EXPECT_EQ(out[0], quantize(1.0f + quantize(0.1f, DType::F16), DType::F16));

  auto keep = cast_function([](const Tensor& a) { return a; }, DType::BF16);
  EXPECT_EQ(keep(Tensor::vector({1.0f})).dtype(), DType::BF16);
  // Integer tensors are not floats and pass through.
  EXPECT_EQ(keep(Tensor(Shape{1}, DType::I32, {2})).dtype(), DType::I32);
}

TEST(ForceFullPrecisionTest, AvoidsHalfOverflow) {
  const Tensor x = Tensor::full({256}, 1000.0f, DType::F16);
  EXPECT_TRUE(std::isinf(mean(x).item()));
  auto safe_mean = force_full_precision([](const Tensor& t) { return mean(t); }, DType::F16);
  const Tensor m = safe_mean(x);
  EXPECT_EQ(m.dtype(), DType::F16);
  EXPECT_EQ(m.item(), 1000.0f);
}

TEST(LossScalingTest, DefaultsAndValidation) {
  const LossScaling s;
  EXPECT_EQ(s.scale, 32768.0f);
  EXPECT_EQ(s.growth_interval, 2000);
  EXPECT_EQ(s.growth_factor, 2.0f);
  EXPECT_EQ(s.backoff_factor, 0.5f);
  EXPECT_EQ(s.min_scale, 1.0f);
  EXPECT_NO_THROW(s.validate());
  LossScaling bad = s;
  bad.scale = 0.5f;
  EXPECT_THROW(bad.validate(), ContractViolation);
  bad = s;
  bad.backoff_factor = 1.0f;
  EXPECT_THROW(bad.validate(), ContractViolation);
  bad = s;
  bad.growth_interval = 0;
  EXPECT_THROW(filter_grad([](const Tree&, const Tree&) { return Tensor::scalar(0); }, bad),
               ContractViolation);
}

TEST(LossScalingTest, ScaleAndUnscale) {
  LossScaling s;
  s.scale = 1024.0f;
  const Tensor g = Tensor::vector({0.5f, -3.0f}, DType::F16);
  const Tensor scaled = scale(s, g);
  EXPECT_EQ(scaled.dtype(), DType::F16);
  EXPECT_EQ(scaled[0], 512.0f);
  const Tensor back = unscale(s, scaled);
  EXPECT_EQ(back.dtype(), DType::F32);
  EXPECT_TRUE(bitwise_equal(back, cast(g, DType::F32)));
  s.scale = 65536.0f;
  EXPECT_TRUE(std::isinf(scale(s, Tensor::vector({1.0f}, DType::F16))[0]));
}

TEST(LossScalingTest, AdjustExamples) {
  LossScaling s;
  s.scale = 1024.0f;
  s.growth_interval = 2;
  LossScaling a = adjust(s, true);
  EXPECT_EQ(a.scale, 1024.0f);
  EXPECT_EQ(a.steps_since_growth, 1);
  a = adjust(a, true);
  EXPECT_EQ(a.scale, 2048.0f);
  EXPECT_EQ(a.steps_since_growth, 0);
  a = adjust(a, false);
  EXPECT_EQ(a.scale, 1024.0f);

  LossScaling floor;
  floor.scale = 1.0f;
  EXPECT_EQ(adjust(floor, false).scale, 1.0f);

  LossScaling top;
  top.scale = std::ldexp(1.0f, 127);
  top.growth_interval = 1;
  EXPECT_EQ(adjust(top, true).scale, std::ldexp(1.0f, 127));
}

TEST(LossScalingTest, AdjustMatchesOracleAndStaysPowerOfTwo) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    LossScaling s;
    s.scale = std::ldexp(1.0f, static_cast<int>(rng() % 40));
    s.growth_interval = 1 + static_cast<int>(rng() % 5);
    testing::ScalingOracle oracle{s.scale, s.growth_interval, 2.0, 0.5, 1.0};
    const double p_bad = static_cast<double>(rng() % 100) / 100.0;
    for (int i = 0; i < 300; ++i) {
      const bool finite = std::uniform_real_distribution<double>(0, 1)(rng) >= p_bad;
      s = adjust(s, finite);
      oracle.step(finite);
      ASSERT_EQ(static_cast<double>(s.scale), oracle.scale);
      ASSERT_EQ(s.steps_since_growth, oracle.finite_run);
      int e = 0;
      ASSERT_EQ(std::frexp(s.scale, &e), 0.5f);
      ASSERT_GE(s.scale, s.min_scale);
      ASSERT_NO_THROW(s.validate());
    }
  }
}

Tensor square(const Tree& p, const Tree&) {
  const Tensor& w = p.at("w").tensor();
  return sum(w * w);
}

TEST(FilterValueAndGradTest, SquareExample) {
  LossScaling s;
  s.scale = 1024.0f;
  auto vg = filter_value_and_grad(square, s);
  const GradResult r = vg(Tree::mapping({{"w", Tensor::vector({3.0f})}}), Tree());
  ASSERT_TRUE(r.value);
  EXPECT_EQ(r.value->dtype(), DType::F32);
  EXPECT_EQ(r.value->item(), 9.0f);
  EXPECT_EQ(r.grads.at("w").tensor().dtype(), DType::F32);
  EXPECT_EQ(r.grads.at("w").tensor()[0], 6.0f);
  EXPECT_TRUE(r.grads_finite);
  EXPECT_EQ(r.scaling.scale, 1024.0f);
  EXPECT_EQ(r.scaling.steps_since_growth, 1);

  auto g = filter_grad(square, s);
  EXPECT_FALSE(g(Tree::mapping({{"w", Tensor::vector({3.0f})}}), Tree()).value);
}

TEST(FilterValueAndGradTest, OverflowBacksOff) {
  LossScaling s;
  s.scale = 65536.0f;
  auto vg = filter_value_and_grad(
      [](const Tree& p, const Tree&) { return sum(p.at("w").tensor() * 60000.0); }, s);
  const GradResult r = vg(Tree::mapping({{"w", Tensor::vector({1e-3f})}}), Tree());
  EXPECT_FALSE(r.grads_finite);
  EXPECT_EQ(r.scaling.scale, 32768.0f);
  EXPECT_EQ(r.scaling.steps_since_growth, 0);
}

TEST(FilterValueAndGradTest, DisabledIsPlainGradient) {
  LossScaling s;
  s.scale = 1024.0f;
  auto vg = filter_value_and_grad(square, s, false);
  const Tree params = Tree::mapping({{"w", Tensor::vector({0.1f})}});
  const GradResult r = vg(params, Tree());
  const ValueAndGrad plain = value_and_grad(square, params, Tree());
  EXPECT_TRUE(bitwise_equal(r.grads, plain.grads));
  EXPECT_TRUE(r.scaling == s);
  EXPECT_TRUE(r.grads_finite);
}

TEST(FilterValueAndGradTest, AuxAndIntegerLeaves) {
  auto vg = filter_value_and_grad(
      [](const Tree& p, const Tree&) {
        const Tensor l = sum(p.at("w").tensor());
        return WithAux{l, Tree::mapping({{"loss_dtype", Opaque{std::string(name(l.dtype()))}}})};
      },
      LossScaling{});
  const GradResult r = vg(Tree::mapping({{"w", Tensor::vector({1, 2})},
                                         {"k", Tensor(Shape{1}, DType::I32, {1})}}),
                          Tree());
  ASSERT_TRUE(r.aux);
  EXPECT_EQ(std::get<Opaque>(r.aux->at("loss_dtype").leaf()).value, "f16");
  EXPECT_TRUE(std::holds_alternative<None>(r.grads.at("k").leaf()));
}

TEST(FilterValueAndGradTest, UsesBf16WhenSelected) {
  set_half_precision(DType::BF16);
  auto vg = filter_value_and_grad(
      [](const Tree& p, const Tree&) {
        EXPECT_EQ(p.at("w").tensor().dtype(), DType::BF16);
        return sum(p.at("w").tensor());
      },
      LossScaling{});
  set_half_precision(DType::F16);
  vg(Tree::mapping({{"w", Tensor::vector({1})}}), Tree());
}

double relative_l2(const Tensor& a, const Tensor& b, double& norm) {
  double diff = 0, ref = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff += std::pow(double(a[i]) - double(b[i]), 2);
    ref += std::pow(double(b[i]), 2);
  }
  norm = std::sqrt(ref);
  return std::sqrt(diff) / std::max(norm, 1e-30);
}

TEST(FilterValueAndGradTest, MixedAgreesWithFullPrecision) {
  std::mt19937_64 rng(5);
  int compared = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = testing::random_mlp(rng);
    const GradResult mixed = filter_value_and_grad(testing::mlp_loss, LossScaling{})(c.params, c.args);
    const ValueAndGrad full = value_and_grad(testing::mlp_loss, c.params, c.args);
    ASSERT_TRUE(mixed.grads_finite);
    const auto m = float_leaves(mixed.grads);
    const auto f = float_leaves(full.grads);
    for (std::size_t i = 0; i < m.size(); ++i) {
      EXPECT_EQ(m[i].second.dtype(), DType::F32);
      double norm = 0;
      const double err = relative_l2(m[i].second, f[i].second, norm);
      if (norm > 1e-4) {
        EXPECT_LE(err, 5e-2) << m[i].first;
        ++compared;
      }
    }
    EXPECT_NEAR(mixed.value->item(), full.value.item(), 1e-2 * std::fabs(full.value.item()) + 1e-3);
  }
  EXPECT_GT(compared, 40);
}

}  // namespace
}  // namespace mixprec
