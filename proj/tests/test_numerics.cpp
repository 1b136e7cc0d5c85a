#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "mixprec/numerics.hpp"
#include "quantize_oracle.hpp"

namespace mixprec {
namespace {

constexpr DType kAll[] = {DType::F16, DType::BF16, DType::F32, DType::I32};
constexpr DType kFloats[] = {DType::F16, DType::BF16, DType::F32};

TEST(DTypeTest, WidthsAndKinds) {
  EXPECT_EQ(byte_width(DType::F16), 2);
  EXPECT_EQ(byte_width(DType::BF16), 2);
  EXPECT_EQ(byte_width(DType::F32), 4);
  EXPECT_EQ(byte_width(DType::I32), 4);
  EXPECT_TRUE(is_float(DType::F16));
  EXPECT_TRUE(is_float(DType::BF16));
  EXPECT_TRUE(is_float(DType::F32));
  EXPECT_FALSE(is_float(DType::I32));
}

TEST(QuantizeTest, ExactValuesSurvive) {
  EXPECT_EQ(quantize(1.0f, DType::F16), 1.0f);
  EXPECT_EQ(quantize(65504.0f, DType::F16), 65504.0f);
  EXPECT_EQ(quantize(-2.5f, DType::BF16), -2.5f);
}

TEST(QuantizeTest, OverflowToInfinity) {
  EXPECT_EQ(quantize(100000.0f, DType::F16), INFINITY);
  EXPECT_EQ(quantize(-100000.0f, DType::F16), -INFINITY);
  EXPECT_EQ(quantize(65519.0f, DType::F16), 65504.0f);
  EXPECT_EQ(quantize(65520.0f, DType::F16), INFINITY);
  EXPECT_EQ(quantize(std::numeric_limits<float>::max(), DType::BF16), INFINITY);
}

TEST(QuantizeTest, SubnormalTieRoundsToEven) {
  EXPECT_EQ(quantize(std::ldexp(1.0f, -25), DType::F16), 0.0f);
  EXPECT_EQ(quantize(3 * std::ldexp(1.0f, -25), DType::F16), std::ldexp(1.0f, -23));
  EXPECT_EQ(quantize(std::ldexp(1.0f, -24), DType::F16), std::ldexp(1.0f, -24));
  EXPECT_TRUE(std::signbit(quantize(-std::ldexp(1.0f, -26), DType::F16)));
}

TEST(QuantizeTest, BFloat16OfPointTwo) {
  // Oracle table row: 0x3e4ccccd -> 0x3e4d0000.
  EXPECT_EQ(std::bit_cast<std::uint32_t>(quantize(0.2f, DType::BF16)), 0x3e4d0000u);
}

TEST(QuantizeTest, NaNStaysNaN) {
  for (DType d : kFloats) EXPECT_TRUE(std::isnan(quantize(NAN, d)));
}

TEST(QuantizeTest, IntegerTargetIsAContractViolation) {
  EXPECT_THROW(quantize(1.0f, DType::I32), ContractViolation);
}

TEST(QuantizeTest, F32IsIdentity) {
  std::mt19937 rng(7);
  for (int i = 0; i < 1000; ++i) {
    const auto bits = static_cast<std::uint32_t>(rng()) & 0xBF7FFFFFu;
    const float x = std::bit_cast<float>(bits);
    EXPECT_EQ(std::bit_cast<std::uint32_t>(quantize(x, DType::F32)), bits);
  }
}

TEST(QuantizeTest, MatchesReferenceTable) {
  const auto rows = testing::load_quantize_oracle();
  ASSERT_GT(rows.size(), 10000u);
  std::size_t mismatches = 0;
  for (const auto& row : rows) {
    const float x = std::bit_cast<float>(row.input);
    mismatches += std::bit_cast<std::uint32_t>(quantize(x, DType::F16)) != row.f16;
    mismatches += std::bit_cast<std::uint32_t>(quantize(x, DType::BF16)) != row.bf16;
  }
  EXPECT_EQ(mismatches, 0u);
}

class QuantizePropertyTest : public ::testing::TestWithParam<DType> {};

TEST_P(QuantizePropertyTest, IdempotentMonotoneAndSignSymmetric) {
  const DType d = GetParam();
  std::mt19937_64 rng(1234);
  std::uniform_real_distribution<float> log_mag(-30.0f, 20.0f);
  auto draw = [&] {
    const float mag = std::exp2(log_mag(rng));
    return (rng() & 1) ? mag : -mag;
  };
  for (int i = 0; i < 20000; ++i) {
    float x = draw();
    float y = draw();
    if (x > y) std::swap(x, y);
    const float qx = quantize(x, d);
    EXPECT_EQ(quantize(qx, d), qx);
    EXPECT_LE(qx, quantize(y, d));
    EXPECT_EQ(quantize(-x, d), -qx);
  }
}

INSTANTIATE_TEST_SUITE_P(HalfFormats, QuantizePropertyTest,
                         ::testing::Values(DType::F16, DType::BF16));

// Join table of the lattice I32 < {F16, BF16} < F32, written out by hand.
DType expected_join(DType a, DType b) {
  static const DType table[4][4] = {
      //            F16         BF16        F32         I32
      /* F16  */ {DType::F16, DType::F32, DType::F32, DType::F16},
      /* BF16 */ {DType::F32, DType::BF16, DType::F32, DType::BF16},
      /* F32  */ {DType::F32, DType::F32, DType::F32, DType::F32},
      /* I32  */ {DType::F16, DType::BF16, DType::F32, DType::I32},
  };
  return table[static_cast<int>(a)][static_cast<int>(b)];
}

TEST(PromoteTest, MatchesJoinTable) {
  for (DType a : kAll)
    for (DType b : kAll) EXPECT_EQ(promote(a, b), expected_join(a, b)) << name(a) << "," << name(b);
  EXPECT_EQ(promote(DType::F16, DType::F16), DType::F16);
  EXPECT_EQ(promote(DType::F16, DType::BF16), DType::F32);
  EXPECT_EQ(promote(DType::I32, DType::F16), DType::F16);
}

TEST(PromoteTest, IsALatticeJoin) {
  for (DType a : kAll) {
    EXPECT_EQ(promote(a, a), a);
    for (DType b : kAll) {
      EXPECT_EQ(promote(a, b), promote(b, a));
      for (DType c : kAll) EXPECT_EQ(promote(promote(a, b), c), promote(a, promote(b, c)));
    }
  }
}

TEST(PromoteTest, WeakScalarsNeverPromote) {
  EXPECT_EQ(promote_with_scalar(DType::F16, Scalar::weak_value(2.0)), DType::F16);
  EXPECT_EQ(promote_with_scalar(DType::F16, Scalar::strong(2.0, DType::F32)), DType::F32);
  EXPECT_EQ(promote_with_scalar(DType::F32, Scalar::weak_value(0.0)), DType::F32);
  for (DType t : kAll) {
    EXPECT_EQ(promote_with_scalar(t, Scalar::weak_value(1e30)), t);
    for (DType s : kAll) EXPECT_EQ(promote_with_scalar(t, Scalar::strong(1.0, s)), promote(t, s));
  }
}

TEST(UlpTest, KnownSpacings) {
  EXPECT_EQ(ulp(1.0f, DType::F16), std::ldexp(1.0f, -10));
  EXPECT_EQ(ulp(1.0f, DType::BF16), std::ldexp(1.0f, -7));
  EXPECT_EQ(ulp(0.75f, DType::F16), std::ldexp(1.0f, -11));
  EXPECT_EQ(ulp(0.0f, DType::F16), std::ldexp(1.0f, -24));
}

}  // namespace
}  // namespace mixprec
