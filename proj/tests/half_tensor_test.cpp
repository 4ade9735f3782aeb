#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "infinisim/half.hpp"
#include "infinisim/tensor.hpp"

using namespace infinisim;

namespace {

/// Exact value of a finite binary16 pattern, computed in double from its fields.
double half_value(std::uint16_t bits) {
  const int e = (bits >> 10) & 0x1f;
  const int m = bits & 0x3ff;
  const double mag = e == 0 ? std::ldexp(m, -24) : std::ldexp(1024 + m, e - 25);
  return (bits & 0x8000) ? -mag : mag;
}

/// Round-to-nearest-even by searching the sorted table of positive finite halves.
std::uint16_t oracle_to_half(float x) {
  static const std::vector<double> table = [] {
    std::vector<double> t;
    for (std::uint16_t b = 0; b <= 0x7bff; ++b) t.push_back(half_value(b));
    return t;
  }();
  const std::uint16_t sign = std::signbit(x) ? 0x8000 : 0;
  const double a = std::fabs(static_cast<double>(x));
  if (a >= 65520.0) return sign | 0x7c00;  // halfway past the largest finite half rounds up to inf
  const auto it = std::lower_bound(table.begin(), table.end(), a);
  const auto hi = static_cast<std::uint16_t>(it - table.begin());
  if (table[hi] == a || hi == 0) return sign | hi;
  const std::uint16_t lo = hi - 1;
  const double dlo = a - table[lo], dhi = table[hi] - a;
  if (dlo < dhi) return sign | lo;
  if (dhi < dlo) return sign | hi;
  return sign | ((lo & 1) ? hi : lo);
}

}  // namespace

TEST(Half, EveryFiniteHalfRoundTrips) {
  for (std::uint32_t b = 0; b < 0x10000; ++b) {
    const Half h{static_cast<std::uint16_t>(b)};
    const int e = (b >> 10) & 0x1f;
    if (e == 0x1f) continue;
    EXPECT_EQ(static_cast<double>(to_float(h)), half_value(h.bits)) << b;
    EXPECT_EQ(to_half(to_float(h)).bits, h.bits) << b;
  }
}

TEST(Half, MatchesNearestEvenOracleOnRandomFloats) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 400000; ++i) {
    float x;
    if (i % 2) {
      const std::uint32_t bits = static_cast<std::uint32_t>(rng());
      x = std::bit_cast<float>(bits);
      if (!std::isfinite(x)) continue;
    } else {
      // concentrate on the half range, including subnormals and ties
      x = std::ldexp(static_cast<float>(rng() % (1u << 24)) / (1u << 24), static_cast<int>(rng() % 44) - 28);
      if (rng() & 1) x = -x;
    }
    ASSERT_EQ(to_half(x).bits, oracle_to_half(x)) << x;
  }
}

TEST(Half, TiesAndSpecials) {
  for (std::uint16_t b = 1; b < 0x7bff; ++b) {
    const double mid = (half_value(b) + half_value(b + 1)) / 2;
    const float f = static_cast<float>(mid);
    if (static_cast<double>(f) != mid) continue;  // midpoint not representable in float
    ASSERT_EQ(to_half(f).bits, (b & 1) ? b + 1 : b) << b;
  }
  EXPECT_EQ(to_half(65504.0f).bits, 0x7bff);
  EXPECT_EQ(to_half(65519.99f).bits, 0x7bff);
  EXPECT_EQ(to_half(65520.0f).bits, 0x7c00);
  EXPECT_EQ(to_half(-1e30f).bits, 0xfc00);
  EXPECT_EQ(to_half(std::numeric_limits<float>::infinity()).bits, 0x7c00);
  EXPECT_TRUE(std::isnan(to_float(to_half(std::nanf("")))));
  EXPECT_EQ(to_half(-0.0f).bits, 0x8000);
  EXPECT_EQ(to_half(std::ldexp(1.0f, -25)).bits, 0x0000);  // tie to even zero
  EXPECT_EQ(to_half(std::ldexp(1.5f, -25)).bits, 0x0001);
  static_assert(to_half(1.0f).bits == 0x3c00);
  EXPECT_EQ(round_to_half(0.1f), to_float(Half{0x2e66}));
}

TEST(Tensor, TypedViewsAndSlices) {
  const std::vector<float> v = {1, 2, 3, 4};
  const Tensor t = Tensor::from(v);
  EXPECT_EQ(t.dtype(), DType::F32);
  EXPECT_EQ(t.size(), 4u);
  EXPECT_EQ(t.nbytes(), 16u);
  EXPECT_EQ(t.to_vector<float>(), v);
  EXPECT_THROW(t.as<double>(), ShapeError);
  EXPECT_EQ(t.slice(1, 2).to_vector<float>(), (std::vector<float>{2, 3}));
  EXPECT_THROW(t.slice(3, 2), ShapeError);
  EXPECT_EQ(Tensor::from(std::vector<Half>{Half{1}}).nbytes(), 2u);
  EXPECT_EQ(dtype_size(DType::F64), 8u);
  EXPECT_EQ(dtype_name(DType::F16), "f16");
  EXPECT_THROW(Tensor::from_bytes(DType::F64, std::vector<std::byte>(7)), ShapeError);
  EXPECT_TRUE(Tensor::from(v) == t);
  EXPECT_FALSE(Tensor::from(std::vector<double>{1, 2}) == t);
}
