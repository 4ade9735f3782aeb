#pragma once

#include <bit>
#include <cstdint>

namespace infinisim {

/// IEEE 754 binary16 storage type. Arithmetic is never done in half precision;
/// values are widened to float for compute.
struct Half {
  std::uint16_t bits = 0;

  friend constexpr bool operator==(Half a, Half b) noexcept { return a.bits == b.bits; }
};

/// Round-to-nearest-even conversion, with overflow to infinity and NaN kept quiet.
constexpr Half to_half(float value) noexcept {
  const std::uint32_t f = std::bit_cast<std::uint32_t>(value);
  const std::uint16_t sign = static_cast<std::uint16_t>((f >> 16) & 0x8000u);
  const std::uint32_t abs = f & 0x7fffffffu;

  if (abs >= 0x7f800000u) {  // inf or nan
    const std::uint16_t mant = abs > 0x7f800000u ? 0x0200u : 0u;
    return Half{static_cast<std::uint16_t>(sign | 0x7c00u | mant)};
  }
  if (abs >= 0x477ff000u) {  // rounds to >= 65520 -> inf
    return Half{static_cast<std::uint16_t>(sign | 0x7c00u)};
  }
  if (abs < 0x38800000u) {  // below the smallest normal half: subnormal or zero
    if (abs < 0x33000000u) return Half{sign};  // < 2^-25 rounds to zero
    const std::uint32_t exp = abs >> 23;
    const std::uint32_t mant = (abs & 0x007fffffu) | 0x00800000u;
    // value = mant * 2^(exp - 150); in units of 2^-24: mant * 2^(exp - 126)
    const std::uint32_t rshift = 126u - exp;  // in [14, 24]
    const std::uint32_t q = mant >> rshift;
    const std::uint32_t rem = mant & ((1u << rshift) - 1u);
    const std::uint32_t halfway = 1u << (rshift - 1u);
    std::uint32_t r = q;
    if (rem > halfway || (rem == halfway && (q & 1u))) ++r;
    return Half{static_cast<std::uint16_t>(sign | r)};
  }
  // normal range
  std::uint32_t r = ((abs >> 13) - (112u << 10));
  const std::uint32_t rem = abs & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (r & 1u))) ++r;
  return Half{static_cast<std::uint16_t>(sign | r)};
}

constexpr float to_float(Half h) noexcept {
  const std::uint32_t sign = static_cast<std::uint32_t>(h.bits & 0x8000u) << 16;
  const std::uint32_t exp = (h.bits >> 10) & 0x1fu;
  std::uint32_t mant = h.bits & 0x3ffu;
  if (exp == 0x1fu) {
    return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
  }
  if (exp == 0) {
    if (mant == 0) return std::bit_cast<float>(sign);
    // subnormal: normalize
    int e = -1;
    do {
      ++e;
      mant <<= 1;
    } while ((mant & 0x400u) == 0);
    mant &= 0x3ffu;
    return std::bit_cast<float>(sign | ((112u - static_cast<std::uint32_t>(e)) << 23) | (mant << 13));
  }
  return std::bit_cast<float>(sign | ((exp + 112u) << 23) | (mant << 13));
}

/// Round a float through binary16 and back.
constexpr float round_to_half(float value) noexcept { return to_float(to_half(value)); }

}  // namespace infinisim
