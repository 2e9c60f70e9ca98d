// SPDX-License-Identifier: Apache-2.0
//
// IEEE 754 binary16 conversion with round-to-nearest-even.
#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <vector>

namespace sum {

inline constexpr float kHalfMax = 65504.0f;

/// fp32 -> fp16 bits. Magnitudes above 65504 (and infinities) saturate to
/// +-65504 and set `*saturated`; NaN maps to a quiet NaN.
inline std::uint16_t float_to_half(float f, bool* saturated = nullptr) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t abs = x & 0x7fffffffu;
  if (abs > 0x7f800000u) return sign | 0x7e00u;
  // Anything above 65504 is flagged, including (65504, 65520) which RNE
  // would round down to 65504 anyway; from 65520 up RNE would give infinity.
  if (abs > 0x477fe000u) {
    if (saturated) *saturated = true;
    return sign | 0x7bffu;
  }
  if (abs >= 0x38800000u) {  // normal in fp16
    std::uint32_t m = abs + 0xc8000000u;  // rebias exponent 127 -> 15
    m += 0x0fffu + ((m >> 13) & 1u);      // round to nearest even on the 13 dropped bits
    return sign | static_cast<std::uint16_t>(m >> 13);
  }
  if (abs < 0x33000000u) return sign;  // below half the smallest subnormal
  // Subnormal result: shift the implicit-one mantissa right and round.
  const std::uint32_t exp = abs >> 23;
  const std::uint32_t mant = (abs & 0x7fffffu) | 0x800000u;
  const std::uint32_t shift = 126 - exp;  // in [14, 24]
  std::uint32_t h = mant >> shift;
  const std::uint32_t rem = mant & ((1u << shift) - 1);
  const std::uint32_t half = 1u << (shift - 1);
  if (rem > half || (rem == half && (h & 1u))) ++h;
  return sign | static_cast<std::uint16_t>(h);
}

/// Exact widening fp16 -> fp32.
inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else if (exp != 0) {
    bits = sign | ((exp + 112) << 23) | (mant << 13);
  } else if (mant == 0) {
    bits = sign;
  } else {
    std::uint32_t e = 113;
    while (!(mant & 0x400u)) {
      mant <<= 1;
      --e;
    }
    bits = sign | (e << 23) | ((mant & 0x3ffu) << 13);
  }
  return std::bit_cast<float>(bits);
}

struct Quantized {
  std::vector<std::uint16_t> bits;
  std::size_t saturated = 0;
};

inline Quantized quantize_fp16(std::span<const float> v) {
  Quantized q;
  q.bits.reserve(v.size());
  for (float f : v) {
    bool sat = false;
    q.bits.push_back(float_to_half(f, &sat));
    q.saturated += sat;
  }
  return q;
}

inline std::vector<float> dequantize_fp16(std::span<const std::uint16_t> bits) {
  std::vector<float> out;
  out.reserve(bits.size());
  for (auto h : bits) out.push_back(half_to_float(h));
  return out;
}

}  // namespace sum
