#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string_view>

namespace himerge {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

enum class dtype : std::uint8_t { f32, f16, bf16 };

constexpr std::size_t element_size(dtype t) noexcept {
  return t == dtype::f32 ? 4 : 2;
}

constexpr std::string_view dtype_name(dtype t) noexcept {
  switch (t) {
  case dtype::f32: return "F32";
  case dtype::f16: return "F16";
  case dtype::bf16: return "BF16";
  }
  return "?";
}

inline std::optional<dtype> parse_dtype(std::string_view tag) noexcept {
  if (tag == "F32") return dtype::f32;
  if (tag == "F16") return dtype::f16;
  if (tag == "BF16") return dtype::bf16;
  return std::nullopt;
}

// ----------------------------------------------------------------------------
// Half-precision conversions. Narrowing rounds to nearest, ties to even.
// ----------------------------------------------------------------------------

inline float bf16_to_f32(std::uint16_t h) noexcept {
  return std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
}

inline std::uint16_t f32_to_bf16(float f) noexcept {
  auto u = std::bit_cast<std::uint32_t>(f);
  if ((u & 0x7fffffffu) > 0x7f800000u) {
    // quiet the NaN, keep the sign
    return static_cast<std::uint16_t>((u >> 16) | 0x0040u);
  }
  const std::uint32_t lsb = (u >> 16) & 1u;
  u += 0x7fffu + lsb;
  return static_cast<std::uint16_t>(u >> 16);
}

inline float f16_to_f32(std::uint16_t h) noexcept {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: renormalize
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      mant &= 0x3ffu;
      bits = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + (127 - 15)) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

inline std::uint16_t f32_to_f16(float f) noexcept {
  const auto u = std::bit_cast<std::uint32_t>(f);
  const auto sign = static_cast<std::uint16_t>((u >> 16) & 0x8000u);
  const std::uint32_t abs = u & 0x7fffffffu;

  if (abs > 0x7f800000u) return static_cast<std::uint16_t>(sign | 0x7e00u);
  if (abs >= 0x477ff000u) {
    // at or above 65520 rounds to infinity
    return static_cast<std::uint16_t>(sign | 0x7c00u);
  }

  const int exp = static_cast<int>(abs >> 23) - 127;
  if (exp < -14) {
    // subnormal half (or zero): value = m * 2^-24
    if (exp < -25) return sign;
    const std::uint32_t mant = (abs & 0x7fffffu) | 0x800000u;
    const int shift = -exp - 1;
    const std::uint32_t shifted = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t half = 1u << (shift - 1);
    std::uint32_t r = shifted;
    if (rem > half || (rem == half && (shifted & 1u))) ++r;
    return static_cast<std::uint16_t>(sign | r);
  }

  std::uint32_t mant = abs & 0x7fffffu;
  std::uint32_t hexp = static_cast<std::uint32_t>(exp + 15);
  std::uint32_t r = mant >> 13;
  const std::uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (r & 1u))) {
    ++r;
    if (r == 0x400u) {
      r = 0;
      ++hexp;
    }
  }
  return static_cast<std::uint16_t>(sign | (hexp << 10) | r);
}

/// Reads element `i` of a little-endian buffer of type `t` as f32.
inline float load_element(const std::byte* data, dtype t, std::size_t i) noexcept {
  switch (t) {
  case dtype::f32: {
    std::uint32_t u;
    std::memcpy(&u, data + 4 * i, 4);
    return std::bit_cast<float>(u);
  }
  case dtype::f16:
  case dtype::bf16: {
    std::uint16_t h;
    std::memcpy(&h, data + 2 * i, 2);
    return t == dtype::f16 ? f16_to_f32(h) : bf16_to_f32(h);
  }
  }
  return 0.0f;
}

inline void store_element(std::byte* data, dtype t, std::size_t i, float v) noexcept {
  switch (t) {
  case dtype::f32: {
    auto u = std::bit_cast<std::uint32_t>(v);
    std::memcpy(data + 4 * i, &u, 4);
    return;
  }
  case dtype::f16:
  case dtype::bf16: {
    std::uint16_t h = t == dtype::f16 ? f32_to_f16(v) : f32_to_bf16(v);
    std::memcpy(data + 2 * i, &h, 2);
    return;
  }
  }
}

} // namespace himerge
