#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace lqmfg {

/// Philox4x32-10 block function (Salmon et al., SC'11).
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kW0;
    key[1] += kW1;
  }
  return ctr;
}

/// Stateless normal variates addressed by (seed, path, agent, step, index).
/// Streams for distinct addresses are independent; no state is shared, so any
/// evaluation order gives the same numbers.
class NoiseSource {
 public:
  explicit NoiseSource(std::uint64_t seed)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}

  /// Standard normal; `index` selects the component within one (path, agent, step).
  double normal(std::uint32_t path, std::uint32_t agent, std::uint32_t step, std::uint32_t index) const {
    const auto r = philox4x32({step, agent, path, index / 2}, key_);
    // two 53-bit uniforms in (0, 1]
    const double u1 = (static_cast<double>((static_cast<std::uint64_t>(r[0]) << 21) ^ (r[1] >> 11)) + 1.0) * 0x1p-53;
    const double u2 = static_cast<double>((static_cast<std::uint64_t>(r[2]) << 21) ^ (r[3] >> 11)) * 0x1p-53;
    const double rad = std::sqrt(-2.0 * std::log(u1));
    const double ang = 2.0 * std::numbers::pi * u2;
    return (index % 2 == 0) ? rad * std::cos(ang) : rad * std::sin(ang);
  }

 private:
  std::array<std::uint32_t, 2> key_;
};

}  // namespace lqmfg
