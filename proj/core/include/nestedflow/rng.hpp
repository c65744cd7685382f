#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace nestedflow {

// Counter-based generator (Philox 4x32, 10 rounds). Every draw is a pure
// function of (key, counter), so streams are reproducible bit-for-bit and
// can be split without coordination: two Rng instances with the same seed
// but different stream ids never overlap.
class Rng {
 public:
  explicit Rng(uint64_t seed, uint64_t stream = 0) noexcept
      : key_{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32)},
        ctr_{0, 0, static_cast<uint32_t>(stream), static_cast<uint32_t>(stream >> 32)} {}

  // Raw Philox block for known-answer tests and hashing helpers.
  static std::array<uint32_t, 4> block(const std::array<uint32_t, 4>& counter,
                                       const std::array<uint32_t, 2>& key) noexcept {
    uint32_t c0 = counter[0], c1 = counter[1], c2 = counter[2], c3 = counter[3];
    uint32_t k0 = key[0], k1 = key[1];
    for (int round = 0; round < 10; ++round) {
      const uint64_t p0 = static_cast<uint64_t>(kMul0) * c0;
      const uint64_t p1 = static_cast<uint64_t>(kMul1) * c2;
      const uint32_t hi0 = static_cast<uint32_t>(p0 >> 32), lo0 = static_cast<uint32_t>(p0);
      const uint32_t hi1 = static_cast<uint32_t>(p1 >> 32), lo1 = static_cast<uint32_t>(p1);
      const uint32_t n0 = hi1 ^ c1 ^ k0;
      const uint32_t n1 = lo1;
      const uint32_t n2 = hi0 ^ c3 ^ k1;
      const uint32_t n3 = lo0;
      c0 = n0;
      c1 = n1;
      c2 = n2;
      c3 = n3;
      k0 += kWeyl0;
      k1 += kWeyl1;
    }
    return {c0, c1, c2, c3};
  }

  uint32_t next_u32() noexcept {
    if (buf_pos_ == 4) {
      buf_ = block(ctr_, key_);
      buf_pos_ = 0;
      if (++ctr_[0] == 0) ++ctr_[1];  // 64-bit position, stream id untouched
    }
    return buf_[buf_pos_++];
  }

  uint64_t next_u64() noexcept {
    const uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  // Uniform in [0, 1): 53 random mantissa bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1]: shifted mantissa keeps log() finite.
  double uniform_open() noexcept {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller with a cached spare (no rejection, so the
  // draw count per call is fixed and the stream stays aligned).
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * kPi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  // Uniform integer in [0, n) by rejection on the top of the 64-bit range.
  uint64_t below(uint64_t n) noexcept {
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t draw;
    do {
      draw = next_u64();
    } while (draw >= limit);
    return draw % n;
  }

 private:
  static constexpr uint32_t kMul0 = 0xD2511F53u;
  static constexpr uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr uint32_t kWeyl1 = 0xBB67AE85u;
  static constexpr double kPi = 3.14159265358979323846;

  std::array<uint32_t, 2> key_;
  std::array<uint32_t, 4> ctr_;
  std::array<uint32_t, 4> buf_{};
  int buf_pos_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace nestedflow
