#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace rdbm {

// Philox4x32-10 block cipher (Salmon et al., Random123). Stateless: the
// output depends only on (key, counter), which is what makes per-trajectory
// streams independent of scheduling.
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                              std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

// FNV-1a, used to derive named substream ids from a single seed.
constexpr std::uint64_t stream_id(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

// A reproducible stream of uniforms/normals keyed by (seed, stream). Each
// Philox block yields two 53-bit uniforms, turned into two normals by
// Box-Muller.
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint64_t stream) noexcept : seed_(seed), stream_(stream) {}

  RandomStream substream(std::uint64_t index) const noexcept {
    return RandomStream(seed_, mix(stream_ + 0x9E3779B97F4A7C15ull * (index + 1)));
  }

  // Uniform in (0, 1).
  double uniform() noexcept {
    if (have_uniform_) {
      have_uniform_ = false;
      return cached_uniform_;
    }
    const auto block = next_block();
    cached_uniform_ = to_open_unit(block[2], block[3]);
    have_uniform_ = true;
    return to_open_unit(block[0], block[1]);
  }

  double normal() noexcept {
    if (have_normal_) {
      have_normal_ = false;
      return cached_normal_;
    }
    const auto block = next_block();
    const double u1 = to_open_unit(block[0], block[1]);
    const double u2 = to_open_unit(block[2], block[3]);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double phi = 2.0 * std::numbers::pi * u2;
    cached_normal_ = r * std::sin(phi);
    have_normal_ = true;
    return r * std::cos(phi);
  }

  // Uniform integer in [lo, hi].
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi) noexcept {
    const std::uint64_t span = hi - lo + 1;
    return lo + static_cast<std::uint64_t>(uniform() * static_cast<double>(span)) % span;
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

 private:
  static std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static double to_open_unit(std::uint32_t hi, std::uint32_t lo) noexcept {
    const std::uint64_t bits = ((std::uint64_t{hi} << 32) | lo) >> 11;
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  std::array<std::uint32_t, 4> next_block() noexcept {
    const std::uint64_t c = counter_++;
    return philox4x32({static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32),
                       static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)},
                      {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)});
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  double cached_normal_ = 0.0;
  double cached_uniform_ = 0.0;
  bool have_normal_ = false;
  bool have_uniform_ = false;
};

}  // namespace rdbm
