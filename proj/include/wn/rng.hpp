#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace wn {

/// Counter-based deterministic random stream. Draw i is a pure function of
/// (seed, i): the state fed to the splitmix64 mixer is
/// seed + (counter + 1) * 0x9E3779B97F4A7C15, so identical (seed, counter)
/// pairs replay identical sequences and streams can be forked cheaply.
///
/// Uniform draws map the top 53 bits into the open interval (0, 1); normal
/// draws use the Box-Muller cosine branch and consume exactly two uniforms,
/// which keeps the counter advance per sample fixed.
struct RngStream {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  RngStream() = default;
  explicit RngStream(std::uint64_t s, std::uint64_t c = 0) : seed(s), counter(c) {}

  std::uint64_t next_u64() {
    std::uint64_t z = seed + (++counter) * 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform draw in (0, 1); never returns an endpoint.
  double next_uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal draw.
  double next_normal() {
    const double u1 = next_uniform();
    const double u2 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  /// Independent stream addressed by (seed, stream_id); used to give model
  /// initialization, shuffling and noise their own non-overlapping streams.
  RngStream split(std::uint64_t stream_id) const {
    std::uint64_t z = seed ^ (0xD6E8FEB86659FD93ull + stream_id * 0xA0761D6478BD642Full);
    z = (z ^ (z >> 32)) * 0xE7037ED1A0B428DBull;
    z = z ^ (z >> 29);
    return RngStream(z);
  }
};

}  // namespace wn
