#pragma once

#include <array>
#include <cstdint>

namespace varan {

/// splitmix64 step; also used to derive independent sub-seeds.
std::uint64_t splitmix64(std::uint64_t& state);

/// Derives a seed for a named stream from a master seed.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

/// xoshiro256** seeded through splitmix64, with Box-Muller normals. The
/// stream is fully specified here so datasets reproduce across platforms:
///   uniform() = ((next() >> 11) + 1) * 2^-53, in (0, 1]
///   normal() pairs: r = sqrt(-2 ln u1), z0 = r cos(2 pi u2), z1 = r sin(2 pi u2);
///   z0 is returned first and z1 cached for the next call.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next();
  double uniform();
  double normal();
  /// Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n);
  /// Uniform in [lo, hi).
  double uniform(double lo, double hi);

 private:
  std::array<std::uint64_t, 4> s_{};
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace varan
