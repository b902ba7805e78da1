// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace hcattn {

// Portable pseudo-random source used for every seeded operation in the
// library. The state is four 64-bit words filled from the seed by splitmix64;
// draws use xoshiro256**. Reals are the top 53 bits scaled by 2^-53, normals
// come from the Box-Muller transform (cosine branch, then the cached sine
// branch). Reimplementations following these rules reproduce the same
// streams, modulo libm differences in log/sqrt/cos/sin.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  // Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound);
  // Standard normal.
  double normal();

 private:
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);

// Derives an independent stream seed from a base seed and a tag.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

}  // namespace hcattn
