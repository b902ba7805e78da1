// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace hcattn {

// Cumulative-mass slack: a prefix qualifies once its sum reaches tau - slack.
inline constexpr double kEvictionSlack = 1e-6;

// Tokens kept for one query, heaviest first. Ties are ordered by ascending
// token index.
struct EvictionSelection {
  double tau = 1.0;
  std::size_t n = 0;
  std::vector<std::uint32_t> indices;
  std::vector<float> weights;

  std::size_t k_star() const { return indices.size(); }

  friend bool operator==(const EvictionSelection&, const EvictionSelection&) = default;
};

// Minimal heaviest prefix of `weights` whose cumulative sum (double, in
// sorted order) reaches tau - kEvictionSlack. tau == 1 always keeps every
// token: full probability mass needs all of them.
EvictionSelection select(std::span<const float> weights, double tau);

double selection_ratio(const EvictionSelection& sel);

}  // namespace hcattn
