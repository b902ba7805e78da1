// SPDX-License-Identifier: Apache-2.0
#include "hcattn/eviction.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace hcattn {

EvictionSelection select(std::span<const float> weights, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) {
    throw std::invalid_argument("select: tau must be in (0, 1], got " + std::to_string(tau));
  }
  if (weights.empty()) throw std::invalid_argument("select: empty weight vector");
  if (weights.size() > UINT32_MAX) throw std::invalid_argument("select: too many tokens");

  const std::size_t n = weights.size();
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0U);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return weights[a] > weights[b]; });

  std::size_t k = n;
  if (tau < 1.0) {
    const double target = tau - kEvictionSlack;
    double cumulative = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      cumulative += weights[order[i]];
      if (cumulative >= target) {
        k = i + 1;
        break;
      }
    }
  }

  EvictionSelection sel;
  sel.tau = tau;
  sel.n = n;
  sel.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  sel.weights.resize(k);
  for (std::size_t i = 0; i < k; ++i) sel.weights[i] = weights[sel.indices[i]];
  return sel;
}

double selection_ratio(const EvictionSelection& sel) {
  if (sel.n == 0) return 0.0;
  return static_cast<double>(sel.k_star()) / static_cast<double>(sel.n);
}

}  // namespace hcattn
