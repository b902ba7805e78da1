// SPDX-License-Identifier: Apache-2.0
// Reference computations used only by tests. Each one is written directly
// from the mathematical definition and shares no code with the library's
// fast paths.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "hcattn/matrix.hpp"
#include "hcattn/quantizer.hpp"

namespace oracle {

// Nearest centroid by extended-precision squared distance, lowest index on ties.
inline std::size_t brute_nearest(const hcattn::Codebook& cb, std::size_t group,
                                 std::span<const float> sub) {
  std::size_t best = 0;
  long double best_d = INFINITY;
  for (std::size_t m = 0; m < cb.config().c; ++m) {
    long double dd = 0;
    const auto cent = cb.centroid(group, m);
    for (std::size_t t = 0; t < sub.size(); ++t) {
      const long double diff = static_cast<long double>(sub[t]) - cent[t];
      dd += diff * diff;
    }
    if (dd < best_d) {
      best_d = dd;
      best = m;
    }
  }
  return best;
}

struct PrefixResult {
  std::size_t k = 0;
  std::vector<std::uint32_t> indices;
};

// Tries every prefix length of the (weight desc, index asc) order and returns
// the first whose sum, recomputed from scratch, reaches tau - slack. tau == 1
// keeps everything.
inline PrefixResult exhaustive_min_prefix(const std::vector<float>& w, double tau,
                                          double slack = 1e-6) {
  std::vector<std::pair<float, std::uint32_t>> order;
  for (std::uint32_t i = 0; i < w.size(); ++i) order.emplace_back(w[i], i);
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::size_t k = w.size();
  if (tau < 1.0) {
    for (std::size_t len = 1; len <= w.size(); ++len) {
      double s = 0.0;
      for (std::size_t i = 0; i < len; ++i) s += order[i].first;
      if (s >= tau - slack) {
        k = len;
        break;
      }
    }
  }
  PrefixResult r;
  r.k = k;
  for (std::size_t i = 0; i < k; ++i) r.indices.push_back(order[i].second);
  return r;
}

inline std::vector<long double> softmax(std::span<const float> z, long double scale) {
  long double top = -INFINITY;
  for (float v : z) top = std::max(top, static_cast<long double>(v));
  std::vector<long double> e(z.size());
  long double total = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    e[i] = std::exp((static_cast<long double>(z[i]) - top) * scale);
    total += e[i];
  }
  for (auto& v : e) v /= total;
  return e;
}

// Dense attention under an arbitrary visibility predicate, in long double.
template <typename Visible>
std::vector<long double> masked_attention(std::span<const float> q, const hcattn::Matrix& k,
                                          const hcattn::Matrix& v, Visible visible) {
  std::vector<long double> z;
  std::vector<std::size_t> idx;
  for (std::size_t j = 0; j < k.rows; ++j) {
    if (!visible(j)) continue;
    long double s = 0;
    for (std::size_t t = 0; t < q.size(); ++t) s += static_cast<long double>(q[t]) * k.at(j, t);
    z.push_back(s);
    idx.push_back(j);
  }
  long double top = -INFINITY;
  for (auto s : z) top = std::max(top, s);
  const long double scale = 1.0L / std::sqrt(static_cast<long double>(q.size()));
  long double total = 0;
  for (auto& s : z) {
    s = std::exp((s - top) * scale);
    total += s;
  }
  std::vector<long double> out(v.cols, 0);
  for (std::size_t i = 0; i < z.size(); ++i) {
    for (std::size_t t = 0; t < v.cols; ++t) out[t] += z[i] / total * v.at(idx[i], t);
  }
  return out;
}

inline std::vector<long double> dense_attention(std::span<const float> q, const hcattn::Matrix& k,
                                                const hcattn::Matrix& v) {
  return masked_attention(q, k, v, [](std::size_t) { return true; });
}

template <typename A, typename B>
double rel_error(const A& approx, const B& exact) {
  long double diff = 0, ref = 0;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    const long double d = static_cast<long double>(approx[i]) - static_cast<long double>(exact[i]);
    diff += d * d;
    ref += static_cast<long double>(exact[i]) * static_cast<long double>(exact[i]);
  }
  return static_cast<double>(ref > 0 ? std::sqrt(diff / ref) : std::sqrt(diff));
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, static_cast<double>(std::abs(static_cast<long double>(a[i]) -
                                                 static_cast<long double>(b[i]))));
  }
  return m;
}

}  // namespace oracle
