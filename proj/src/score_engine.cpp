// SPDX-License-Identifier: Apache-2.0
#include "hcattn/score_engine.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace hcattn {

LookupTable build_table(std::span<const float> q, const Codebook& cb) {
  const auto& cfg = cb.config();
  if (!cb.trained()) throw std::invalid_argument("build_table: untrained codebook");
  if (q.size() != cfg.d) {
    throw std::invalid_argument("build_table: query has " + std::to_string(q.size()) +
                                " elements, codebook expects d=" + std::to_string(cfg.d));
  }
  const std::size_t sub = cfg.sub_dim();
  LookupTable t{cfg.g, cfg.c, std::vector<float>(cfg.g * cfg.c)};
  for (std::size_t i = 0; i < cfg.g; ++i) {
    const auto qs = q.subspan(i * sub, sub);
    for (std::size_t m = 0; m < cfg.c; ++m) {
      t.values[i * cfg.c + m] = static_cast<float>(dot(qs, cb.centroid(i, m)));
    }
  }
  return t;
}

void approx_scores_into(const LookupTable& table, const KeyIndexMatrix& p,
                        std::vector<float>& out) {
  if (p.g != table.g) {
    throw std::invalid_argument("approx_scores: table has g=" + std::to_string(table.g) +
                                ", index matrix g=" + std::to_string(p.g));
  }
  out.reserve(out.size() + p.n);
  const float* values = table.values.data();
  for (std::size_t j = 0; j < p.n; ++j) {
    const std::uint16_t* idx = p.indices.data() + j * p.g;
    double acc = 0.0;
    for (std::size_t i = 0; i < p.g; ++i) {
      if (idx[i] >= table.c) {
        throw std::out_of_range("approx_scores: index " + std::to_string(idx[i]) +
                                " >= c=" + std::to_string(table.c));
      }
      acc += values[i * table.c + idx[i]];
    }
    out.push_back(static_cast<float>(acc));
  }
}

ScoreVector approx_scores(const LookupTable& table, const KeyIndexMatrix& p) {
  ScoreVector sv;
  approx_scores_into(table, p, sv.scores);
  return sv;
}

ScoreVector normalize(ScoreVector z, std::size_t d) {
  if (z.scores.empty()) throw std::invalid_argument("normalize: empty score vector");
  if (d == 0) throw std::invalid_argument("normalize: d must be >= 1");
  for (float s : z.scores) {
    if (!std::isfinite(s)) throw std::invalid_argument("normalize: non-finite score");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double top = *std::max_element(z.scores.begin(), z.scores.end());
  std::vector<double> e(z.scores.size());
  double total = 0.0;
  for (std::size_t j = 0; j < e.size(); ++j) {
    e[j] = std::exp((z.scores[j] - top) * scale);
    total += e[j];
  }
  std::vector<float> w(e.size());
  for (std::size_t j = 0; j < e.size(); ++j) w[j] = static_cast<float>(e[j] / total);
  z.weights = std::move(w);
  return z;
}

}  // namespace hcattn
