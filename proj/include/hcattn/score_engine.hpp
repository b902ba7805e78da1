// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "hcattn/quantizer.hpp"

namespace hcattn {

// Query-by-centroid inner products, group-major: values[i * c + m] is the
// dot product of the query's group-i sub-vector with centroid m of group i.
struct LookupTable {
  std::size_t g = 0;
  std::size_t c = 0;
  std::vector<float> values;

  float at(std::size_t group, std::size_t m) const { return values[group * c + m]; }
};

struct ScoreVector {
  std::vector<float> scores;
  std::optional<std::vector<float>> weights;
};

LookupTable build_table(std::span<const float> q, const Codebook& cb);

// scores[j] = sum over groups (ascending) of T[i, P[j, i]].
ScoreVector approx_scores(const LookupTable& table, const KeyIndexMatrix& p);

// Appends approximate scores for p to out without allocating a ScoreVector.
void approx_scores_into(const LookupTable& table, const KeyIndexMatrix& p,
                        std::vector<float>& out);

// Fills weights with softmax(scores / sqrt(d)); max-subtracted, summed in
// double.
ScoreVector normalize(ScoreVector z, std::size_t d);

}  // namespace hcattn
