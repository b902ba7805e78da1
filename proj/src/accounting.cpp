// SPDX-License-Identifier: Apache-2.0
#include "hcattn/accounting.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace hcattn {

namespace {

std::uint64_t mul(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r = 0;
  if (__builtin_mul_overflow(a, b, &r)) throw std::overflow_error("operation count overflows 64 bits");
  return r;
}

}  // namespace

BudgetReport memory_budget(std::size_t d, std::optional<std::size_t> g, bool value_offloaded) {
  if (d == 0) throw std::invalid_argument("memory_budget: d must be >= 1");
  BudgetReport r;
  if (g) {
    if (*g == 0 || d % *g != 0) {
      throw std::invalid_argument("memory_budget: g=" + std::to_string(*g) +
                                  " does not divide d=" + std::to_string(d));
    }
    r.key_budget_fraction = static_cast<double>(*g * r.index_bytes) /
                            static_cast<double>(d * r.element_bytes);
  }
  r.value_budget_fraction = value_offloaded ? 0.0 : 1.0;
  r.total_fraction = (r.key_budget_fraction + r.value_budget_fraction) / 2.0;
  return r;
}

CostModel compute_cost(std::uint64_t n, std::uint64_t d, std::uint64_t c, std::uint64_t g) {
  CostModel m;
  m.per_query.mults_exact = mul(n, d);
  m.per_query.adds_exact = mul(n, d);
  m.per_query.mults_approx = mul(d, c);
  m.per_query.adds_approx = mul(n, g);
  m.full_pass.mults_exact = mul(n, m.per_query.mults_exact);
  m.full_pass.adds_exact = mul(n, m.per_query.adds_exact);
  m.full_pass.mults_approx = mul(n, m.per_query.mults_approx);
  m.full_pass.adds_approx = mul(n, m.per_query.adds_approx);
  return m;
}

double comm_overhead(double n, double layers, double heads, double retain_fraction,
                     double bytes_per_score) {
  if (!(retain_fraction >= 0.0 && retain_fraction <= 1.0)) {
    throw std::invalid_argument("comm_overhead: retain fraction must be in [0, 1]");
  }
  if (n < 0 || layers < 0 || heads < 0 || bytes_per_score < 0) {
    throw std::invalid_argument("comm_overhead: arguments must be nonnegative");
  }
  return retain_fraction * n * layers * heads * bytes_per_score;
}

ReconcileReport reconcile_ledger(const TransferLedger& ledger, double predicted,
                                 double tolerance_fraction) {
  if (ledger.messages == 0) throw std::invalid_argument("reconcile_ledger: empty ledger");
  ReconcileReport r;
  r.measured_bytes = ledger.bytes_weights;
  r.predicted_bytes = predicted;
  r.tolerance_fraction = tolerance_fraction;
  const double measured = static_cast<double>(ledger.bytes_weights);
  if (predicted == 0.0) {
    r.relative_deviation = measured == 0.0 ? 0.0 : INFINITY;
  } else {
    r.relative_deviation = std::abs(measured - predicted) / predicted;
  }
  r.within_tolerance = r.relative_deviation <= tolerance_fraction;
  return r;
}

}  // namespace hcattn
