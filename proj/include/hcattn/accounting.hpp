// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>

#include "hcattn/value_store.hpp"

namespace hcattn {

// Fractions are relative to a dense 16-bit K/V cache.
struct BudgetReport {
  double key_budget_fraction = 1.0;
  double value_budget_fraction = 1.0;
  double total_fraction = 1.0;
  std::size_t element_bytes = 2;
  std::size_t index_bytes = 2;
};

// key fraction: 1 without quantization, else g/d (2-byte index per group vs
// 2-byte element per dim); value fraction: 0 when offloaded.
BudgetReport memory_budget(std::size_t d, std::optional<std::size_t> g, bool value_offloaded);

struct OpCounts {
  std::uint64_t mults_exact = 0;
  std::uint64_t adds_exact = 0;
  std::uint64_t mults_approx = 0;
  std::uint64_t adds_approx = 0;
};

struct CostModel {
  OpCounts full_pass;  // n queries against n keys
  OpCounts per_query;
};

// exact: n*d mults and adds per query; approximate: d*c mults (table build)
// and n*g adds (gather) per query. Full pass multiplies every term by n.
CostModel compute_cost(std::uint64_t n, std::uint64_t d, std::uint64_t c, std::uint64_t g);

inline constexpr double kBytesPerMegabyte = 1e6;

// retain_fraction * n * L * H * bytes_per_score, in bytes.
double comm_overhead(double n, double layers, double heads, double retain_fraction,
                     double bytes_per_score);

struct ReconcileReport {
  std::uint64_t measured_bytes = 0;
  double predicted_bytes = 0.0;
  double relative_deviation = 0.0;
  double tolerance_fraction = 0.0;
  bool within_tolerance = false;
};

ReconcileReport reconcile_ledger(const TransferLedger& ledger, double predicted,
                                 double tolerance_fraction);

}  // namespace hcattn
