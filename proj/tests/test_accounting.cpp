// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "hcattn/accounting.hpp"

using namespace hcattn;

TEST_SUITE("accounting") {
  TEST_CASE("memory budget reproduces the compression table") {
    const auto dense = memory_budget(128, std::nullopt, false);
    CHECK(dense.key_budget_fraction == 1.0);
    CHECK(dense.value_budget_fraction == 1.0);
    CHECK(dense.total_fraction == 1.0);

    const auto vo = memory_budget(128, std::nullopt, true);
    CHECK(vo.key_budget_fraction == 1.0);
    CHECK(vo.value_budget_fraction == 0.0);
    CHECK(vo.total_fraction == 0.5);

    const auto g64 = memory_budget(128, 64, true);
    CHECK(g64.key_budget_fraction == 0.5);
    CHECK(g64.total_fraction == 0.25);

    const auto g32 = memory_budget(128, 32, true);
    CHECK(g32.key_budget_fraction == 0.25);
    CHECK(g32.total_fraction == 0.125);

    CHECK(g32.element_bytes == 2);
    CHECK(g32.index_bytes == 2);
  }

  TEST_CASE("total is the mean of key and value fractions") {
    for (std::size_t g : {1, 2, 4, 8, 16, 32, 64, 128}) {
      for (bool off : {false, true}) {
        const auto r = memory_budget(128, g, off);
        CHECK(r.total_fraction == (r.key_budget_fraction + r.value_budget_fraction) / 2);
      }
    }
  }

  TEST_CASE("memory budget rejects groups that do not divide d") {
    CHECK_THROWS_AS(memory_budget(128, 48, true), std::invalid_argument);
    CHECK_THROWS_AS(memory_budget(128, 0, true), std::invalid_argument);
  }

  TEST_CASE("compute cost formulas") {
    const auto m = compute_cost(1000000, 128, 4096, 32);
    CHECK(m.per_query.mults_approx == 524288);
    CHECK(m.per_query.mults_exact == 128000000);
    CHECK(m.per_query.adds_approx == 32000000);
    CHECK(m.full_pass.mults_exact == 128000000000000ULL);
    CHECK(m.full_pass.adds_approx == 32000000000000ULL);
    CHECK(m.full_pass.mults_approx == 524288000000ULL);

    CHECK(compute_cost(1, 64, 8, 4).per_query.mults_exact == 64);

    const auto even = compute_cost(512, 128, 512, 64);
    CHECK(even.per_query.mults_approx == even.per_query.mults_exact);

    CHECK_THROWS_AS(compute_cost(1ULL << 40, 1ULL << 30, 1, 1), std::overflow_error);
  }

  TEST_CASE("communication overhead") {
    const double bytes = comm_overhead(1e6, 32, 8, 0.2, 2);
    CHECK(bytes == 102400000.0);
    CHECK(bytes / kBytesPerMegabyte == 102.4);
    CHECK(comm_overhead(1e6, 32, 8, 0.0, 2) == 0.0);
    CHECK(comm_overhead(1000, 1, 1, 1.0, 2) == 2000.0);
    CHECK_THROWS_AS(comm_overhead(10, 1, 1, 1.5, 2), std::invalid_argument);
    CHECK_THROWS_AS(comm_overhead(-1, 1, 1, 0.5, 2), std::invalid_argument);
  }

  TEST_CASE("communication overhead is linear in each argument") {
    const double base = comm_overhead(5000, 4, 2, 0.25, 2);
    CHECK(comm_overhead(10000, 4, 2, 0.25, 2) == 2 * base);
    CHECK(comm_overhead(5000, 12, 2, 0.25, 2) == 3 * base);
    CHECK(comm_overhead(5000, 4, 8, 0.25, 2) == 4 * base);
    CHECK(comm_overhead(5000, 4, 2, 0.5, 2) == 2 * base);
    CHECK(comm_overhead(5000, 4, 2, 0.25, 4) == 2 * base);
  }

  TEST_CASE("reconcile ledger") {
    TransferLedger l{2000, 4000, 10};
    auto r = reconcile_ledger(l, 2000.0, 0.0);
    CHECK(r.relative_deviation == 0.0);
    CHECK(r.within_tolerance);

    r = reconcile_ledger(l, 2100.0, 0.01);
    CHECK(r.relative_deviation == doctest::Approx(100.0 / 2100.0));
    CHECK_FALSE(r.within_tolerance);

    CHECK_THROWS_AS(reconcile_ledger(TransferLedger{}, 1.0, 0.1), std::invalid_argument);
  }
}
