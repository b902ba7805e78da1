// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <random>
#include <thread>

#include "hcattn/score_engine.hpp"
#include "hcattn/value_store.hpp"
#include "oracles.hpp"
#include "test_helpers.hpp"

using namespace hcattn;

namespace {

EvictionSelection make_sel(std::vector<std::uint32_t> idx, std::vector<float> w) {
  EvictionSelection s;
  s.indices = std::move(idx);
  s.weights = std::move(w);
  s.n = 0;
  return s;
}

std::vector<float> dense_weighted_sum(const std::vector<float>& w, const Matrix& v) {
  std::vector<long double> acc(v.cols, 0);
  for (std::size_t j = 0; j < v.rows; ++j) {
    for (std::size_t t = 0; t < v.cols; ++t) acc[t] += static_cast<long double>(w[j]) * v.at(j, t);
  }
  return {acc.begin(), acc.end()};
}

}  // namespace

TEST_SUITE("value_store") {
  TEST_CASE("full selection reproduces the dense weighted sum") {
    ValueStore store(1, 1, 16);
    const Matrix v = testutil::random_matrix(200, 16, 1);
    store.offload(0, 0, v);
    const auto scores = testutil::random_matrix(1, 200, 2, 3.0F).data;
    const auto w = *normalize({scores, std::nullopt}, 1).weights;
    const auto sel = select(w, 1.0);
    const auto out = store.gather_weighted_sum(0, 0, sel);
    CHECK(oracle::rel_error(out, dense_weighted_sum(w, v)) <= 1e-5);
  }

  TEST_CASE("layers are isolated") {
    ValueStore store(2, 1, 4);
    const Matrix v0 = testutil::random_matrix(5, 4, 3);
    const Matrix v1 = testutil::random_matrix(5, 4, 4);
    store.offload(0, 0, v0);
    store.offload(1, 0, v1);
    store.gather_weighted_sum(0, 0, make_sel({0, 1}, {0.5F, 0.5F}));
    for (std::size_t j = 0; j < 5; ++j) {
      const auto r = store.value_row(1, 0, j);
      CHECK(std::equal(r.begin(), r.end(), v1.row(j).begin()));
    }
  }

  TEST_CASE("appends extend an empty offload in insertion order") {
    ValueStore store(1, 2, 3);
    store.offload(0, 1, Matrix(0, 3));
    CHECK(store.rows(0, 1) == 0);
    store.append_value(0, 1, std::vector<float>{1, 2, 3});
    CHECK(store.value_row(0, 1, 0) == std::vector<float>{1, 2, 3});
    store.append_value(0, 1, std::vector<float>{4, 5, 6});
    CHECK(store.rows(0, 1) == 2);
    CHECK(store.value_row(0, 1, 1) == std::vector<float>{4, 5, 6});
    CHECK(store.rows(0, 0) == 0);
  }

  TEST_CASE("1000 appends are each returned exactly by singleton gathers") {
    ValueStore store(1, 1, 8);
    const Matrix v = testutil::random_matrix(1000, 8, 5);
    for (std::size_t j = 0; j < 1000; ++j) store.append_value(0, 0, v.row(j));
    CHECK(store.rows(0, 0) == 1000);
    for (std::uint32_t j = 0; j < 1000; ++j) {
      const auto out = store.gather_weighted_sum(0, 0, make_sel({j}, {1.0F}));
      REQUIRE(std::equal(out.begin(), out.end(), v.row(j).begin()));
    }
  }

  TEST_CASE("rejects empty selections, bad rows and shape mismatches") {
    ValueStore store(1, 1, 4);
    store.offload(0, 0, testutil::random_matrix(3, 4, 1));
    CHECK_THROWS_AS(store.gather_weighted_sum(0, 0, make_sel({}, {})), std::invalid_argument);
    CHECK_THROWS_AS(store.gather_weighted_sum(0, 0, make_sel({3}, {1.0F})), std::out_of_range);
    CHECK_THROWS_AS(store.offload(0, 0, testutil::random_matrix(2, 5, 1)), std::invalid_argument);
    CHECK_THROWS_AS(store.append_value(0, 0, std::vector<float>(3)), std::invalid_argument);
    CHECK_THROWS_AS(store.append_value(0, 0, std::vector<float>{1, 2, NAN, 4}), std::invalid_argument);
    CHECK_THROWS_AS(store.append_value(1, 0, std::vector<float>(4)), std::out_of_range);
    CHECK(store.ledger().messages == 0);
  }

  TEST_CASE("gather is linear in the weights and order-insensitive") {
    ValueStore store(1, 1, 32);
    store.offload(0, 0, testutil::random_matrix(64, 32, 6));
    std::mt19937_64 gen(7);
    std::uniform_real_distribution<float> u(0.0F, 1.0F);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<std::uint32_t> idx(64);
      std::iota(idx.begin(), idx.end(), 0U);
      std::shuffle(idx.begin(), idx.end(), gen);
      idx.resize(1 + gen() % 64);
      std::vector<float> w(idx.size());
      for (auto& x : w) x = u(gen);
      const auto base = store.gather_weighted_sum(0, 0, make_sel(idx, w));

      const float alpha = 0.25F + u(gen);
      auto scaled = w;
      for (auto& x : scaled) x *= alpha;
      auto expect = base;
      for (auto& x : expect) x *= alpha;
      CHECK(oracle::rel_error(store.gather_weighted_sum(0, 0, make_sel(idx, scaled)), expect) <= 1e-6);

      std::vector<std::size_t> perm(idx.size());
      std::iota(perm.begin(), perm.end(), 0U);
      std::shuffle(perm.begin(), perm.end(), gen);
      std::vector<std::uint32_t> pi;
      std::vector<float> pw;
      for (auto p : perm) {
        pi.push_back(idx[p]);
        pw.push_back(w[p]);
      }
      CHECK(oracle::rel_error(store.gather_weighted_sum(0, 0, make_sel(pi, pw)), base) <= 1e-5);
    }
  }

  TEST_CASE("ledger bills two bytes per weight and four per index") {
    ValueStore store(1, 1, 4);
    store.offload(0, 0, testutil::random_matrix(10, 4, 1));
    std::uint64_t total_k = 0;
    for (std::uint32_t k : {1U, 4U, 10U, 3U}) {
      std::vector<std::uint32_t> idx(k);
      std::iota(idx.begin(), idx.end(), 0U);
      store.gather_weighted_sum(0, 0, make_sel(idx, std::vector<float>(k, 0.1F)));
      total_k += k;
    }
    const auto l = store.ledger();
    CHECK(l.messages == 4);
    CHECK(l.bytes_weights == 2 * total_k);
    CHECK(l.bytes_indices == 4 * total_k);
  }

  TEST_CASE("message wire layout") {
    auto sel = make_sel({7, 300}, {0.75F, 0.25F});
    const auto bytes = encode_message(3, 258, sel);
    REQUIRE(bytes.size() == 2 + 2 + 4 + 2 * 4 + 2 * 4);
    CHECK(bytes[0] == 3);
    CHECK(bytes[1] == 0);
    CHECK(bytes[2] == 2);  // 258 = 0x0102
    CHECK(bytes[3] == 1);
    CHECK(bytes[4] == 2);  // k_star
    CHECK(bytes[8] == 7);
    CHECK(bytes[12] == 44);  // 300 = 0x012C
    CHECK(bytes[13] == 1);
    CHECK(bytes[19] == 0x3F);  // 0.75f = 0x3F400000
    CHECK(bytes[18] == 0x40);

    const auto m = decode_message(bytes);
    CHECK(m.layer == 3);
    CHECK(m.head == 258);
    CHECK(m.indices == sel.indices);
    CHECK(m.weights == sel.weights);

    auto cut = bytes;
    cut.pop_back();
    CHECK_THROWS_AS(decode_message(cut), std::invalid_argument);
    auto extra = bytes;
    extra.push_back(0);
    CHECK_THROWS_AS(decode_message(extra), std::invalid_argument);

    const std::vector<float> out{1.5F, -2.0F};
    CHECK(decode_reply(encode_reply(out)) == out);
    CHECK_THROWS_AS(decode_reply(std::vector<std::uint8_t>(3)), std::invalid_argument);
  }

  TEST_CASE("host channel serves gathers in order and forwards errors") {
    auto store = std::make_shared<ValueStore>(2, 2, 8);
    for (std::size_t l = 0; l < 2; ++l) {
      for (std::size_t h = 0; h < 2; ++h) store->offload(l, h, testutil::random_matrix(20, 8, l * 2 + h));
    }
    HostChannel channel(store);
    const auto sel = make_sel({4, 1, 9}, {0.5F, 0.3F, 0.2F});
    std::vector<std::future<std::vector<std::uint8_t>>> pending;
    for (std::size_t l = 0; l < 2; ++l) {
      for (std::size_t h = 0; h < 2; ++h) pending.push_back(channel.submit(encode_message(l, h, sel)));
    }
    pending.push_back(channel.submit(encode_message(0, 0, make_sel({99}, {1.0F}))));
    for (std::size_t i = 0; i < 4; ++i) {
      const auto out = decode_reply(pending[i].get());
      CHECK(out == store->gather_weighted_sum(i / 2, i % 2, sel));
    }
    CHECK_THROWS_AS(pending[4].get(), std::out_of_range);
    CHECK(channel.call(1, 1, sel) == store->gather_weighted_sum(1, 1, sel));
  }

  TEST_CASE("concurrent gathers on distinct heads with appends interleaved") {
    ValueStore store(1, 4, 8);
    for (std::size_t h = 0; h < 4; ++h) store.offload(0, h, testutil::random_matrix(50, 8, h));
    std::vector<std::thread> workers;
    for (std::size_t h = 0; h < 4; ++h) {
      workers.emplace_back([&store, h] {
        for (int i = 0; i < 200; ++i) {
          store.gather_weighted_sum(0, h, make_sel({0, 1, 2}, {0.2F, 0.3F, 0.5F}));
          if (i % 10 == 0) store.append_value(0, h, std::vector<float>(8, 1.0F));
        }
      });
    }
    for (auto& w : workers) w.join();
    CHECK(store.ledger().messages == 800);
    CHECK(store.ledger().bytes_weights == 800 * 3 * 2);
    for (std::size_t h = 0; h < 4; ++h) CHECK(store.rows(0, h) == 70);
  }
}
