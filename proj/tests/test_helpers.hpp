// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "hcattn/matrix.hpp"
#include "hcattn/tensor_io.hpp"

namespace testutil {

// Unique scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("hcattn_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<char> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline hcattn::Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                                    float scale = 1.0F) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<float> dist(0.0F, scale);
  hcattn::Matrix m(rows, cols);
  for (auto& v : m.data) v = dist(gen);
  return m;
}

inline hcattn::Matrix planted_keys(std::size_t n, std::size_t d, std::size_t groups,
                                   std::size_t clusters, std::uint64_t seed, double scale = 1.0) {
  hcattn::SyntheticSpec s;
  s.kind = hcattn::SyntheticSpec::Kind::planted_clusters;
  s.n = n;
  s.d = d;
  s.groups = groups;
  s.clusters_per_group = clusters;
  s.seed = seed;
  s.scale = scale;
  return hcattn::to_matrix(hcattn::gen_synthetic(s));
}

}  // namespace testutil
