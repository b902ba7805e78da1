// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "hcattn/matrix.hpp"

namespace hcattn {

struct QuantizerConfig {
  std::size_t d = 128;
  std::size_t g = 64;
  std::size_t c = 256;
  bool shared_codebook = false;
  std::size_t kmeans_batch_size = 10000;
  std::size_t kmeans_max_iters = 200;
  std::size_t kmeans_restarts = 3;
  std::uint64_t seed = 0;

  std::size_t sub_dim() const { return d / g; }
  void validate() const;

  friend bool operator==(const QuantizerConfig&, const QuantizerConfig&) = default;
};

inline constexpr std::size_t kMaxCentroids = 65536;

// Grouped-VQ codebook: g slices of c centroids, each of dimension d/g.
class Codebook {
 public:
  Codebook() = default;
  Codebook(QuantizerConfig cfg, std::vector<float> centroids, double inertia);

  const QuantizerConfig& config() const { return cfg_; }
  std::span<const float> centroids() const { return centroids_; }
  // Centroid m of group i.
  std::span<const float> centroid(std::size_t group, std::size_t m) const {
    const std::size_t sub = cfg_.sub_dim();
    return {centroids_.data() + (group * cfg_.c + m) * sub, sub};
  }
  double inertia() const { return inertia_; }
  bool trained() const { return !centroids_.empty(); }

  friend bool operator==(const Codebook&, const Codebook&) = default;

 private:
  QuantizerConfig cfg_;
  std::vector<float> centroids_;
  double inertia_ = 0.0;
};

// Centroid indices, n rows of g entries.
struct KeyIndexMatrix {
  std::size_t n = 0;
  std::size_t g = 0;
  std::vector<std::uint16_t> indices;

  KeyIndexMatrix() = default;
  KeyIndexMatrix(std::size_t rows, std::size_t groups)
      : n(rows), g(groups), indices(rows * groups, 0) {}

  std::span<const std::uint16_t> row(std::size_t j) const {
    return {indices.data() + j * g, g};
  }
  std::span<std::uint16_t> row(std::size_t j) { return {indices.data() + j * g, g}; }
  void append_row(std::span<const std::uint16_t> r);

  friend bool operator==(const KeyIndexMatrix&, const KeyIndexMatrix&) = default;
};

// Per-restart diagnostics from k-means, exposed for tests.
struct KMeansTrace {
  double init_inertia = 0.0;
  double final_inertia = 0.0;
  std::size_t iterations = 0;
};

struct KMeansResult {
  std::vector<float> centers;  // k x dim
  double inertia = 0.0;        // mean squared distance per point
  std::vector<KMeansTrace> restarts;
};

// Mini-batch k-means (per-center learning rate 1/count) with k-means++
// seeding. points is n x dim row-major. Keeps the lowest-inertia restart.
KMeansResult minibatch_kmeans(std::span<const float> points, std::size_t dim,
                              std::size_t k, std::size_t batch_size,
                              std::size_t max_iters, std::size_t restarts,
                              std::uint64_t seed);

Codebook train_codebook(const Matrix& keys, const QuantizerConfig& cfg);

// Restarts per group are reported in group order (one entry when shared).
Codebook train_codebook(const Matrix& keys, const QuantizerConfig& cfg,
                        std::vector<std::vector<KMeansTrace>>* traces);

// Nearest centroid of one group, ties to the lowest index.
std::uint16_t nearest_centroid(const Codebook& cb, std::size_t group,
                               std::span<const float> sub);

void encode_row(std::span<const float> key, const Codebook& cb,
                std::span<std::uint16_t> out);
KeyIndexMatrix encode(const Matrix& keys, const Codebook& cb);

void reconstruct_row(std::span<const std::uint16_t> idx, const Codebook& cb,
                     std::span<float> out);
Matrix reconstruct(const KeyIndexMatrix& p, const Codebook& cb);

// Mean over rows of the squared L2 distance to the quantized row.
double quantization_error(const Matrix& keys, const Codebook& cb);

// HCCB codebook files.
void write_codebook(const std::filesystem::path& path, const Codebook& cb);
Codebook read_codebook(const std::filesystem::path& path);

}  // namespace hcattn
