// SPDX-License-Identifier: Apache-2.0
#include "hcattn/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>

#include "hcattn/rng.hpp"
#include "hcattn/tensor_io.hpp"

namespace hcattn {

void QuantizerConfig::validate() const {
  if (d == 0 || g == 0) throw std::invalid_argument("quantizer: d and g must be >= 1");
  if (d % g != 0) {
    throw std::invalid_argument("quantizer: g=" + std::to_string(g) +
                                " does not divide d=" + std::to_string(d));
  }
  if (c < 1 || c > kMaxCentroids) {
    throw std::invalid_argument("quantizer: c must be in [1, 65536], got " +
                                std::to_string(c));
  }
  if (kmeans_batch_size == 0 || kmeans_max_iters == 0) {
    throw std::invalid_argument("quantizer: k-means batch size and iterations must be >= 1");
  }
}

Codebook::Codebook(QuantizerConfig cfg, std::vector<float> centroids, double inertia)
    : cfg_(cfg), centroids_(std::move(centroids)), inertia_(inertia) {
  cfg_.validate();
  if (centroids_.size() != cfg_.g * cfg_.c * cfg_.sub_dim()) {
    throw std::invalid_argument("codebook: centroid array does not match g x c x d/g");
  }
  for (float v : centroids_) {
    if (!std::isfinite(v)) throw std::invalid_argument("codebook: non-finite centroid");
  }
}

void KeyIndexMatrix::append_row(std::span<const std::uint16_t> r) {
  if (r.size() != g) throw std::invalid_argument("index row width mismatch");
  indices.insert(indices.end(), r.begin(), r.end());
  ++n;
}

// ---------------------------------------------------------------------------
// k-means

namespace {

float sq_dist(const float* a, const float* b, std::size_t dim) {
  float acc = 0.0F;
  for (std::size_t t = 0; t < dim; ++t) {
    const float diff = a[t] - b[t];
    acc += diff * diff;
  }
  return acc;
}

std::size_t nearest(const float* x, const std::vector<float>& centers,
                    std::size_t k, std::size_t dim, float* best_dist) {
  std::size_t best = 0;
  float best_d = std::numeric_limits<float>::infinity();
  for (std::size_t m = 0; m < k; ++m) {
    const float dd = sq_dist(x, &centers[m * dim], dim);
    if (dd < best_d) {
      best_d = dd;
      best = m;
    }
  }
  if (best_dist != nullptr) *best_dist = best_d;
  return best;
}

double mean_inertia(std::span<const float> points, std::size_t dim,
                    const std::vector<float>& centers, std::size_t k) {
  const std::size_t n = points.size() / dim;
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    float dd = 0.0F;
    nearest(&points[j * dim], centers, k, dim, &dd);
    total += dd;
  }
  return total / static_cast<double>(n);
}

std::vector<float> kmeans_pp(std::span<const float> points, std::size_t dim,
                             std::size_t k, Rng& rng) {
  const std::size_t n = points.size() / dim;
  std::vector<float> centers(k * dim);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());

  auto place = [&](std::size_t m, std::size_t j) {
    std::copy_n(&points[j * dim], dim, &centers[m * dim]);
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], static_cast<double>(sq_dist(&points[i * dim], &centers[m * dim], dim)));
    }
  };

  place(0, rng.below(n));
  for (std::size_t m = 1; m < k; ++m) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = 0;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double run = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        run += d2[i];
        if (run > target && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      // Every point already coincides with a center.
      pick = rng.below(n);
    }
    place(m, pick);
  }
  return centers;
}

// Improvement on the smoothed batch inertia must exceed this relative amount
// to reset the no-improvement counter.
constexpr double kImprovementTol = 1e-6;
constexpr std::size_t kMaxNoImprovement = 10;

KMeansTrace run_minibatch(std::span<const float> points, std::size_t dim,
                          std::size_t k, std::size_t batch_size,
                          std::size_t max_iters, Rng& rng,
                          std::vector<float>& centers) {
  const std::size_t n = points.size() / dim;
  KMeansTrace trace;
  trace.init_inertia = mean_inertia(points, dim, centers, k);
  const std::vector<float> init = centers;

  const bool full_batch = batch_size >= n;
  const std::size_t b = full_batch ? n : batch_size;
  std::vector<std::size_t> batch(b);
  std::vector<std::size_t> labels(b), prev_labels;
  std::vector<std::uint64_t> counts(k, 0);
  double smoothed = std::numeric_limits<double>::infinity();
  double best = std::numeric_limits<double>::infinity();
  std::size_t no_improvement = 0;

  for (std::size_t it = 0; it < max_iters; ++it) {
    if (full_batch) {
      for (std::size_t j = 0; j < n; ++j) batch[j] = j;
    } else {
      for (auto& j : batch) j = rng.below(n);
    }
    double batch_inertia = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      float dd = 0.0F;
      labels[j] = nearest(&points[batch[j] * dim], centers, k, dim, &dd);
      batch_inertia += dd;
    }
    batch_inertia /= static_cast<double>(b);

    for (std::size_t j = 0; j < b; ++j) {
      const std::size_t m = labels[j];
      const float eta = 1.0F / static_cast<float>(++counts[m]);
      float* c = &centers[m * dim];
      const float* x = &points[batch[j] * dim];
      for (std::size_t t = 0; t < dim; ++t) c[t] += eta * (x[t] - c[t]);
    }

    bool reseeded = false;
    for (std::size_t m = 0; m < k; ++m) {
      if (counts[m] == 0) {
        std::copy_n(&points[rng.below(n) * dim], dim, &centers[m * dim]);
        reseeded = true;
      }
    }
    trace.iterations = it + 1;

    if (full_batch) {
      if (!reseeded && labels == prev_labels) break;
      prev_labels = labels;
    }
    smoothed = std::isinf(smoothed)
                   ? batch_inertia
                   : smoothed + (batch_inertia - smoothed) * std::min(1.0, 2.0 * b / (n + 1.0));
    if (smoothed < best * (1.0 - kImprovementTol)) {
      best = smoothed;
      no_improvement = 0;
    } else if (++no_improvement >= kMaxNoImprovement) {
      break;
    }
  }

  trace.final_inertia = mean_inertia(points, dim, centers, k);
  if (trace.final_inertia > trace.init_inertia) {
    // Mini-batch steps can overshoot; keep the better candidate.
    centers = init;
    trace.final_inertia = trace.init_inertia;
  }
  return trace;
}

}  // namespace

KMeansResult minibatch_kmeans(std::span<const float> points, std::size_t dim,
                              std::size_t k, std::size_t batch_size,
                              std::size_t max_iters, std::size_t restarts,
                              std::uint64_t seed) {
  if (dim == 0 || points.size() % dim != 0) {
    throw std::invalid_argument("kmeans: point buffer is not a multiple of dim");
  }
  const std::size_t n = points.size() / dim;
  if (k == 0 || n < k) {
    throw std::invalid_argument("kmeans: need at least k=" + std::to_string(k) +
                                " points, got " + std::to_string(n));
  }
  KMeansResult result;
  result.inertia = std::numeric_limits<double>::infinity();
  const std::size_t runs = std::max<std::size_t>(1, restarts);
  for (std::size_t r = 0; r < runs; ++r) {
    Rng rng(derive_seed(seed, r));
    std::vector<float> centers = kmeans_pp(points, dim, k, rng);
    const KMeansTrace trace = run_minibatch(points, dim, k, batch_size, max_iters, rng, centers);
    result.restarts.push_back(trace);
    if (trace.final_inertia < result.inertia) {
      result.inertia = trace.final_inertia;
      result.centers = std::move(centers);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Codebook training

namespace {

void check_finite(const Matrix& m, const char* what) {
  for (float v : m.data) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite input");
  }
}

std::vector<float> group_columns(const Matrix& keys, std::size_t group, std::size_t sub) {
  std::vector<float> out(keys.rows * sub);
  for (std::size_t j = 0; j < keys.rows; ++j) {
    std::copy_n(keys.row(j).data() + group * sub, sub, &out[j * sub]);
  }
  return out;
}

template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const std::size_t workers =
      std::min<std::size_t>(count, std::max(1U, std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

Codebook train_codebook(const Matrix& keys, const QuantizerConfig& cfg) {
  return train_codebook(keys, cfg, nullptr);
}

Codebook train_codebook(const Matrix& keys, const QuantizerConfig& cfg,
                        std::vector<std::vector<KMeansTrace>>* traces) {
  cfg.validate();
  if (keys.cols != cfg.d) {
    throw std::invalid_argument("train_codebook: keys have " + std::to_string(keys.cols) +
                                " columns, config d=" + std::to_string(cfg.d));
  }
  if (keys.rows < cfg.c) {
    throw std::invalid_argument("train_codebook: n_val=" + std::to_string(keys.rows) +
                                " < c=" + std::to_string(cfg.c));
  }
  check_finite(keys, "train_codebook");

  const std::size_t sub = cfg.sub_dim();
  const std::size_t slice = cfg.c * sub;
  std::vector<float> centroids(cfg.g * slice);

  if (cfg.shared_codebook) {
    std::vector<float> pooled;
    pooled.reserve(keys.rows * cfg.d);
    for (std::size_t i = 0; i < cfg.g; ++i) {
      const auto cols = group_columns(keys, i, sub);
      pooled.insert(pooled.end(), cols.begin(), cols.end());
    }
    auto res = minibatch_kmeans(pooled, sub, cfg.c, cfg.kmeans_batch_size,
                                cfg.kmeans_max_iters, cfg.kmeans_restarts, cfg.seed);
    for (std::size_t i = 0; i < cfg.g; ++i) {
      std::copy(res.centers.begin(), res.centers.end(), centroids.begin() + i * slice);
    }
    if (traces != nullptr) *traces = {res.restarts};
  } else {
    std::vector<std::vector<KMeansTrace>> per_group(cfg.g);
    parallel_for(cfg.g, [&](std::size_t i) {
      const auto cols = group_columns(keys, i, sub);
      auto res = minibatch_kmeans(cols, sub, cfg.c, cfg.kmeans_batch_size,
                                  cfg.kmeans_max_iters, cfg.kmeans_restarts,
                                  derive_seed(cfg.seed, 0x100 + i));
      std::copy(res.centers.begin(), res.centers.end(), centroids.begin() + i * slice);
      per_group[i] = std::move(res.restarts);
    });
    if (traces != nullptr) *traces = std::move(per_group);
  }

  Codebook cb(cfg, std::move(centroids), 0.0);
  const double inertia = quantization_error(keys, cb);
  return Codebook(cfg, std::vector<float>(cb.centroids().begin(), cb.centroids().end()), inertia);
}

// ---------------------------------------------------------------------------
// Encode / reconstruct

std::uint16_t nearest_centroid(const Codebook& cb, std::size_t group,
                               std::span<const float> sub) {
  const std::size_t c = cb.config().c;
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < c; ++m) {
    const auto cent = cb.centroid(group, m);
    double dd = 0.0;
    for (std::size_t t = 0; t < sub.size(); ++t) {
      const double diff = static_cast<double>(sub[t]) - static_cast<double>(cent[t]);
      dd += diff * diff;
    }
    if (dd < best_d) {
      best_d = dd;
      best = m;
    }
  }
  return static_cast<std::uint16_t>(best);
}

void encode_row(std::span<const float> key, const Codebook& cb, std::span<std::uint16_t> out) {
  const auto& cfg = cb.config();
  if (key.size() != cfg.d || out.size() != cfg.g) {
    throw std::invalid_argument("encode: key has " + std::to_string(key.size()) +
                                " elements, codebook expects d=" + std::to_string(cfg.d));
  }
  const std::size_t sub = cfg.sub_dim();
  for (std::size_t i = 0; i < cfg.g; ++i) {
    out[i] = nearest_centroid(cb, i, key.subspan(i * sub, sub));
  }
}

KeyIndexMatrix encode(const Matrix& keys, const Codebook& cb) {
  if (!cb.trained()) throw std::invalid_argument("encode: untrained codebook");
  if (keys.cols != cb.config().d) {
    throw std::invalid_argument("encode: dimension mismatch");
  }
  check_finite(keys, "encode");
  KeyIndexMatrix p(keys.rows, cb.config().g);
  for (std::size_t j = 0; j < keys.rows; ++j) encode_row(keys.row(j), cb, p.row(j));
  return p;
}

void reconstruct_row(std::span<const std::uint16_t> idx, const Codebook& cb,
                     std::span<float> out) {
  const auto& cfg = cb.config();
  const std::size_t sub = cfg.sub_dim();
  for (std::size_t i = 0; i < cfg.g; ++i) {
    if (idx[i] >= cfg.c) {
      throw std::out_of_range("reconstruct: index " + std::to_string(idx[i]) +
                              " >= c=" + std::to_string(cfg.c));
    }
    const auto cent = cb.centroid(i, idx[i]);
    std::copy(cent.begin(), cent.end(), out.begin() + i * sub);
  }
}

Matrix reconstruct(const KeyIndexMatrix& p, const Codebook& cb) {
  if (p.g != cb.config().g) throw std::invalid_argument("reconstruct: group count mismatch");
  Matrix out(p.n, cb.config().d);
  for (std::size_t j = 0; j < p.n; ++j) reconstruct_row(p.row(j), cb, out.row(j));
  return out;
}

double quantization_error(const Matrix& keys, const Codebook& cb) {
  const auto& cfg = cb.config();
  if (keys.cols != cfg.d) throw std::invalid_argument("quantization_error: dimension mismatch");
  if (keys.rows == 0) return 0.0;
  std::vector<std::uint16_t> idx(cfg.g);
  std::vector<float> approx(cfg.d);
  double total = 0.0;
  for (std::size_t j = 0; j < keys.rows; ++j) {
    encode_row(keys.row(j), cb, idx);
    reconstruct_row(idx, cb, approx);
    const auto row = keys.row(j);
    for (std::size_t t = 0; t < cfg.d; ++t) {
      const double diff = static_cast<double>(row[t]) - static_cast<double>(approx[t]);
      total += diff * diff;
    }
  }
  return total / static_cast<double>(keys.rows);
}

// ---------------------------------------------------------------------------
// HCCB files

namespace {
constexpr char kCodebookMagic[4] = {'H', 'C', 'C', 'B'};
constexpr std::uint32_t kCodebookVersion = 1;
}  // namespace

void write_codebook(const std::filesystem::path& path, const Codebook& cb) {
  if (!cb.trained()) throw std::invalid_argument("write_codebook: untrained codebook");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::io, "cannot open " + path.string());
  const auto& cfg = cb.config();
  out.write(kCodebookMagic, 4);
  le::put_u32(out, kCodebookVersion);
  le::put_u32(out, static_cast<std::uint32_t>(cfg.d));
  le::put_u32(out, static_cast<std::uint32_t>(cfg.g));
  le::put_u32(out, static_cast<std::uint32_t>(cfg.c));
  le::put_u8(out, cfg.shared_codebook ? 1 : 0);
  le::put_u32(out, static_cast<std::uint32_t>(cfg.kmeans_batch_size));
  le::put_u32(out, static_cast<std::uint32_t>(cfg.kmeans_max_iters));
  le::put_u32(out, static_cast<std::uint32_t>(cfg.kmeans_restarts));
  le::put_u64(out, cfg.seed);
  le::put_f64(out, cb.inertia());
  write_tensor(out, TensorDump::from_floats({cfg.g, cfg.c, cfg.sub_dim()},
                                            {cb.centroids().begin(), cb.centroids().end()}));
  out.flush();
  if (!out) throw FormatError(FormatError::Kind::io, "write failed: " + path.string());
}

Codebook read_codebook(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::io, "cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (!in) throw FormatError(FormatError::Kind::truncated, "truncated codebook header");
  if (std::memcmp(magic, kCodebookMagic, 4) != 0) {
    throw FormatError(FormatError::Kind::bad_magic, "bad magic: not an HCCB codebook");
  }
  if (const auto v = le::get_u32(in); v != kCodebookVersion) {
    throw FormatError(FormatError::Kind::unsupported_version,
                      "unsupported codebook version " + std::to_string(v));
  }
  QuantizerConfig cfg;
  cfg.d = le::get_u32(in);
  cfg.g = le::get_u32(in);
  cfg.c = le::get_u32(in);
  cfg.shared_codebook = le::get_u8(in) != 0;
  cfg.kmeans_batch_size = le::get_u32(in);
  cfg.kmeans_max_iters = le::get_u32(in);
  cfg.kmeans_restarts = le::get_u32(in);
  cfg.seed = le::get_u64(in);
  const double inertia = le::get_f64(in);
  if (!in) throw FormatError(FormatError::Kind::truncated, "truncated codebook header");
  const TensorDump t = read_tensor(in);
  if (t.dtype != DType::f32 || t.shape != std::vector<std::uint64_t>{cfg.g, cfg.c, cfg.d / std::max<std::size_t>(cfg.g, 1)}) {
    throw std::invalid_argument("codebook payload shape does not match its header");
  }
  return Codebook(cfg, std::get<std::vector<float>>(t.data), inertia);
}

}  // namespace hcattn
