// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "hcattn/engine.hpp"

namespace hcattn::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kRuntimeError = 1;
inline constexpr int kUsageError = 2;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

struct GenOptions {
  std::string kind = "gaussian";
  std::size_t n = 1024;
  std::size_t d = 64;
  std::size_t groups = 0;  // 0: d/2
  std::size_t clusters = 8;
  double noise = 0.0;
  double key_scale = 1.0;
  double query_scale = 1.0;
  std::uint64_t seed = 0;
  std::size_t layers = 1;
  std::size_t kv_heads = 1;
  std::size_t q_heads = 1;
  std::size_t steps = 16;
};

// Keys/values per (layer, kv-head); queries per (step, layer) as q_heads x d.
struct Dataset {
  std::size_t layers = 0;
  std::size_t kv_heads = 0;
  std::size_t q_heads = 0;
  std::size_t d = 0;
  std::size_t n = 0;
  HeadTensors keys;
  HeadTensors values;
  std::vector<std::vector<Matrix>> queries;

  std::size_t steps() const { return queries.size(); }
};

Dataset synthesize(const GenOptions& opt);
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& keys, const std::string& values,
                     const std::string& queries);

struct SessionResult {
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  std::vector<double> layer_selection_ratio;
  double mean_selection_ratio = 0.0;
  // Selected tokens / offered tokens over every message.
  double pooled_selection_ratio = 0.0;
  TransferLedger ledger;
  double predicted_weight_bytes = 0.0;
  // [step][layer] -> q_heads x d
  std::vector<std::vector<Matrix>> outputs;
};

// Prefills an engine with the dataset, decodes every query step, and scores
// the outputs against dense attention.
SessionResult run_session(const Dataset& ds, const EngineConfig& cfg,
                          std::vector<Codebook> codebooks, Pipelining mode);

double relative_l2_error(std::span<const float> approx, std::span<const float> exact);

}  // namespace hcattn::cli
