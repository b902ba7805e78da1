// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "hcattn/eviction.hpp"
#include "hcattn/matrix.hpp"
#include "hcattn/quantizer.hpp"
#include "hcattn/score_engine.hpp"
#include "hcattn/value_store.hpp"

namespace hcattn {

enum class CodebookScope { per_layer, per_head };

struct EngineConfig {
  std::size_t layers = 1;
  std::size_t q_heads = 1;
  std::size_t kv_heads = 1;
  std::size_t d = 128;
  double tau = 0.9;
  QuantizerConfig quantizer;
  std::size_t recent_window = 0;
  bool quantize_keys = true;
  // Rescale surviving weights to sum to 1 before the gather. Off by default:
  // the weighted sum uses the raw softmax weights of the kept tokens.
  bool renormalize = false;
  CodebookScope codebook_scope = CodebookScope::per_layer;

  void validate() const;
  std::size_t kv_head_for(std::size_t q_head) const { return q_head * kv_heads / q_heads; }
  std::size_t codebook_count() const {
    return codebook_scope == CodebookScope::per_layer ? layers : layers * kv_heads;
  }
};

// [layer][kv_head] -> n x d
using HeadTensors = std::vector<std::vector<Matrix>>;

// Trains the codebooks the engine expects for cfg.codebook_scope. Per-layer
// codebooks pool the keys of every kv-head in the layer.
std::vector<Codebook> train_engine_codebooks(const HeadTensors& keys, const EngineConfig& cfg);

enum class Pipelining { sequential, overlapped };

struct LayerSelectionStats {
  std::uint64_t queries = 0;
  std::uint64_t selected = 0;
  std::uint64_t tokens = 0;
  double ratio_sum = 0.0;

  double mean_ratio() const { return queries == 0 ? 0.0 : ratio_sum / static_cast<double>(queries); }
};

// Device-side cache state plus the host domain it talks to. The device half
// holds only codebooks, index matrices and the unquantized recent-key buffer;
// values live in the ValueStore behind the HostChannel.
class DecodeState {
 public:
  static DecodeState prefill(const HeadTensors& keys, const HeadTensors& values,
                             const EngineConfig& cfg, std::vector<Codebook> codebooks);

  void append_token(std::size_t layer, std::size_t kv_head, std::span<const float> k,
                    std::span<const float> v);

  // queries: q_heads x d. Returns q_heads x d outputs.
  Matrix decode_step(const Matrix& queries, std::size_t layer);

  // One decode step over every layer; queries[layer] is q_heads x d. In
  // overlapped mode the host gathers of layer l run while the device scores
  // layer l+1.
  std::vector<Matrix> decode_layers(const std::vector<Matrix>& queries, Pipelining mode);

  // Unnormalized scores for one query head: quantized tokens first, then the
  // recent buffer.
  ScoreVector scores(std::size_t layer, std::size_t q_head, std::span<const float> q) const;
  EvictionSelection selection(std::size_t layer, std::size_t q_head,
                              std::span<const float> q) const;

  const EngineConfig& config() const { return cfg_; }
  const Codebook& codebook(std::size_t layer, std::size_t kv_head) const;
  const KeyIndexMatrix& key_indices(std::size_t layer, std::size_t kv_head) const;
  const Matrix& recent_keys(std::size_t layer, std::size_t kv_head) const;
  std::size_t token_count(std::size_t layer, std::size_t kv_head) const;
  const ValueStore& value_store() const { return *store_; }
  TransferLedger ledger() const { return store_->ledger(); }
  const std::vector<LayerSelectionStats>& layer_stats() const { return stats_; }
  std::uint64_t steps() const { return steps_; }

  // Index rows + buffered rows == stored value rows, for every (layer, kv-head).
  bool counts_consistent() const;

 private:
  DecodeState(const EngineConfig& cfg, std::vector<Codebook> codebooks);

  std::size_t slot(std::size_t layer, std::size_t kv_head) const;
  void push_key(std::size_t s, std::span<const float> k);
  std::vector<std::future<std::vector<std::uint8_t>>> dispatch_layer(const Matrix& queries,
                                                                      std::size_t layer);

  EngineConfig cfg_;
  std::vector<Codebook> codebooks_;
  std::vector<KeyIndexMatrix> indices_;
  // Unquantized keys: the recent window, or every key when quantize_keys is off.
  std::vector<Matrix> recent_;
  std::shared_ptr<ValueStore> store_;
  std::unique_ptr<HostChannel> channel_;
  std::vector<LayerSelectionStats> stats_;
  std::uint64_t steps_ = 0;
};

// Dense softmax(q K^T / sqrt(d)) V. The reference every approximation is
// checked against.
std::vector<float> exact_attention(std::span<const float> q, const Matrix& keys,
                                   const Matrix& values);

// Prompt processing where token t of block b attends causally to the anchor
// block (block 0) and to block b only. Rows of queries/keys/values are tokens.
Matrix blockwise_prefill(const Matrix& keys, const Matrix& values, const Matrix& queries,
                         std::size_t block_size);

}  // namespace hcattn
