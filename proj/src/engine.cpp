// SPDX-License-Identifier: Apache-2.0
#include "hcattn/engine.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "hcattn/rng.hpp"

namespace hcattn {

void EngineConfig::validate() const {
  if (layers == 0 || q_heads == 0 || kv_heads == 0 || d == 0) {
    throw std::invalid_argument("engine: layers, heads and d must be >= 1");
  }
  if (q_heads % kv_heads != 0) {
    throw std::invalid_argument("engine: kv_heads=" + std::to_string(kv_heads) +
                                " does not divide q_heads=" + std::to_string(q_heads));
  }
  if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("engine: tau must be in (0, 1]");
  if (layers > 65536 || kv_heads > 65536) {
    throw std::invalid_argument("engine: layer/head ids must fit the 16-bit message fields");
  }
  if (quantize_keys) {
    quantizer.validate();
    if (quantizer.d != d) throw std::invalid_argument("engine: quantizer d differs from head dim");
  }
}

namespace {

void check_head_tensors(const HeadTensors& t, const EngineConfig& cfg, const char* what) {
  if (t.size() != cfg.layers) {
    throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(cfg.layers) +
                                " layers, got " + std::to_string(t.size()));
  }
  for (const auto& layer : t) {
    if (layer.size() != cfg.kv_heads) {
      throw std::invalid_argument(std::string(what) + ": expected " +
                                  std::to_string(cfg.kv_heads) + " kv-heads per layer");
    }
    for (const auto& m : layer) {
      if (m.cols != cfg.d || m.rows != layer.front().rows) {
        throw std::invalid_argument(std::string(what) + ": inconsistent head matrix shape");
      }
    }
  }
}

}  // namespace

std::vector<Codebook> train_engine_codebooks(const HeadTensors& keys, const EngineConfig& cfg) {
  cfg.validate();
  check_head_tensors(keys, cfg, "train_engine_codebooks");
  std::vector<Codebook> out;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    QuantizerConfig qc = cfg.quantizer;
    if (cfg.codebook_scope == CodebookScope::per_layer) {
      Matrix pooled(0, cfg.d);
      for (const auto& m : keys[l]) {
        pooled.data.insert(pooled.data.end(), m.data.begin(), m.data.end());
        pooled.rows += m.rows;
      }
      qc.seed = derive_seed(cfg.quantizer.seed, l);
      out.push_back(train_codebook(pooled, qc));
    } else {
      for (std::size_t h = 0; h < cfg.kv_heads; ++h) {
        qc.seed = derive_seed(cfg.quantizer.seed, l * cfg.kv_heads + h);
        out.push_back(train_codebook(keys[l][h], qc));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// DecodeState

DecodeState::DecodeState(const EngineConfig& cfg, std::vector<Codebook> codebooks)
    : cfg_(cfg), codebooks_(std::move(codebooks)) {
  cfg_.validate();
  if (cfg_.quantize_keys) {
    if (codebooks_.size() != cfg_.codebook_count()) {
      throw std::invalid_argument("prefill: expected " + std::to_string(cfg_.codebook_count()) +
                                  " codebooks, got " + std::to_string(codebooks_.size()));
    }
    for (const auto& cb : codebooks_) {
      if (!cb.trained()) throw std::invalid_argument("prefill: untrained codebook");
      const auto& qc = cb.config();
      if (qc.d != cfg_.d || qc.g != cfg_.quantizer.g || qc.c != cfg_.quantizer.c) {
        throw std::invalid_argument("prefill: codebook config does not match the engine config");
      }
    }
  }
  const std::size_t slots = cfg_.layers * cfg_.kv_heads;
  if (cfg_.quantize_keys) indices_.assign(slots, KeyIndexMatrix(0, cfg_.quantizer.g));
  recent_.assign(slots, Matrix(0, cfg_.d));
  store_ = std::make_shared<ValueStore>(cfg_.layers, cfg_.kv_heads, cfg_.d);
  channel_ = std::make_unique<HostChannel>(store_);
  stats_.resize(cfg_.layers);
}

DecodeState DecodeState::prefill(const HeadTensors& keys, const HeadTensors& values,
                                 const EngineConfig& cfg, std::vector<Codebook> codebooks) {
  DecodeState state(cfg, std::move(codebooks));
  check_head_tensors(keys, cfg, "prefill keys");
  check_head_tensors(values, cfg, "prefill values");
  if (!keys.empty() && !keys[0].empty() && !values[0].empty() &&
      keys[0][0].rows != values[0][0].rows) {
    throw std::invalid_argument("prefill: key and value token counts differ");
  }
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    for (std::size_t h = 0; h < cfg.kv_heads; ++h) {
      const Matrix& k = keys[l][h];
      const std::size_t s = state.slot(l, h);
      if (cfg.quantize_keys) {
        const std::size_t buffered = std::min(k.rows, cfg.recent_window);
        const std::size_t encoded = k.rows - buffered;
        const Codebook& cb = state.codebook(l, h);
        std::vector<std::uint16_t> idx(cb.config().g);
        for (std::size_t j = 0; j < encoded; ++j) {
          encode_row(k.row(j), cb, idx);
          state.indices_[s].append_row(idx);
        }
        for (std::size_t j = encoded; j < k.rows; ++j) state.recent_[s].append_row(k.row(j));
      } else {
        state.recent_[s] = k;
      }
      state.store_->offload(l, h, values[l][h]);
    }
  }
  return state;
}

std::size_t DecodeState::slot(std::size_t layer, std::size_t kv_head) const {
  if (layer >= cfg_.layers || kv_head >= cfg_.kv_heads) {
    throw std::out_of_range("engine: (layer " + std::to_string(layer) + ", kv-head " +
                            std::to_string(kv_head) + ") out of bounds");
  }
  return layer * cfg_.kv_heads + kv_head;
}

const Codebook& DecodeState::codebook(std::size_t layer, std::size_t kv_head) const {
  if (!cfg_.quantize_keys) throw std::logic_error("engine: keys are not quantized");
  const std::size_t s = slot(layer, kv_head);
  return cfg_.codebook_scope == CodebookScope::per_layer ? codebooks_[layer] : codebooks_[s];
}

const KeyIndexMatrix& DecodeState::key_indices(std::size_t layer, std::size_t kv_head) const {
  if (!cfg_.quantize_keys) throw std::logic_error("engine: keys are not quantized");
  return indices_[slot(layer, kv_head)];
}

const Matrix& DecodeState::recent_keys(std::size_t layer, std::size_t kv_head) const {
  return recent_[slot(layer, kv_head)];
}

std::size_t DecodeState::token_count(std::size_t layer, std::size_t kv_head) const {
  const std::size_t s = slot(layer, kv_head);
  return (cfg_.quantize_keys ? indices_[s].n : 0) + recent_[s].rows;
}

bool DecodeState::counts_consistent() const {
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    for (std::size_t h = 0; h < cfg_.kv_heads; ++h) {
      if (token_count(l, h) != store_->rows(l, h)) return false;
      if (cfg_.quantize_keys && recent_[slot(l, h)].rows > cfg_.recent_window) return false;
    }
  }
  return true;
}

void DecodeState::push_key(std::size_t s, std::span<const float> k) {
  if (!cfg_.quantize_keys) {
    recent_[s].append_row(k);
    return;
  }
  const Codebook& cb = cfg_.codebook_scope == CodebookScope::per_layer
                           ? codebooks_[s / cfg_.kv_heads]
                           : codebooks_[s];
  std::vector<std::uint16_t> idx(cb.config().g);
  Matrix& buf = recent_[s];
  if (cfg_.recent_window == 0) {
    encode_row(k, cb, idx);
    indices_[s].append_row(idx);
    return;
  }
  buf.append_row(k);
  if (buf.rows > cfg_.recent_window) {
    encode_row(buf.row(0), cb, idx);
    indices_[s].append_row(idx);
    buf.data.erase(buf.data.begin(), buf.data.begin() + static_cast<std::ptrdiff_t>(buf.cols));
    --buf.rows;
  }
}

void DecodeState::append_token(std::size_t layer, std::size_t kv_head, std::span<const float> k,
                               std::span<const float> v) {
  if (k.size() != cfg_.d || v.size() != cfg_.d) {
    throw std::invalid_argument("append_token: key/value must have d=" + std::to_string(cfg_.d) +
                                " elements");
  }
  for (float x : k) {
    if (!std::isfinite(x)) throw std::invalid_argument("append_token: non-finite key");
  }
  const std::size_t s = slot(layer, kv_head);
  store_->append_value(layer, kv_head, v);
  push_key(s, k);
}

ScoreVector DecodeState::scores(std::size_t layer, std::size_t q_head,
                                std::span<const float> q) const {
  if (q_head >= cfg_.q_heads) throw std::out_of_range("engine: query head out of range");
  if (q.size() != cfg_.d) {
    throw std::invalid_argument("engine: query has " + std::to_string(q.size()) +
                                " elements, expected d=" + std::to_string(cfg_.d));
  }
  const std::size_t kv = cfg_.kv_head_for(q_head);
  const std::size_t s = slot(layer, kv);
  ScoreVector z;
  if (cfg_.quantize_keys) {
    const LookupTable table = build_table(q, codebook(layer, kv));
    approx_scores_into(table, indices_[s], z.scores);
  }
  const Matrix& buf = recent_[s];
  z.scores.reserve(z.scores.size() + buf.rows);
  for (std::size_t j = 0; j < buf.rows; ++j) {
    z.scores.push_back(static_cast<float>(dot(q, buf.row(j))));
  }
  return z;
}

EvictionSelection DecodeState::selection(std::size_t layer, std::size_t q_head,
                                         std::span<const float> q) const {
  ScoreVector z = scores(layer, q_head, q);
  if (z.scores.empty()) throw std::invalid_argument("decode: empty cache");
  z = normalize(std::move(z), cfg_.d);
  EvictionSelection sel = select(*z.weights, cfg_.tau);
  if (cfg_.renormalize) {
    double total = 0.0;
    for (float w : sel.weights) total += w;
    for (float& w : sel.weights) w = static_cast<float>(w / total);
  }
  return sel;
}

std::vector<std::future<std::vector<std::uint8_t>>> DecodeState::dispatch_layer(
    const Matrix& queries, std::size_t layer) {
  if (layer >= cfg_.layers) throw std::out_of_range("decode: layer out of range");
  if (queries.rows != cfg_.q_heads || queries.cols != cfg_.d) {
    throw std::invalid_argument("decode: queries must be q_heads x d");
  }
  std::vector<std::future<std::vector<std::uint8_t>>> replies;
  replies.reserve(cfg_.q_heads);
  auto& st = stats_[layer];
  for (std::size_t h = 0; h < cfg_.q_heads; ++h) {
    const EvictionSelection sel = selection(layer, h, queries.row(h));
    st.queries += 1;
    st.selected += sel.k_star();
    st.tokens += sel.n;
    st.ratio_sum += selection_ratio(sel);
    replies.push_back(channel_->submit(encode_message(layer, cfg_.kv_head_for(h), sel)));
  }
  return replies;
}

Matrix DecodeState::decode_step(const Matrix& queries, std::size_t layer) {
  auto replies = dispatch_layer(queries, layer);
  Matrix out(0, cfg_.d);
  for (auto& r : replies) out.append_row(decode_reply(r.get()));
  ++steps_;
  return out;
}

std::vector<Matrix> DecodeState::decode_layers(const std::vector<Matrix>& queries,
                                               Pipelining mode) {
  if (queries.size() != cfg_.layers) {
    throw std::invalid_argument("decode_layers: need one query block per layer");
  }
  std::vector<Matrix> out(cfg_.layers, Matrix(0, cfg_.d));
  std::vector<std::vector<std::future<std::vector<std::uint8_t>>>> pending(cfg_.layers);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    pending[l] = dispatch_layer(queries[l], l);
    if (mode == Pipelining::sequential) {
      for (auto& r : pending[l]) out[l].append_row(decode_reply(r.get()));
    }
  }
  if (mode == Pipelining::overlapped) {
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      for (auto& r : pending[l]) out[l].append_row(decode_reply(r.get()));
    }
  }
  ++steps_;
  return out;
}

// ---------------------------------------------------------------------------
// Dense references

namespace {

// Softmax-weighted value sum over the listed token rows.
std::vector<float> attend(std::span<const float> q, const Matrix& keys, const Matrix& values,
                          std::span<const std::size_t> tokens) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size()));
  std::vector<double> z(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) z[i] = dot(q, keys.row(tokens[i]));
  const double top = *std::max_element(z.begin(), z.end());
  std::vector<double> e(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    e[i] = std::exp((z[i] - top) * scale);
    total += e[i];
  }
  std::vector<double> acc(values.cols, 0.0);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double w = static_cast<float>(e[i] / total);
    const auto v = values.row(tokens[i]);
    for (std::size_t t = 0; t < acc.size(); ++t) acc[t] += w * v[t];
  }
  return {acc.begin(), acc.end()};
}

}  // namespace

std::vector<float> exact_attention(std::span<const float> q, const Matrix& keys,
                                   const Matrix& values) {
  if (keys.rows == 0) throw std::invalid_argument("exact_attention: empty key matrix");
  if (keys.cols != q.size() || values.rows != keys.rows) {
    throw std::invalid_argument("exact_attention: shape mismatch");
  }
  std::vector<std::size_t> all(keys.rows);
  for (std::size_t j = 0; j < all.size(); ++j) all[j] = j;
  return attend(q, keys, values, all);
}

Matrix blockwise_prefill(const Matrix& keys, const Matrix& values, const Matrix& queries,
                         std::size_t block_size) {
  if (block_size == 0) throw std::invalid_argument("blockwise_prefill: block_size must be >= 1");
  if (keys.rows != values.rows || keys.rows != queries.rows || keys.cols != queries.cols ||
      keys.rows == 0) {
    throw std::invalid_argument("blockwise_prefill: shape mismatch");
  }
  Matrix out(0, values.cols);
  std::vector<std::size_t> tokens;
  for (std::size_t t = 0; t < queries.rows; ++t) {
    const std::size_t block_start = (t / block_size) * block_size;
    tokens.clear();
    // Anchor block first, then the current block up to t.
    const std::size_t anchor_end = std::min(block_size, block_start);
    for (std::size_t j = 0; j < anchor_end; ++j) tokens.push_back(j);
    for (std::size_t j = block_start; j <= t; ++j) tokens.push_back(j);
    out.append_row(attend(queries.row(t), keys, values, tokens));
  }
  return out;
}

}  // namespace hcattn
