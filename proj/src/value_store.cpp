// SPDX-License-Identifier: Apache-2.0
#include "hcattn/value_store.hpp"

#include <bit>
#include <cmath>
#include <stdexcept>
#include <string>

namespace hcattn {

ValueStore::ValueStore(std::size_t layers, std::size_t heads, std::size_t d)
    : layers_(layers), heads_(heads), d_(d) {
  if (layers == 0 || heads == 0 || d == 0) {
    throw std::invalid_argument("value store: layers, heads and d must be >= 1");
  }
  slots_.reserve(layers * heads);
  for (std::size_t i = 0; i < layers * heads; ++i) {
    auto s = std::make_unique<Slot>();
    s->values = Matrix(0, d);
    slots_.push_back(std::move(s));
  }
}

ValueStore::Slot& ValueStore::slot(std::size_t layer, std::size_t head) {
  return const_cast<Slot&>(std::as_const(*this).slot(layer, head));
}

const ValueStore::Slot& ValueStore::slot(std::size_t layer, std::size_t head) const {
  if (layer >= layers_ || head >= heads_) {
    throw std::out_of_range("value store: (layer " + std::to_string(layer) + ", head " +
                            std::to_string(head) + ") out of bounds");
  }
  return *slots_[layer * heads_ + head];
}

void ValueStore::offload(std::size_t layer, std::size_t head, const Matrix& v) {
  if (v.cols != d_ && !(v.rows == 0)) {
    throw std::invalid_argument("offload: value rows have " + std::to_string(v.cols) +
                                " columns, store expects " + std::to_string(d_));
  }
  for (float x : v.data) {
    if (!std::isfinite(x)) throw std::invalid_argument("offload: non-finite value");
  }
  auto& s = slot(layer, head);
  std::lock_guard lock(s.mu);
  s.values.data.insert(s.values.data.end(), v.data.begin(), v.data.end());
  s.values.rows += v.rows;
}

void ValueStore::append_value(std::size_t layer, std::size_t head, std::span<const float> v) {
  if (v.size() != d_) {
    throw std::invalid_argument("append_value: vector has " + std::to_string(v.size()) +
                                " elements, store expects " + std::to_string(d_));
  }
  for (float x : v) {
    if (!std::isfinite(x)) throw std::invalid_argument("append_value: non-finite value");
  }
  auto& s = slot(layer, head);
  std::lock_guard lock(s.mu);
  s.values.append_row(v);
}

std::vector<float> ValueStore::gather_weighted_sum(std::size_t layer, std::size_t head,
                                                   const EvictionSelection& sel) {
  if (sel.indices.empty()) throw std::invalid_argument("gather: empty selection");
  if (sel.indices.size() != sel.weights.size()) {
    throw std::invalid_argument("gather: indices and weights differ in length");
  }
  std::vector<double> acc(d_, 0.0);
  {
    const auto& s = slot(layer, head);
    std::lock_guard lock(s.mu);
    for (std::size_t i = 0; i < sel.indices.size(); ++i) {
      const std::uint32_t j = sel.indices[i];
      if (j >= s.values.rows) {
        throw std::out_of_range("gather: token " + std::to_string(j) + " >= " +
                                std::to_string(s.values.rows) + " stored rows");
      }
      const double w = sel.weights[i];
      const auto row = s.values.row(j);
      for (std::size_t t = 0; t < d_; ++t) acc[t] += w * row[t];
    }
  }
  const auto k = static_cast<std::uint64_t>(sel.indices.size());
  bytes_weights_ += k * kWeightWireBytes;
  bytes_indices_ += k * kIndexWireBytes;
  ++messages_;
  return {acc.begin(), acc.end()};
}

std::size_t ValueStore::rows(std::size_t layer, std::size_t head) const {
  const auto& s = slot(layer, head);
  std::lock_guard lock(s.mu);
  return s.values.rows;
}

std::vector<float> ValueStore::value_row(std::size_t layer, std::size_t head,
                                         std::size_t j) const {
  const auto& s = slot(layer, head);
  std::lock_guard lock(s.mu);
  if (j >= s.values.rows) throw std::out_of_range("value_row: row out of range");
  const auto r = s.values.row(j);
  return {r.begin(), r.end()};
}

TransferLedger ValueStore::ledger() const {
  return {bytes_weights_.load(), bytes_indices_.load(), messages_.load()};
}

// ---------------------------------------------------------------------------
// Wire format

namespace {

void put32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

void put16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b_[pos_ + static_cast<std::size_t>(i)];
    pos_ += 4;
    return v;
  }
  std::uint16_t u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>(b_[pos_] | (b_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw std::invalid_argument("channel message truncated");
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_message(std::size_t layer, std::size_t head,
                                         const EvictionSelection& sel) {
  if (layer > UINT16_MAX || head > UINT16_MAX) {
    throw std::invalid_argument("encode_message: layer/head exceed 16 bits");
  }
  std::vector<std::uint8_t> out;
  out.reserve(8 + sel.k_star() * 8);
  put16(out, static_cast<std::uint16_t>(layer));
  put16(out, static_cast<std::uint16_t>(head));
  put32(out, static_cast<std::uint32_t>(sel.k_star()));
  for (auto i : sel.indices) put32(out, i);
  for (float w : sel.weights) put32(out, std::bit_cast<std::uint32_t>(w));
  return out;
}

SelectionMessage decode_message(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  SelectionMessage m;
  m.layer = r.u16();
  m.head = r.u16();
  const std::uint32_t k = r.u32();
  r.need(static_cast<std::size_t>(k) * 8);
  m.indices.resize(k);
  m.weights.resize(k);
  for (auto& i : m.indices) i = r.u32();
  for (auto& w : m.weights) w = std::bit_cast<float>(r.u32());
  if (!r.done()) throw std::invalid_argument("channel message has trailing bytes");
  return m;
}

std::vector<std::uint8_t> encode_reply(std::span<const float> output) {
  std::vector<std::uint8_t> out;
  out.reserve(output.size() * 4);
  for (float v : output) put32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

std::vector<float> decode_reply(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % 4 != 0) throw std::invalid_argument("channel reply truncated");
  Reader r(bytes);
  std::vector<float> out(bytes.size() / 4);
  for (auto& v : out) v = std::bit_cast<float>(r.u32());
  return out;
}

// ---------------------------------------------------------------------------
// Host channel

HostChannel::HostChannel(std::shared_ptr<ValueStore> store) : store_(std::move(store)) {
  if (!store_) throw std::invalid_argument("host channel needs a value store");
  worker_ = std::thread([this] { run(); });
}

HostChannel::~HostChannel() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  worker_.join();
}

std::future<std::vector<std::uint8_t>> HostChannel::submit(std::vector<std::uint8_t> message) {
  Request req{std::move(message), {}};
  auto fut = req.reply.get_future();
  {
    std::lock_guard lock(mu_);
    queue_.push_back(std::move(req));
  }
  cv_.notify_one();
  return fut;
}

std::vector<float> HostChannel::call(std::size_t layer, std::size_t head,
                                     const EvictionSelection& sel) {
  return decode_reply(submit(encode_message(layer, head, sel)).get());
}

void HostChannel::run() {
  for (;;) {
    Request req;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;
      req = std::move(queue_.front());
      queue_.pop_front();
    }
    try {
      SelectionMessage m = decode_message(req.message);
      EvictionSelection sel;
      sel.indices = std::move(m.indices);
      sel.weights = std::move(m.weights);
      sel.n = store_->rows(m.layer, m.head);
      req.reply.set_value(encode_reply(store_->gather_weighted_sum(m.layer, m.head, sel)));
    } catch (...) {
      req.reply.set_exception(std::current_exception());
    }
  }
}

}  // namespace hcattn
