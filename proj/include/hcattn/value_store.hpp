// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <future>
#include <memory>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

#include "hcattn/eviction.hpp"
#include "hcattn/matrix.hpp"

namespace hcattn {

// Weights are billed at 16 bits each regardless of the in-memory float width.
inline constexpr std::uint64_t kWeightWireBytes = 2;
inline constexpr std::uint64_t kIndexWireBytes = 4;

struct TransferLedger {
  std::uint64_t bytes_weights = 0;
  std::uint64_t bytes_indices = 0;
  std::uint64_t messages = 0;
};

// Host-resident value cache, one matrix per (layer, kv-head).
class ValueStore {
 public:
  ValueStore(std::size_t layers, std::size_t heads, std::size_t d);

  ValueStore(const ValueStore&) = delete;
  ValueStore& operator=(const ValueStore&) = delete;

  // Appends the rows of v to the (layer, head) matrix.
  void offload(std::size_t layer, std::size_t head, const Matrix& v);
  void append_value(std::size_t layer, std::size_t head, std::span<const float> v);

  // Sum of weight_i * V[index_i] in selection order. Bills the ledger.
  std::vector<float> gather_weighted_sum(std::size_t layer, std::size_t head,
                                         const EvictionSelection& sel);

  std::size_t rows(std::size_t layer, std::size_t head) const;
  std::vector<float> value_row(std::size_t layer, std::size_t head, std::size_t j) const;
  TransferLedger ledger() const;

  std::size_t layers() const { return layers_; }
  std::size_t heads() const { return heads_; }
  std::size_t dim() const { return d_; }

 private:
  struct Slot {
    mutable std::mutex mu;
    Matrix values;
  };
  Slot& slot(std::size_t layer, std::size_t head);
  const Slot& slot(std::size_t layer, std::size_t head) const;

  std::size_t layers_;
  std::size_t heads_;
  std::size_t d_;
  std::vector<std::unique_ptr<Slot>> slots_;
  std::atomic<std::uint64_t> bytes_weights_{0};
  std::atomic<std::uint64_t> bytes_indices_{0};
  std::atomic<std::uint64_t> messages_{0};
};

// Device -> host message. Wire layout, little-endian:
//   layer u16 | head u16 | k_star u32 | indices u32[k_star] | weights f32[k_star]
// Reply: output f32[d].
struct SelectionMessage {
  std::uint16_t layer = 0;
  std::uint16_t head = 0;
  std::vector<std::uint32_t> indices;
  std::vector<float> weights;
};

std::vector<std::uint8_t> encode_message(std::size_t layer, std::size_t head,
                                         const EvictionSelection& sel);
SelectionMessage decode_message(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_reply(std::span<const float> output);
std::vector<float> decode_reply(std::span<const std::uint8_t> bytes);

// The host execution domain: a single worker that owns access to the value
// store from the device's point of view. Requests are served in submission
// order.
class HostChannel {
 public:
  explicit HostChannel(std::shared_ptr<ValueStore> store);
  ~HostChannel();

  HostChannel(const HostChannel&) = delete;
  HostChannel& operator=(const HostChannel&) = delete;

  std::future<std::vector<std::uint8_t>> submit(std::vector<std::uint8_t> message);

  // Convenience: encode, submit, wait, decode.
  std::vector<float> call(std::size_t layer, std::size_t head, const EvictionSelection& sel);

 private:
  struct Request {
    std::vector<std::uint8_t> message;
    std::promise<std::vector<std::uint8_t>> reply;
  };
  void run();

  std::shared_ptr<ValueStore> store_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Request> queue_;
  bool stopping_ = false;
  std::thread worker_;
};

}  // namespace hcattn
