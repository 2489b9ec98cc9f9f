// Deterministic, seeded link impairment: independent per-datagram Bernoulli
// loss and duplication plus slot-based reordering. Used in-process as a hook
// between the engine and its socket, and by the standalone UDP forwarding
// proxy (ucr-impair-proxy).
#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ucrdma {

struct ImpairmentSpec {
  double loss_prob = 0.0;
  double dup_prob = 0.0;
  double reorder_prob = 0.0;
  uint32_t reorder_depth = 1;
  uint64_t seed = 1;

  void validate() const {
    auto in01 = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!in01(loss_prob) || !in01(dup_prob) || !in01(reorder_prob))
      throw std::invalid_argument("impairment probabilities must lie in [0,1]");
    if (reorder_prob > 0.0 && reorder_depth < 1)
      throw std::invalid_argument("reorder_depth must be >= 1 when reordering");
  }
};

// Bit-for-bit deterministic for a given (seed, input sequence): the RNG is a
// fixed-algorithm mt19937_64 and the uniform mapping below avoids
// distribution objects whose output is implementation-defined.
class ImpairmentFilter {
 public:
  explicit ImpairmentFilter(const ImpairmentSpec& spec) : spec_(spec), rng_(spec.seed) {
    spec_.validate();
  }

  struct Stats {
    uint64_t offered = 0;
    uint64_t forwarded = 0;
    uint64_t dropped = 0;
    uint64_t duplicated = 0;
    uint64_t reordered = 0;
  };

  // Feeds one datagram; `emit` is invoked zero or more times with datagrams to
  // deliver now (held-back datagrams come out on later feeds or on flush).
  template <class Emit>
  void feed(std::span<const std::byte> datagram, Emit&& emit) {
    stats_.offered++;
    // previously held datagrams age one slot per arrival
    for (auto& h : held_)
      if (h.slots_left > 0) h.slots_left--;
    if (draw() < spec_.loss_prob) {
      stats_.dropped++;
      release_zeros(emit);
      return;
    }
    stats_.forwarded++;
    bool dup = draw() < spec_.dup_prob;
    if (dup) stats_.duplicated++;
    if (spec_.reorder_prob > 0.0 && draw() < spec_.reorder_prob) {
      stats_.reordered++;
      held_.push_back({spec_.reorder_depth, {datagram.begin(), datagram.end()}});
      if (dup) held_.push_back({spec_.reorder_depth, {datagram.begin(), datagram.end()}});
    } else {
      emit(datagram);
      if (dup) emit(datagram);
    }
    release_zeros(emit);
  }

  // Emits everything still held back, in hold order.
  template <class Emit>
  void flush(Emit&& emit) {
    for (auto& h : held_) emit(std::span<const std::byte>(h.bytes));
    held_.clear();
  }

  const Stats& stats() const { return stats_; }

 private:
  struct Held {
    uint32_t slots_left;
    std::vector<std::byte> bytes;
  };

  double draw() { return double(rng_() >> 11) * 0x1.0p-53; }

  template <class Emit>
  void release_zeros(Emit&& emit) {
    while (!held_.empty() && held_.front().slots_left == 0) {
      emit(std::span<const std::byte>(held_.front().bytes));
      held_.pop_front();
    }
  }

  ImpairmentSpec spec_;
  std::mt19937_64 rng_;
  std::deque<Held> held_;
  Stats stats_;
};

namespace impair {

// Searches seeds (by simulating the filter) until the first `horizon`
// datagrams drop exactly at `drop_indices`. Returns nullopt after
// max_attempts. Test helper for deterministic loss placement.
std::optional<uint64_t> find_drop_seed(double loss_prob, uint32_t horizon,
                                       const std::vector<uint32_t>& drop_indices,
                                       uint64_t max_attempts = 200000);

}  // namespace impair

// Bidirectional UDP forwarding proxy: client datagrams arriving on the listen
// socket go to `forward`, replies go back to the most recent client address.
// One independently seeded filter per direction (seed and seed+1).
class UdpProxy {
 public:
  UdpProxy(const std::string& listen_addr, const std::string& forward_addr,
           const ImpairmentSpec& spec);
  ~UdpProxy();

  UdpProxy(const UdpProxy&) = delete;
  UdpProxy& operator=(const UdpProxy&) = delete;

  void stop();
  uint16_t listen_port() const { return listen_port_; }

  struct Stats {
    ImpairmentFilter::Stats to_forward;
    ImpairmentFilter::Stats to_client;
  };
  Stats stats() const;

 private:
  struct Impl;
  Impl* impl_;
  uint16_t listen_port_ = 0;
};

}  // namespace ucrdma
