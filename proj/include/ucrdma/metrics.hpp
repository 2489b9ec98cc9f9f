// Transport counters, CPU-time sampling, and the normalized efficiency
// metric E = BW / resource (Gb/s per W when watts are supplied, Gb/s per
// CPU-second/second otherwise). Report schema documented in docs/metrics.md.
#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace ucrdma {

struct CounterSnapshot {
  uint64_t datagrams_tx = 0;
  uint64_t datagrams_rx = 0;
  uint64_t bytes_tx = 0;
  uint64_t bytes_rx = 0;
  uint64_t messages_completed = 0;
  uint64_t messages_dropped_incomplete = 0;
  uint64_t delivered_payload_bytes = 0;
  uint64_t payload_copy_bytes = 0;
  uint64_t malformed_rx = 0;
  uint64_t unknown_conn = 0;
  uint64_t remote_invalid_stag = 0;
  uint64_t unauthorized_access = 0;
  uint64_t bounds_violation = 0;
  uint64_t recv_no_buffer = 0;
  uint64_t recv_too_small = 0;
  uint64_t duplicate_fragment = 0;
  uint64_t stale_fragment = 0;
  uint64_t duplicate_read_req = 0;
  uint64_t read_resp_unmatched = 0;
  uint64_t reads_timed_out = 0;
  uint64_t imm_notify_dropped = 0;
  uint64_t data_after_close = 0;
  uint64_t control_dropped = 0;
  uint64_t tx_would_block = 0;

  nlohmann::json to_json() const;
};

// Updated by the endpoint progress thread, readable from any thread.
// Snapshots are approximate across fields but each field is exact.
struct CounterSet {
  std::atomic<uint64_t> datagrams_tx{0};
  std::atomic<uint64_t> datagrams_rx{0};
  std::atomic<uint64_t> bytes_tx{0};
  std::atomic<uint64_t> bytes_rx{0};
  std::atomic<uint64_t> messages_completed{0};
  std::atomic<uint64_t> messages_dropped_incomplete{0};
  std::atomic<uint64_t> delivered_payload_bytes{0};
  std::atomic<uint64_t> payload_copy_bytes{0};
  std::atomic<uint64_t> malformed_rx{0};
  std::atomic<uint64_t> unknown_conn{0};
  std::atomic<uint64_t> remote_invalid_stag{0};
  std::atomic<uint64_t> unauthorized_access{0};
  std::atomic<uint64_t> bounds_violation{0};
  std::atomic<uint64_t> recv_no_buffer{0};
  std::atomic<uint64_t> recv_too_small{0};
  std::atomic<uint64_t> duplicate_fragment{0};
  std::atomic<uint64_t> stale_fragment{0};
  std::atomic<uint64_t> duplicate_read_req{0};
  std::atomic<uint64_t> read_resp_unmatched{0};
  std::atomic<uint64_t> reads_timed_out{0};
  std::atomic<uint64_t> imm_notify_dropped{0};
  std::atomic<uint64_t> data_after_close{0};
  std::atomic<uint64_t> control_dropped{0};
  std::atomic<uint64_t> tx_would_block{0};

  CounterSnapshot snapshot() const;
};

enum class ResourceKind { kWatts, kCpuSecondsPerSecond };

struct EfficiencyReport {
  double bandwidth_gbps = 0.0;
  double resource = 0.0;
  ResourceKind resource_kind = ResourceKind::kCpuSecondsPerSecond;
  double efficiency = 0.0;  // bandwidth / resource

  nlohmann::json to_json() const;
};

// E = BW / P. Throws std::invalid_argument when resource <= 0.
EfficiencyReport compute_efficiency(double bandwidth_gbps, double resource,
                                    ResourceKind kind = ResourceKind::kWatts);

// Process CPU time (user + system) consumed per wall-clock second.
class CpuSampler {
 public:
  CpuSampler();               // marks the start of the window
  void restart();
  double seconds_per_second() const;  // since the last (re)start
  double wall_seconds() const;

 private:
  double cpu0_;
  std::chrono::steady_clock::time_point wall0_;
};

// Blocking convenience: measures over `interval`.
double sample_cpu(std::chrono::milliseconds interval);

}  // namespace ucrdma
