// Radio-telescope station traffic generator: several independent
// rate-controlled message streams (760 Mb/s of 8 kB messages each, four per
// antenna field) over any supported transport, with receiver-side delivery
// and loss accounting per stream.
#pragma once

#include <ucrdma/bench.hpp>
#include <ucrdma/impair.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace ucrdma::lofargen {

struct StationStreamSpec {
  double rate_mbps = 760.0;    // per-stream offered rate
  uint32_t message_size = 8192;
  int streams = 4;             // one antenna field
  bench::Transport transport = bench::Transport::kUcWriteImm;
  double duration_s = 10.0;
  std::string peer = "127.0.0.1:19556";  // control address (receiver side binds it)
  uint64_t seed = 1;
  std::optional<ImpairmentSpec> impair;  // sender-side per-stream impairment
  uint32_t max_payload = 8928;
  bool verify_content = false;
  // pacer scheduling step; coarser steps cost fewer timer wakeups at the
  // price of burstier emission
  std::chrono::microseconds pacer_granularity{1000};

  void validate() const;
};

struct StreamReport {
  int stream = 0;
  uint64_t messages_sent = 0;
  uint64_t messages_delivered = 0;
  uint64_t missing = 0;
  uint64_t content_errors = 0;
  double offered_gbps = 0;
  double delivered_gbps = 0;
  double elapsed_s = 0;
  std::string error;

  nlohmann::json to_json() const;
  static StreamReport from_json(const nlohmann::json& j);
};

struct GeneratorReport {
  std::vector<StreamReport> streams;
  double aggregate_offered_gbps = 0;
  double aggregate_delivered_gbps = 0;
  uint64_t total_missing = 0;
  double receiver_cpu_seconds_per_second = 0;

  nlohmann::json to_json() const;
  static GeneratorReport from_json(const nlohmann::json& j);
};

// Receiver side: binds the control address, serves one generator session,
// returns its own accounting. Sender side: drives the streams and returns
// the merged view (its offered counts plus the receiver's delivery report).
GeneratorReport run_receiver(const StationStreamSpec& spec);
GeneratorReport run_sender(const StationStreamSpec& spec);

struct PairReports {
  GeneratorReport sender;
  GeneratorReport receiver;
};
PairReports run_loopback(StationStreamSpec spec);

void write_csv(const GeneratorReport& rep, const std::string& path);

}  // namespace ucrdma::lofargen
