// Netperf-style benchmark: unidirectional message streams over the UC-RDMA
// transports and plain TCP/UDP socket baselines, with optional pacing, link
// impairment, and CPU/efficiency reporting. A TCP control connection carries
// the run configuration to the server and the server's report back.
#pragma once

#include <ucrdma/impair.hpp>
#include <ucrdma/metrics.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace ucrdma::bench {

enum class Transport {
  kUcWrite,
  kUcWriteImm,
  kUcSendRecv,
  kUcRead,
  kTcpStream,
  kUdpStream,
};

const char* to_string(Transport t);
std::optional<Transport> transport_from_string(const std::string& s);
bool is_uc(Transport t);

struct BenchConfig {
  enum class Role { kClient, kServer } role = Role::kClient;
  Transport transport = Transport::kUcWrite;
  uint32_t message_size = 65536;
  double duration_s = 10.0;
  std::string peer = "127.0.0.1:19555";  // client: server control address; server: bind
  double rate_mbps = 0.0;                // offered-load pacing; 0 = unpaced
  std::optional<ImpairmentSpec> impair;  // uc transports: tx impairment on both ends
  std::optional<double> watts;           // externally measured power for E = BW/P
  uint32_t max_payload = 1408;
  uint32_t window = 64;                  // outstanding work requests (uc_read: read window)
  bool read_timeout_enabled = false;     // uc_read: arm the 200 ms read timer
  int socket_buffer = 4 << 20;           // data-path socket buffer size
  std::string data_bind = "";            // data-path bind address override (e.g. tun address)
  std::string data_peer = "";            // data-path target override

  void validate() const;
};

struct BenchReport {
  std::string role;
  std::string transport;
  uint32_t message_size = 0;
  double elapsed_s = 0;
  uint64_t messages_sent = 0;       // sender-side offered messages
  uint64_t messages_delivered = 0;  // fully delivered messages (receiver side)
  uint64_t payload_bytes = 0;       // bytes behind the goodput figure
  double goodput_gbps = 0;          // receiver: delivered; sender: offered
  double cpu_seconds_per_second = 0;
  EfficiencyReport efficiency;
  CounterSnapshot counters;  // uc transports only; zeros otherwise
  std::string error;

  nlohmann::json to_json() const;
  static BenchReport from_json(const nlohmann::json& j);
};

// Blocking runs. run_server serves exactly one client run and returns its
// own (receiver-side) report.
BenchReport run_server(const BenchConfig& cfg);
BenchReport run_client(const BenchConfig& cfg);

// In-process loopback helper: spawns the server on an ephemeral control
// port, runs the client against it, returns both reports.
struct PairReports {
  BenchReport client;
  BenchReport server;
};
PairReports run_loopback_pair(BenchConfig cfg);

// Full-factorial sweep; one row per (transport, size, loss, rep), written as
// CSV when csv_path is nonempty. Rows that cannot run (socket baselines with
// in-process loss) carry an error and the sweep continues.
struct SweepRow {
  Transport transport;
  uint32_t message_size;
  double loss;
  int rep;
  BenchReport client;
  BenchReport server;
  std::string error;
};
std::vector<SweepRow> run_sweep(const std::vector<uint32_t>& sizes,
                                const std::vector<Transport>& transports,
                                const std::vector<double>& losses, int repetitions,
                                double duration_s, const std::string& csv_path);

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path);

}  // namespace ucrdma::bench
