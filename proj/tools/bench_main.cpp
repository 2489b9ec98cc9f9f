// ucr-bench: unidirectional throughput benchmark over UC-RDMA transports and
// plain TCP/UDP socket baselines.
//
//   ucr-bench --role server --transport uc_write --msg-size 8192 \
//             --duration 10 --peer 0.0.0.0:19555 --json
//   ucr-bench --role client --transport uc_write --msg-size 8192 \
//             --duration 10 --peer 192.168.1.10:19555 --rate-mbps 2000
//
// With --sweep, runs the full-factorial loopback sweep instead.

#include <ucrdma/bench.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

using namespace ucrdma;

int main(int argc, char** argv) {
  CLI::App app{"UC-RDMA message-stream benchmark"};

  std::string role = "client";
  std::string transport = "uc_write";
  uint32_t msg_size = 65536;
  double duration = 10.0;
  std::string peer = "127.0.0.1:19555";
  double loss = 0.0;
  double dup = 0.0;
  double reorder = 0.0;
  uint32_t reorder_depth = 1;
  uint64_t seed = 1;
  int streams = 1;
  double watts = 0.0;
  std::string csv;
  bool json_out = false;
  double rate_mbps = 0.0;
  uint32_t max_payload = 1408;
  uint32_t window = 64;
  int socket_buffer = 4 << 20;
  bool read_timer = false;
  std::string data_bind, data_peer;

  bool sweep = false;
  std::vector<uint32_t> sweep_sizes{8192, 65536, 262144, 2097152};
  std::vector<std::string> sweep_transports{"uc_write", "uc_sendrecv", "tcp_stream",
                                            "udp_stream"};
  std::vector<double> sweep_losses{0.0};
  int reps = 6;

  app.add_option("--role", role, "client|server")->check(CLI::IsMember({"client", "server"}));
  app.add_option("--transport", transport,
                 "uc_write|uc_write_imm|uc_sendrecv|uc_read|tcp_stream|udp_stream");
  app.add_option("--msg-size", msg_size, "message size in bytes");
  app.add_option("--duration", duration, "seconds of transfer");
  app.add_option("--peer", peer, "control address (server binds it, client connects)");
  app.add_option("--loss", loss, "datagram loss probability (uc transports)");
  app.add_option("--dup", dup, "duplication probability");
  app.add_option("--reorder", reorder, "reorder probability");
  app.add_option("--reorder-depth", reorder_depth, "reorder hold depth in slots");
  app.add_option("--seed", seed, "impairment seed");
  app.add_option("--streams", streams, "independent connections")->check(CLI::Range(1, 64));
  app.add_option("--watts", watts, "externally measured power for E = BW/P");
  app.add_option("--csv", csv, "sweep output path");
  app.add_flag("--json", json_out, "print the machine-readable report");
  app.add_option("--rate-mbps", rate_mbps, "paced offered load (0 = unpaced)");
  app.add_option("--max-payload", max_payload, "fragment payload limit");
  app.add_option("--window", window, "outstanding work requests");
  app.add_option("--socket-buffer", socket_buffer, "data socket buffer bytes");
  app.add_flag("--read-timeout", read_timer, "arm the 200 ms read-loss timer (uc_read)");
  app.add_option("--data-bind", data_bind, "bind the data path to this address");
  app.add_option("--data-peer", data_peer, "send data to this host instead of --peer's");
  app.add_flag("--sweep", sweep, "run the loopback message-size sweep");
  app.add_option("--sweep-sizes", sweep_sizes, "sweep message sizes");
  app.add_option("--sweep-transports", sweep_transports, "sweep transports");
  app.add_option("--sweep-losses", sweep_losses, "sweep loss probabilities");
  app.add_option("--reps", reps, "repetitions per sweep cell");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sweep) {
      std::vector<bench::Transport> ts;
      for (auto& s : sweep_transports) {
        auto t = bench::transport_from_string(s);
        if (!t) {
          std::fprintf(stderr, "unknown transport: %s\n", s.c_str());
          return 2;
        }
        ts.push_back(*t);
      }
      auto rows = bench::run_sweep(sweep_sizes, ts, sweep_losses, reps, duration,
                                   csv.empty() ? "sweep.csv" : csv);
      std::fprintf(stderr, "sweep complete: %zu rows -> %s\n", rows.size(),
                   csv.empty() ? "sweep.csv" : csv.c_str());
      return 0;
    }

    bench::BenchConfig cfg;
    cfg.role = role == "server" ? bench::BenchConfig::Role::kServer
                                : bench::BenchConfig::Role::kClient;
    auto t = bench::transport_from_string(transport);
    if (!t) {
      std::fprintf(stderr, "unknown transport: %s\n", transport.c_str());
      return 2;
    }
    cfg.transport = *t;
    cfg.message_size = msg_size;
    cfg.duration_s = duration;
    cfg.peer = peer;
    cfg.rate_mbps = rate_mbps;
    cfg.max_payload = max_payload;
    cfg.window = window;
    cfg.socket_buffer = socket_buffer;
    cfg.read_timeout_enabled = read_timer;
    cfg.data_bind = data_bind;
    cfg.data_peer = data_peer;
    if (watts > 0) cfg.watts = watts;
    if (loss > 0 || dup > 0 || reorder > 0) {
      ImpairmentSpec s;
      s.loss_prob = loss;
      s.dup_prob = dup;
      s.reorder_prob = reorder;
      s.reorder_depth = reorder_depth;
      s.seed = seed;
      cfg.impair = s;
    }

    if (cfg.role == bench::BenchConfig::Role::kServer) {
      auto rep = bench::run_server(cfg);
      if (json_out)
        std::printf("%s\n", rep.to_json().dump().c_str());
      else
        std::fprintf(stderr,
                     "server: %s %u B msgs: %.3f Gb/s goodput, %llu delivered, cpu %.3f s/s\n",
                     rep.transport.c_str(), rep.message_size, rep.goodput_gbps,
                     static_cast<unsigned long long>(rep.messages_delivered),
                     rep.cpu_seconds_per_second);
      return rep.error.empty() ? 0 : 1;
    }

    auto rep = bench::run_client(cfg);
    if (json_out)
      std::printf("%s\n", rep.to_json().dump().c_str());
    else
      std::fprintf(stderr,
                   "client: %s %u B msgs: %.3f Gb/s offered, %llu sent, cpu %.3f s/s\n",
                   rep.transport.c_str(), rep.message_size, rep.goodput_gbps,
                   static_cast<unsigned long long>(rep.messages_sent),
                   rep.cpu_seconds_per_second);
    return rep.error.empty() ? 0 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ucr-bench: %s\n", e.what());
    return 1;
  }
}
