// ucr-lofargen: telescope-station traffic generator. Each stream paces
// fixed-size messages at a configured rate; the receiving side accounts
// delivery and loss per stream.
//
//   ucr-lofargen --role recv --streams 4 --rate-mbps 760 --msg-size 8192 \
//                --transport uc_write_imm --peer 0.0.0.0:19556 --duration 10
//   ucr-lofargen --role send --streams 4 --rate-mbps 760 --msg-size 8192 \
//                --transport uc_write_imm --peer 192.168.1.10:19556 --duration 10

#include <ucrdma/lofargen.hpp>

#include <CLI11.hpp>

#include <cstdio>

using namespace ucrdma;

int main(int argc, char** argv) {
  CLI::App app{"Radio-telescope station stream generator"};

  std::string role = "send";
  int streams = 4;
  double rate_mbps = 760.0;
  uint32_t msg_size = 8192;
  std::string transport = "uc_write_imm";
  std::string peer = "127.0.0.1:19556";
  double duration = 10.0;
  uint64_t seed = 1;
  std::string csv;
  double loss = 0.0;
  bool verify = false;
  bool json_out = false;
  uint32_t max_payload = 8928;

  app.add_option("--role", role, "send|recv")->check(CLI::IsMember({"send", "recv"}));
  app.add_option("--streams", streams, "station streams (4 per antenna field)");
  app.add_option("--rate-mbps", rate_mbps, "per-stream offered rate");
  app.add_option("--msg-size", msg_size, "message size in bytes");
  app.add_option("--transport", transport, "uc_write|uc_write_imm|uc_sendrecv|tcp_stream|udp_stream");
  app.add_option("--peer", peer, "control address");
  app.add_option("--duration", duration, "seconds");
  app.add_option("--seed", seed, "payload/impairment seed");
  app.add_option("--csv", csv, "per-stream CSV output");
  app.add_option("--loss", loss, "sender-side datagram loss probability (uc)");
  app.add_flag("--verify", verify, "verify payload content on delivery");
  app.add_flag("--json", json_out, "print the machine-readable report");
  app.add_option("--max-payload", max_payload, "fragment payload limit (uc)");

  CLI11_PARSE(app, argc, argv);

  try {
    lofargen::StationStreamSpec spec;
    spec.streams = streams;
    spec.rate_mbps = rate_mbps;
    spec.message_size = msg_size;
    auto t = bench::transport_from_string(transport);
    if (!t) {
      std::fprintf(stderr, "unknown transport: %s\n", transport.c_str());
      return 2;
    }
    spec.transport = *t;
    spec.peer = peer;
    spec.duration_s = duration;
    spec.seed = seed;
    spec.verify_content = verify;
    spec.max_payload = max_payload;
    if (loss > 0) {
      ImpairmentSpec s;
      s.loss_prob = loss;
      s.seed = seed;
      spec.impair = s;
    }

    auto rep = role == "recv" ? lofargen::run_receiver(spec) : lofargen::run_sender(spec);
    if (!csv.empty()) lofargen::write_csv(rep, csv);
    if (json_out) {
      std::printf("%s\n", rep.to_json().dump().c_str());
    } else {
      for (const auto& s : rep.streams)
        std::fprintf(stderr,
                     "stream %d: offered %.3f Gb/s (%llu msgs), delivered %.3f Gb/s "
                     "(%llu msgs), missing %llu\n",
                     s.stream, s.offered_gbps,
                     static_cast<unsigned long long>(s.messages_sent), s.delivered_gbps,
                     static_cast<unsigned long long>(s.messages_delivered),
                     static_cast<unsigned long long>(s.missing));
      std::fprintf(stderr, "aggregate: offered %.3f Gb/s, delivered %.3f Gb/s, missing %llu\n",
                   rep.aggregate_offered_gbps, rep.aggregate_delivered_gbps,
                   static_cast<unsigned long long>(rep.total_missing));
    }
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ucr-lofargen: %s\n", e.what());
    return 1;
  }
}
