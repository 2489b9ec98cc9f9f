#include <ucrdma/bench.hpp>

#include <ucrdma/endpoint.hpp>
#include <ucrdma/netutil.hpp>
#include <ucrdma/pacer.hpp>

#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstring>
#include <fstream>
#include <random>
#include <thread>

namespace ucrdma::bench {

using Clock = std::chrono::steady_clock;
using nlohmann::json;

const char* to_string(Transport t) {
  switch (t) {
    case Transport::kUcWrite: return "uc_write";
    case Transport::kUcWriteImm: return "uc_write_imm";
    case Transport::kUcSendRecv: return "uc_sendrecv";
    case Transport::kUcRead: return "uc_read";
    case Transport::kTcpStream: return "tcp_stream";
    case Transport::kUdpStream: return "udp_stream";
  }
  return "?";
}

std::optional<Transport> transport_from_string(const std::string& s) {
  for (Transport t : {Transport::kUcWrite, Transport::kUcWriteImm, Transport::kUcSendRecv,
                      Transport::kUcRead, Transport::kTcpStream, Transport::kUdpStream})
    if (s == to_string(t)) return t;
  return std::nullopt;
}

bool is_uc(Transport t) {
  return t == Transport::kUcWrite || t == Transport::kUcWriteImm ||
         t == Transport::kUcSendRecv || t == Transport::kUcRead;
}

void BenchConfig::validate() const {
  if (transport == Transport::kUdpStream && message_size > 65507)
    throw std::invalid_argument("udp_stream message_size is limited to 65507 bytes");
  if (message_size > (2u << 20))
    throw std::invalid_argument("message_size is limited to 2 MiB");
  if (duration_s <= 0) throw std::invalid_argument("duration must be positive");
  if (window < 1) throw std::invalid_argument("window must be >= 1");
  if (impair) impair->validate();
  if (is_uc(transport) && (max_payload < 1 || max_payload > 8928))
    throw std::invalid_argument("max_payload must be in [1, 8928]");
}

json BenchReport::to_json() const {
  json j{
      {"role", role},
      {"transport", transport},
      {"message_size", message_size},
      {"elapsed_s", elapsed_s},
      {"messages_sent", messages_sent},
      {"messages_delivered", messages_delivered},
      {"payload_bytes", payload_bytes},
      {"goodput_gbps", goodput_gbps},
      {"cpu_seconds_per_second", cpu_seconds_per_second},
      {"efficiency", efficiency.to_json()},
      {"counters", counters.to_json()},
  };
  if (!error.empty()) j["error"] = error;
  return j;
}

BenchReport BenchReport::from_json(const json& j) {
  BenchReport r;
  r.role = j.value("role", "");
  r.transport = j.value("transport", "");
  r.message_size = j.value("message_size", 0u);
  r.elapsed_s = j.value("elapsed_s", 0.0);
  r.messages_sent = j.value("messages_sent", uint64_t(0));
  r.messages_delivered = j.value("messages_delivered", uint64_t(0));
  r.payload_bytes = j.value("payload_bytes", uint64_t(0));
  r.goodput_gbps = j.value("goodput_gbps", 0.0);
  r.cpu_seconds_per_second = j.value("cpu_seconds_per_second", 0.0);
  r.error = j.value("error", "");
  if (j.contains("efficiency")) {
    const auto& e = j["efficiency"];
    r.efficiency.bandwidth_gbps = e.value("bandwidth_gbps", 0.0);
    r.efficiency.resource = e.value("resource", 0.0);
    r.efficiency.efficiency = e.value("efficiency", 0.0);
    r.efficiency.resource_kind = e.value("resource_kind", "") == "watts"
                                     ? ResourceKind::kWatts
                                     : ResourceKind::kCpuSecondsPerSecond;
  }
  if (j.contains("counters")) {
    const auto& c = j["counters"];
    r.counters.messages_completed = c.value("messages_completed", uint64_t(0));
    r.counters.messages_dropped_incomplete = c.value("messages_dropped_incomplete", uint64_t(0));
    r.counters.delivered_payload_bytes = c.value("delivered_payload_bytes", uint64_t(0));
    r.counters.payload_copy_bytes = c.value("payload_copy_bytes", uint64_t(0));
    r.counters.datagrams_rx = c.value("datagrams_rx", uint64_t(0));
    r.counters.datagrams_tx = c.value("datagrams_tx", uint64_t(0));
    r.counters.reads_timed_out = c.value("reads_timed_out", uint64_t(0));
  }
  return r;
}

namespace {

constexpr auto kControlTimeout = std::chrono::seconds(60);

void fill_pattern(std::span<std::byte> buf, uint64_t seed) {
  std::mt19937_64 g(seed);
  size_t i = 0;
  for (; i + 8 <= buf.size(); i += 8) {
    uint64_t v = g();
    std::memcpy(buf.data() + i, &v, 8);
  }
  for (; i < buf.size(); i++) buf[i] = std::byte(g() & 0xff);
}

uint32_t ring_slots(uint32_t message_size, uint32_t window) {
  uint64_t by_mem = (64ull << 20) / std::max<uint32_t>(message_size, 1);
  return uint32_t(std::clamp<uint64_t>(by_mem, 1, window));
}

std::string host_of(const std::string& addr_port) {
  auto colon = addr_port.rfind(':');
  if (colon == std::string::npos) return "127.0.0.1";
  return addr_port.substr(0, colon);
}

double to_gbps(uint64_t bytes, double secs) {
  if (secs <= 0) return 0;
  return double(bytes) * 8.0 / secs / 1e9;
}

void finish_report(BenchReport& r, const std::optional<double>& watts) {
  double resource = watts.value_or(r.cpu_seconds_per_second);
  ResourceKind kind = watts ? ResourceKind::kWatts : ResourceKind::kCpuSecondsPerSecond;
  if (resource > 0)
    r.efficiency = compute_efficiency(r.goodput_gbps, resource, kind);
}

// ------------------------------------------------------------------- server ---

struct ServerRun {
  BenchConfig cfg;            // fields taken from the client's config message
  std::optional<double> watts;
  int ctrl = -1;

  // uc state; the registered buffer is declared before the endpoint so it
  // outlives the progress thread at destruction
  std::vector<std::byte> region_mem;
  std::unique_ptr<Endpoint> ep;
  std::shared_ptr<QueuePair> qp;
  MemoryRegion region{};
  uint32_t slots = 1;

  // socket-baseline state
  int data_fd = -1;
  std::thread data_thread;
  std::atomic<bool> stop{false};
  std::atomic<uint64_t> delivered{0};
  std::atomic<uint64_t> delivered_bytes{0};

  // sendrecv reposting
  std::thread repost_thread;

  ~ServerRun() {
    stop = true;
    if (repost_thread.joinable()) repost_thread.join();
    if (data_thread.joinable()) data_thread.join();
    if (ep) ep->close();  // quiesce placement before buffers go away
    if (data_fd >= 0) ::close(data_fd);
    if (ctrl >= 0) ::close(ctrl);
  }
};

json serve_setup(ServerRun& run, const json& cfgmsg) {
  BenchConfig& cfg = run.cfg;
  cfg.transport = transport_from_string(cfgmsg.at("transport").get<std::string>()).value();
  cfg.message_size = cfgmsg.at("message_size").get<uint32_t>();
  cfg.duration_s = cfgmsg.at("duration_s").get<double>();
  cfg.max_payload = cfgmsg.value("max_payload", 1408u);
  cfg.window = cfgmsg.value("window", 64u);
  cfg.read_timeout_enabled = cfgmsg.value("read_timeout_enabled", false);
  if (cfgmsg.contains("impair")) {
    ImpairmentSpec s;
    s.loss_prob = cfgmsg["impair"].value("loss_prob", 0.0);
    s.dup_prob = cfgmsg["impair"].value("dup_prob", 0.0);
    s.reorder_prob = cfgmsg["impair"].value("reorder_prob", 0.0);
    s.reorder_depth = cfgmsg["impair"].value("reorder_depth", 1u);
    s.seed = cfgmsg["impair"].value("seed", uint64_t(1));
    cfg.impair = s;
  }
  cfg.validate();

  json ready{{"cmd", "ready"}};
  std::string bind_addr = run.cfg.data_bind.empty() ? "0.0.0.0" : run.cfg.data_bind;

  if (is_uc(cfg.transport)) {
    EndpointConfig ec;
    ec.bind_address = bind_addr;
    ec.max_payload = cfg.max_payload;
    ec.socket_buffer = cfg.socket_buffer;
    ec.read_enabled = cfg.transport == Transport::kUcRead;
    if (cfg.transport == Transport::kUcRead && cfg.read_timeout_enabled)
      ec.read_timeout = std::chrono::milliseconds(200);
    run.ep = std::make_unique<Endpoint>(ec);
    run.ep->listen();

    // send/recv consumes one posted buffer per message: keep the ring deep
    // enough to ride out paced bursts and the repost round trip
    uint32_t ring_window = cfg.transport == Transport::kUcSendRecv
                               ? std::max(cfg.window, 512u)
                               : std::max(cfg.window, 2u);
    run.slots = ring_slots(cfg.message_size, ring_window);
    size_t region_len = std::max<size_t>(size_t(run.slots) * cfg.message_size, 1);
    run.region_mem.resize(region_len);
    Access acc = Access::kLocal;
    if (cfg.transport == Transport::kUcRead) {
      fill_pattern(run.region_mem, 4242);
      acc = acc | Access::kRemoteRead;
    } else {
      acc = acc | Access::kRemoteWrite;
    }
    run.region = run.ep->register_memory(run.region_mem, acc);

    ready["data_port"] = run.ep->port();
    ready["stag"] = run.region.stag;
    ready["region_len"] = region_len;
    ready["slots"] = run.slots;
  } else if (cfg.transport == Transport::kTcpStream) {
    run.data_fd = net::tcp_socket();
    int one = 1;
    setsockopt(run.data_fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    net::bind_to(run.data_fd, net::parse_addr(bind_addr + ":0"));
    ::listen(run.data_fd, 1);
    ready["data_port"] = net::local_port(run.data_fd);
  } else {
    run.data_fd = net::udp_socket();
    net::bind_to(run.data_fd, net::parse_addr(bind_addr + ":0"));
    net::set_buffers(run.data_fd, cfg.socket_buffer, cfg.socket_buffer);
    ready["data_port"] = net::local_port(run.data_fd);
  }
  return ready;
}

void serve_start_data(ServerRun& run) {
  const BenchConfig& cfg = run.cfg;
  if (cfg.transport == Transport::kTcpStream) {
    run.data_thread = std::thread([&run] {
      const uint32_t msg = run.cfg.message_size;
      int c = -1;
      // accept with a deadline so a vanished client cannot wedge us
      for (int i = 0; i < 300 && !run.stop; i++) {
        pollfd pfd{run.data_fd, POLLIN, 0};
        if (::poll(&pfd, 1, 100) > 0 && (pfd.revents & POLLIN)) {
          c = ::accept(run.data_fd, nullptr, nullptr);
          break;
        }
      }
      if (c < 0) return;
      timeval tv{0, 200000};
      setsockopt(c, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
      std::vector<char> buf(msg);
      uint32_t have = 0;
      while (!run.stop) {
        ssize_t n = ::recv(c, buf.data() + have, msg - have, 0);
        if (n == 0) break;
        if (n < 0) {
          if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) continue;
          break;
        }
        have += uint32_t(n);
        run.delivered_bytes.fetch_add(uint64_t(n), std::memory_order_relaxed);
        if (have == msg) {
          run.delivered.fetch_add(1, std::memory_order_relaxed);
          have = 0;
        }
      }
      ::close(c);
    });
  } else if (cfg.transport == Transport::kUdpStream) {
    run.data_thread = std::thread([&run] {
      const uint32_t msg = run.cfg.message_size;
      net::set_recv_timeout(run.data_fd, std::chrono::milliseconds(200));
      std::vector<char> buf(std::max<uint32_t>(msg, 1));
      while (!run.stop) {
        ssize_t n = ::recvfrom(run.data_fd, buf.data(), buf.size(), 0, nullptr, nullptr);
        if (n < 0) {
          if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) continue;
          break;
        }
        if (uint32_t(n) == msg) {
          run.delivered.fetch_add(1, std::memory_order_relaxed);
          run.delivered_bytes.fetch_add(uint64_t(n), std::memory_order_relaxed);
        }
      }
    });
  } else if (cfg.transport == Transport::kUcSendRecv) {
    // the receive queue must be deep before the client starts blasting
    const uint32_t msg = cfg.message_size;
    const uint32_t depth = std::min<uint32_t>(run.slots, 512);
    for (uint32_t i = 0; i < depth; i++) {
      WorkRequest wr;
      wr.wr_id = i % run.slots;
      wr.opcode = WrOpcode::kRecv;
      wr.local = {run.region.stag, uint64_t(i % run.slots) * msg, msg};
      run.qp->post_recv(wr);
    }
    run.repost_thread = std::thread([&run] {
      auto& ep = *run.ep;
      const uint32_t msg2 = run.cfg.message_size;
      WorkCompletion wcs[64];
      while (!run.stop) {
        if (!ep.cq().wait(std::chrono::milliseconds(50))) continue;
        size_t n = ep.cq().poll(std::span<WorkCompletion>(wcs, 64));
        for (size_t i = 0; i < n; i++) {
          if (wcs[i].status != WcStatus::kSuccess) continue;
          WorkRequest wr;
          wr.wr_id = wcs[i].wr_id;
          wr.opcode = WrOpcode::kRecv;
          wr.local = {run.region.stag, uint64_t(wcs[i].wr_id) * msg2, msg2};
          try {
            run.qp->post_recv(wr);
          } catch (const transport_error&) {
            return;  // connection closed under us
          }
        }
      }
    });
  }
}

BenchReport serve_once_fd(int ctrl_listen_fd, const BenchConfig& server_cfg) {
  BenchReport rep;
  rep.role = "server";
  ServerRun run;
  run.cfg = server_cfg;
  run.watts = server_cfg.watts;

  timeval tv{30, 0};
  setsockopt(ctrl_listen_fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  run.ctrl = ::accept(ctrl_listen_fd, nullptr, nullptr);
  if (run.ctrl < 0) {
    rep.error = "control accept timed out";
    return rep;
  }
  int one = 1;
  setsockopt(run.ctrl, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  timeval ctv{60, 0};
  setsockopt(run.ctrl, SOL_SOCKET, SO_RCVTIMEO, &ctv, sizeof(ctv));

  std::string line;
  if (!net::recv_line(run.ctrl, line)) {
    rep.error = "no config from client";
    return rep;
  }
  json ready;
  try {
    ready = serve_setup(run, json::parse(line));
  } catch (const std::exception& e) {
    net::send_line(run.ctrl, json{{"cmd", "error"}, {"what", e.what()}}.dump());
    rep.error = e.what();
    return rep;
  }
  net::send_line(run.ctrl, ready.dump());

  // uc transports hand us the accepted queue pair before data flows
  if (is_uc(run.cfg.transport)) {
    if (!net::recv_line(run.ctrl, line)) {
      rep.error = "client vanished before connecting";
      return rep;
    }
    run.qp = run.ep->accept(std::chrono::seconds(10));
    if (!run.qp) {
      net::send_line(run.ctrl, json{{"cmd", "error"}, {"what", "no connection"}}.dump());
      rep.error = "data connection never arrived";
      return rep;
    }
    if (run.cfg.impair) {
      ImpairmentSpec s = *run.cfg.impair;
      s.seed += 1000;  // independent per direction
      run.ep->set_tx_impair(s);
    }
  } else {
    if (!net::recv_line(run.ctrl, line)) {
      rep.error = "client vanished before connecting";
      return rep;
    }
  }
  serve_start_data(run);

  CounterSnapshot before{};
  if (run.ep) before = run.ep->counters().snapshot();
  CpuSampler cpu;
  auto t0 = Clock::now();
  net::send_line(run.ctrl, json{{"cmd", "go"}}.dump());

  // wait for the client to finish
  timeval dtv{int(run.cfg.duration_s) + 120, 0};
  setsockopt(run.ctrl, SOL_SOCKET, SO_RCVTIMEO, &dtv, sizeof(dtv));
  bool got_done = net::recv_line(run.ctrl, line);
  double elapsed = std::chrono::duration<double>(Clock::now() - t0).count();
  double cpu_s = cpu.seconds_per_second();
  run.stop = true;

  rep.transport = to_string(run.cfg.transport);
  rep.message_size = run.cfg.message_size;
  rep.elapsed_s = elapsed;
  rep.cpu_seconds_per_second = cpu_s;
  if (run.ep) {
    auto after = run.ep->counters().snapshot();
    rep.counters = after;
    rep.messages_delivered = after.messages_completed - before.messages_completed;
    rep.payload_bytes = after.delivered_payload_bytes - before.delivered_payload_bytes;
  } else {
    rep.messages_delivered = run.delivered.load();
    rep.payload_bytes = run.delivered_bytes.load();
  }
  rep.goodput_gbps = to_gbps(rep.payload_bytes, elapsed);
  finish_report(rep, run.watts);
  if (!got_done) rep.error = "client never reported done";

  net::send_line(run.ctrl, json{{"cmd", "report"}, {"report", rep.to_json()}}.dump());
  return rep;
}

// ------------------------------------------------------------------- client ---

struct ClientReports {
  BenchReport client;
  BenchReport server;
};

ClientReports client_run(const BenchConfig& cfg) {
  cfg.validate();
  ClientReports out;
  BenchReport& rep = out.client;
  rep.role = "client";
  rep.transport = to_string(cfg.transport);
  rep.message_size = cfg.message_size;

  // control connection (retry briefly: the server may still be starting)
  int ctrl = -1;
  sockaddr_in ctrl_addr = net::parse_addr(cfg.peer);
  for (int attempt = 0; attempt < 50; attempt++) {
    ctrl = net::tcp_socket();
    if (::connect(ctrl, reinterpret_cast<sockaddr*>(&ctrl_addr), sizeof(ctrl_addr)) == 0) break;
    ::close(ctrl);
    ctrl = -1;
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  if (ctrl < 0) throw transport_error("bench: cannot reach server control port " + cfg.peer);
  int one = 1;
  setsockopt(ctrl, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  timeval tv{int(kControlTimeout.count()), 0};
  setsockopt(ctrl, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));

  json cfgmsg{{"cmd", "config"},
              {"transport", to_string(cfg.transport)},
              {"message_size", cfg.message_size},
              {"duration_s", cfg.duration_s},
              {"max_payload", cfg.max_payload},
              {"window", cfg.window},
              {"read_timeout_enabled", cfg.read_timeout_enabled},
              {"socket_buffer", cfg.socket_buffer}};
  if (cfg.impair) {
    cfgmsg["impair"] = json{{"loss_prob", cfg.impair->loss_prob},
                            {"dup_prob", cfg.impair->dup_prob},
                            {"reorder_prob", cfg.impair->reorder_prob},
                            {"reorder_depth", cfg.impair->reorder_depth},
                            {"seed", cfg.impair->seed}};
  }
  net::send_line(ctrl, cfgmsg.dump());

  std::string line;
  if (!net::recv_line(ctrl, line)) {
    ::close(ctrl);
    throw transport_error("bench: server closed the control connection");
  }
  json ready = json::parse(line);
  if (ready.value("cmd", "") != "ready") {
    ::close(ctrl);
    throw transport_error("bench: server refused: " + ready.value("what", line));
  }
  uint16_t data_port = ready.at("data_port").get<uint16_t>();
  std::string data_host = cfg.data_peer.empty() ? host_of(cfg.peer) : cfg.data_peer;
  std::string data_addr = data_host + ":" + std::to_string(data_port);

  const uint32_t msg = cfg.message_size;
  uint64_t sent = 0;
  double elapsed = 0;
  CounterSnapshot client_counters{};
  double cpu_s = 0;

  auto wait_go = [&] {
    net::send_line(ctrl, json{{"cmd", "connected"}}.dump());
    std::string l;
    if (!net::recv_line(ctrl, l) || json::parse(l).value("cmd", "") != "go")
      throw transport_error("bench: server never said go");
  };

  std::optional<TokenBucket> bucket;
  auto maybe_pace = [&] {
    if (cfg.rate_mbps > 0 && !bucket)
      bucket.emplace(cfg.rate_mbps * 1e6 / 8.0, 4.0 * msg, std::chrono::milliseconds(4));
    if (bucket) bucket->acquire(msg);
  };

  if (is_uc(cfg.transport)) {
    uint32_t stag = ready.at("stag").get<uint32_t>();
    uint32_t slots = ready.at("slots").get<uint32_t>();

    uint32_t my_slots = ring_slots(msg, std::max(cfg.window, 2u));
    std::vector<std::byte> mem(std::max<size_t>(size_t(my_slots) * msg, 1));
    fill_pattern(mem, 777);

    EndpointConfig ec;
    ec.bind_address = cfg.data_bind.empty() ? "0.0.0.0" : cfg.data_bind;
    ec.max_payload = cfg.max_payload;
    ec.socket_buffer = cfg.socket_buffer;
    ec.read_enabled = cfg.transport == Transport::kUcRead;
    if (cfg.transport == Transport::kUcRead && cfg.read_timeout_enabled)
      ec.read_timeout = std::chrono::milliseconds(200);
    Endpoint ep(ec);
    auto qp = ep.create_qp();
    ep.connect(qp, data_addr);
    if (cfg.impair) ep.set_tx_impair(*cfg.impair);
    auto mr = ep.register_memory(mem, Access::kLocal);

    uint32_t window = std::min(cfg.window, my_slots);
    if (cfg.transport == Transport::kUcRead)
      window = std::min(window, ep.config().max_outstanding_reads);

    wait_go();
    CpuSampler cpu;
    auto t0 = Clock::now();
    auto deadline = t0 + std::chrono::duration_cast<Clock::duration>(
                             std::chrono::duration<double>(cfg.duration_s));

    uint64_t posted = 0;
    uint64_t completed = 0;
    uint64_t succeeded = 0;
    auto last_progress = Clock::now();
    bool stalled = false;
    WorkCompletion wcs[64];
    auto reap_some = [&](bool block) {
      if (block) ep.cq().wait(std::chrono::milliseconds(100));
      size_t n = ep.cq().poll(std::span<WorkCompletion>(wcs, 64));
      for (size_t i = 0; i < n; i++) {
        completed++;
        if (wcs[i].status == WcStatus::kSuccess) succeeded++;
      }
      if (n > 0)
        last_progress = Clock::now();
      else if (Clock::now() - last_progress > std::chrono::seconds(10))
        stalled = true;  // e.g. reads stuck without a read timer
    };

    while (Clock::now() < deadline && !stalled) {
      maybe_pace();
      while (posted - completed >= window && !stalled) reap_some(true);
      if (stalled) break;
      WorkRequest wr;
      wr.wr_id = posted;
      uint64_t slot = posted % my_slots;
      uint64_t remote_slot = posted % slots;
      switch (cfg.transport) {
        case Transport::kUcWrite:
          wr.opcode = WrOpcode::kWrite;
          wr.local = {mr.stag, slot * msg, msg};
          wr.remote = {stag, remote_slot * msg};
          break;
        case Transport::kUcWriteImm:
          wr.opcode = WrOpcode::kWriteImm;
          wr.local = {mr.stag, slot * msg, msg};
          wr.remote = {stag, remote_slot * msg};
          wr.imm = uint32_t(posted);
          break;
        case Transport::kUcSendRecv:
          wr.opcode = WrOpcode::kSend;
          wr.local = {mr.stag, slot * msg, msg};
          break;
        case Transport::kUcRead:
          wr.opcode = WrOpcode::kRead;
          wr.local = {mr.stag, slot * msg, msg};
          wr.remote = {stag, remote_slot * msg};
          break;
        default:
          break;
      }
      qp->post_send(wr);
      posted++;
    }
    while (completed < posted && !stalled) reap_some(true);
    if (stalled) rep.error = "transfer stalled: outstanding operations never completed";
    elapsed = std::chrono::duration<double>(Clock::now() - t0).count();
    cpu_s = cpu.seconds_per_second();
    sent = succeeded;
    client_counters = ep.counters().snapshot();
    // for reads the client is the receiving side
    if (cfg.transport == Transport::kUcRead) {
      rep.messages_delivered = succeeded;
      rep.payload_bytes = succeeded * uint64_t(msg);
    }
  } else if (cfg.transport == Transport::kTcpStream) {
    int fd = net::tcp_socket();
    sockaddr_in da = net::parse_addr(data_addr);
    if (!cfg.data_bind.empty()) net::bind_to(fd, net::parse_addr(cfg.data_bind + ":0"));
    if (::connect(fd, reinterpret_cast<sockaddr*>(&da), sizeof(da)) != 0) {
      ::close(fd);
      ::close(ctrl);
      throw std::system_error(errno, std::generic_category(), "bench: tcp data connect");
    }
    net::set_buffers(fd, cfg.socket_buffer, cfg.socket_buffer);
    std::vector<char> buf(msg, 'u');

    wait_go();
    CpuSampler cpu;
    auto t0 = Clock::now();
    auto deadline = t0 + std::chrono::duration_cast<Clock::duration>(
                             std::chrono::duration<double>(cfg.duration_s));
    while (Clock::now() < deadline) {
      maybe_pace();
      size_t off = 0;
      while (off < msg) {
        ssize_t n = ::send(fd, buf.data() + off, msg - off, MSG_NOSIGNAL);
        if (n <= 0) {
          if (n < 0 && errno == EINTR) continue;
          off = msg + 1;
          break;
        }
        off += size_t(n);
      }
      if (off != msg) break;
      sent++;
    }
    ::shutdown(fd, SHUT_WR);
    elapsed = std::chrono::duration<double>(Clock::now() - t0).count();
    cpu_s = cpu.seconds_per_second();
    ::close(fd);
  } else {  // udp_stream
    int fd = net::udp_socket();
    if (!cfg.data_bind.empty()) net::bind_to(fd, net::parse_addr(cfg.data_bind + ":0"));
    sockaddr_in da = net::parse_addr(data_addr);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&da), sizeof(da)) != 0) {
      ::close(fd);
      ::close(ctrl);
      throw std::system_error(errno, std::generic_category(), "bench: udp data connect");
    }
    net::set_buffers(fd, cfg.socket_buffer, cfg.socket_buffer);
    std::vector<char> buf(std::max<uint32_t>(msg, 1), 'u');

    wait_go();
    CpuSampler cpu;
    auto t0 = Clock::now();
    auto deadline = t0 + std::chrono::duration_cast<Clock::duration>(
                             std::chrono::duration<double>(cfg.duration_s));
    while (Clock::now() < deadline) {
      maybe_pace();
      ssize_t n = ::send(fd, buf.data(), msg, 0);
      if (n == ssize_t(msg)) sent++;
    }
    elapsed = std::chrono::duration<double>(Clock::now() - t0).count();
    cpu_s = cpu.seconds_per_second();
    ::close(fd);
  }

  rep.messages_sent = sent;
  rep.elapsed_s = elapsed;
  rep.cpu_seconds_per_second = cpu_s;
  rep.counters = client_counters;
  if (cfg.transport != Transport::kUcRead) {
    rep.payload_bytes = sent * uint64_t(msg);  // offered
  }
  rep.goodput_gbps = to_gbps(rep.payload_bytes, elapsed);
  finish_report(rep, cfg.watts);

  net::send_line(ctrl, json{{"cmd", "done"}}.dump());
  if (net::recv_line(ctrl, line)) {
    json jr = json::parse(line);
    if (jr.value("cmd", "") == "report") out.server = BenchReport::from_json(jr["report"]);
  }
  ::close(ctrl);
  return out;
}

}  // namespace

BenchReport run_server(const BenchConfig& cfg) {
  int fd = net::tcp_socket();
  int one = 1;
  setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  net::bind_to(fd, net::parse_addr(cfg.peer));
  ::listen(fd, 1);
  auto rep = serve_once_fd(fd, cfg);
  ::close(fd);
  return rep;
}

BenchReport run_client(const BenchConfig& cfg) { return client_run(cfg).client; }

PairReports run_loopback_pair(BenchConfig cfg) {
  int fd = net::tcp_socket();
  int one = 1;
  setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  net::bind_to(fd, net::parse_addr("127.0.0.1:0"));
  ::listen(fd, 1);
  uint16_t port = net::local_port(fd);

  BenchConfig server_cfg = cfg;
  server_cfg.role = BenchConfig::Role::kServer;
  BenchReport server_rep;
  std::thread srv([&] { server_rep = serve_once_fd(fd, server_cfg); });

  cfg.role = BenchConfig::Role::kClient;
  cfg.peer = "127.0.0.1:" + std::to_string(port);
  PairReports out;
  try {
    auto r = client_run(cfg);
    out.client = r.client;
  } catch (...) {
    srv.join();
    ::close(fd);
    throw;
  }
  srv.join();
  ::close(fd);
  out.server = server_rep;
  return out;
}

std::vector<SweepRow> run_sweep(const std::vector<uint32_t>& sizes,
                                const std::vector<Transport>& transports,
                                const std::vector<double>& losses, int repetitions,
                                double duration_s, const std::string& csv_path) {
  std::vector<SweepRow> rows;
  for (Transport t : transports) {
    for (uint32_t size : sizes) {
      for (double loss : losses) {
        for (int rep = 0; rep < repetitions; rep++) {
          SweepRow row;
          row.transport = t;
          row.message_size = size;
          row.loss = loss;
          row.rep = rep;
          if (!is_uc(t) && loss > 0) {
            row.error = "in-process loss applies to uc transports only";
            rows.push_back(row);
            continue;
          }
          if (t == Transport::kUdpStream && size > 65507) {
            row.error = "udp_stream limited to 64 kB datagrams";
            rows.push_back(row);
            continue;
          }
          BenchConfig cfg;
          cfg.transport = t;
          cfg.message_size = size;
          cfg.duration_s = duration_s;
          if (loss > 0) {
            ImpairmentSpec s;
            s.loss_prob = loss;
            s.seed = uint64_t(1 + rep) * 7919 + uint64_t(size);
            cfg.impair = s;
          }
          try {
            auto pr = run_loopback_pair(cfg);
            row.client = pr.client;
            row.server = pr.server;
          } catch (const std::exception& e) {
            row.error = e.what();
          }
          rows.push_back(row);
        }
      }
    }
  }
  if (!csv_path.empty()) write_sweep_csv(rows, csv_path);
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ofstream out(path);
  out << "transport,message_size,loss,rep,goodput_gbps,offered_gbps,delivered_ratio,"
         "cpu_rx,cpu_tx,efficiency_rx,messages_sent,messages_delivered,error\n";
  for (const auto& r : rows) {
    double delivered_ratio = 0;
    uint64_t sent = r.client.messages_sent;
    uint64_t delivered = r.server.messages_delivered;
    if (r.transport == Transport::kUcRead) delivered = r.client.messages_delivered;
    if (sent > 0) delivered_ratio = double(delivered) / double(sent);
    out << to_string(r.transport) << ',' << r.message_size << ',' << r.loss << ',' << r.rep
        << ',' << r.server.goodput_gbps << ',' << r.client.goodput_gbps << ','
        << delivered_ratio << ',' << r.server.cpu_seconds_per_second << ','
        << r.client.cpu_seconds_per_second << ',' << r.server.efficiency.efficiency << ','
        << sent << ',' << delivered << ',' << r.error << '\n';
  }
}

}  // namespace ucrdma::bench
