#include <ucrdma/lofargen.hpp>

#include <ucrdma/endpoint.hpp>
#include <ucrdma/netutil.hpp>
#include <ucrdma/pacer.hpp>

#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstring>
#include <fstream>
#include <random>
#include <thread>

namespace ucrdma::lofargen {

using Clock = std::chrono::steady_clock;
using nlohmann::json;

void StationStreamSpec::validate() const {
  if (rate_mbps <= 0) throw std::invalid_argument("rate_mbps must be positive");
  if (message_size < 1) throw std::invalid_argument("message_size must be >= 1");
  if (streams < 1) throw std::invalid_argument("streams must be >= 1");
  if (duration_s <= 0) throw std::invalid_argument("duration must be positive");
  if (transport == bench::Transport::kUcRead)
    throw std::invalid_argument("station streams are sender-driven; uc_read not supported");
  if (transport == bench::Transport::kUdpStream && message_size > 65507)
    throw std::invalid_argument("udp_stream message_size limited to 65507");
  if (impair) impair->validate();
}

json StreamReport::to_json() const {
  return json{{"stream", stream},
              {"messages_sent", messages_sent},
              {"messages_delivered", messages_delivered},
              {"missing", missing},
              {"content_errors", content_errors},
              {"offered_gbps", offered_gbps},
              {"delivered_gbps", delivered_gbps},
              {"elapsed_s", elapsed_s},
              {"error", error}};
}

StreamReport StreamReport::from_json(const json& j) {
  StreamReport r;
  r.stream = j.value("stream", 0);
  r.messages_sent = j.value("messages_sent", uint64_t(0));
  r.messages_delivered = j.value("messages_delivered", uint64_t(0));
  r.missing = j.value("missing", uint64_t(0));
  r.content_errors = j.value("content_errors", uint64_t(0));
  r.offered_gbps = j.value("offered_gbps", 0.0);
  r.delivered_gbps = j.value("delivered_gbps", 0.0);
  r.elapsed_s = j.value("elapsed_s", 0.0);
  r.error = j.value("error", "");
  return r;
}

json GeneratorReport::to_json() const {
  json s = json::array();
  for (const auto& st : streams) s.push_back(st.to_json());
  return json{{"streams", s},
              {"aggregate_offered_gbps", aggregate_offered_gbps},
              {"aggregate_delivered_gbps", aggregate_delivered_gbps},
              {"total_missing", total_missing},
              {"receiver_cpu_seconds_per_second", receiver_cpu_seconds_per_second}};
}

GeneratorReport GeneratorReport::from_json(const json& j) {
  GeneratorReport r;
  for (const auto& js : j.value("streams", json::array())) {
    r.streams.push_back(StreamReport::from_json(js));
  }
  r.aggregate_offered_gbps = j.value("aggregate_offered_gbps", 0.0);
  r.aggregate_delivered_gbps = j.value("aggregate_delivered_gbps", 0.0);
  r.total_missing = j.value("total_missing", uint64_t(0));
  r.receiver_cpu_seconds_per_second = j.value("receiver_cpu_seconds_per_second", 0.0);
  return r;
}

namespace {

constexpr uint32_t kWindow = 32;
constexpr uint32_t kSlots = 64;  // ring slots per stream; 2x window keeps
                                 // delivered slots stable for verification

void fill_stream_pattern(std::span<std::byte> buf, uint64_t seed) {
  std::mt19937_64 g(seed);
  size_t i = 0;
  for (; i + 8 <= buf.size(); i += 8) {
    uint64_t v = g();
    std::memcpy(buf.data() + i, &v, 8);
  }
  for (; i < buf.size(); i++) buf[i] = std::byte(g() & 0xff);
}

void put_seq(std::span<std::byte> msg, uint64_t seq) {
  for (int i = 0; i < 8; i++) msg[i] = std::byte(uint8_t(seq >> (56 - 8 * i)));
}

uint64_t get_seq(std::span<const std::byte> msg) {
  uint64_t v = 0;
  for (int i = 0; i < 8; i++) v = (v << 8) | uint64_t(uint8_t(msg[i]));
  return v;
}

double to_gbps(uint64_t bytes, double secs) {
  return secs > 0 ? double(bytes) * 8.0 / secs / 1e9 : 0;
}

// Per-stream receive state for the uc transports. The registered buffer is
// declared first so it outlives the endpoint's progress thread.
struct UcRxStream {
  std::vector<std::byte> region_mem;
  std::unique_ptr<Endpoint> ep;
  std::shared_ptr<QueuePair> qp;
  MemoryRegion region{};
  std::vector<std::byte> expected_fill;  // pattern minus the seq header
  std::atomic<uint64_t> delivered{0};
  std::atomic<uint64_t> content_errors{0};
  std::atomic<uint64_t> delivered_bytes{0};
};

// Per-stream receive state for the socket baselines.
struct SockRxStream {
  int fd = -1;
  std::atomic<uint64_t> delivered{0};
  std::atomic<uint64_t> delivered_bytes{0};
  ~SockRxStream() {
    if (fd >= 0) ::close(fd);
  }
};

}  // namespace

GeneratorReport run_receiver(const StationStreamSpec& spec) {
  spec.validate();
  GeneratorReport rep;

  int lfd = net::tcp_socket();
  int one = 1;
  setsockopt(lfd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  net::bind_to(lfd, net::parse_addr(spec.peer));
  ::listen(lfd, 1);
  int ctrl = ::accept(lfd, nullptr, nullptr);
  ::close(lfd);
  if (ctrl < 0) throw transport_error("lofargen: control accept failed");
  setsockopt(ctrl, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  timeval tv{int(spec.duration_s) + 120, 0};
  setsockopt(ctrl, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));

  std::string line;
  if (!net::recv_line(ctrl, line)) {
    ::close(ctrl);
    throw transport_error("lofargen: no session config");
  }
  json cfg = json::parse(line);
  auto transport = bench::transport_from_string(cfg.at("transport").get<std::string>()).value();
  int streams = cfg.at("streams").get<int>();
  uint32_t msg = cfg.at("message_size").get<uint32_t>();
  uint64_t seed = cfg.at("seed").get<uint64_t>();
  bool verify = cfg.value("verify", false);
  uint32_t max_payload = cfg.value("max_payload", 8928u);

  std::string bind_host = spec.peer.substr(0, spec.peer.rfind(':'));
  if (bind_host.empty()) bind_host = "0.0.0.0";

  std::vector<std::unique_ptr<UcRxStream>> uc_rx;
  std::vector<std::unique_ptr<SockRxStream>> sock_rx;
  std::vector<std::thread> workers;
  std::atomic<bool> stop{false};

  json ports = json::array();
  json stags = json::array();
  if (bench::is_uc(transport)) {
    for (int s = 0; s < streams; s++) {
      auto rx = std::make_unique<UcRxStream>();
      EndpointConfig ec;
      ec.bind_address = bind_host;
      ec.max_payload = max_payload;
      rx->ep = std::make_unique<Endpoint>(ec);
      rx->ep->listen();
      rx->region_mem.resize(size_t(kSlots) * msg);
      Access acc = Access::kLocal | Access::kRemoteWrite;
      rx->region = rx->ep->register_memory(rx->region_mem, acc);
      if (verify && msg > 8) {
        std::vector<std::byte> one_msg(msg);
        fill_stream_pattern(one_msg, seed + uint64_t(s));
        rx->expected_fill.assign(one_msg.begin() + 8, one_msg.end());
      }
      ports.push_back(rx->ep->port());
      stags.push_back(rx->region.stag);
      uc_rx.push_back(std::move(rx));
    }
  } else {
    for (int s = 0; s < streams; s++) {
      auto rx = std::make_unique<SockRxStream>();
      if (transport == bench::Transport::kTcpStream) {
        rx->fd = net::tcp_socket();
        setsockopt(rx->fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        net::bind_to(rx->fd, net::parse_addr(bind_host + ":0"));
        ::listen(rx->fd, 1);
      } else {
        rx->fd = net::udp_socket();
        net::bind_to(rx->fd, net::parse_addr(bind_host + ":0"));
        net::set_buffers(rx->fd, 4 << 20, 4 << 20);
      }
      ports.push_back(net::local_port(rx->fd));
      stags.push_back(0);
      sock_rx.push_back(std::move(rx));
    }
  }
  net::send_line(ctrl, json{{"cmd", "ready"}, {"ports", ports}, {"stags", stags},
                            {"slots", kSlots}}
                           .dump());

  // workers: uc streams account via write-imm notifications (or the endpoint
  // counters); socket streams count in their own loops
  if (bench::is_uc(transport)) {
    for (auto& rxp : uc_rx) {
      if (transport == bench::Transport::kUcSendRecv) {
        // pre-post and keep reposting the ring
        UcRxStream* rx = rxp.get();
        auto qp_wait = std::thread([rx, msg, &stop, verify] {
          rx->qp = rx->ep->accept(std::chrono::seconds(15));
          if (!rx->qp) return;
          for (uint32_t i = 0; i < kSlots; i++) {
            WorkRequest wr;
            wr.wr_id = i;
            wr.opcode = WrOpcode::kRecv;
            wr.local = {rx->region.stag, uint64_t(i) * msg, msg};
            rx->qp->post_recv(wr);
          }
          WorkCompletion wcs[32];
          while (!stop) {
            if (!rx->ep->cq().wait(std::chrono::milliseconds(50))) continue;
            size_t n = rx->ep->cq().poll(std::span<WorkCompletion>(wcs, 32));
            for (size_t i = 0; i < n; i++) {
              if (wcs[i].status != WcStatus::kSuccess) continue;
              rx->delivered.fetch_add(1, std::memory_order_relaxed);
              rx->delivered_bytes.fetch_add(wcs[i].byte_len, std::memory_order_relaxed);
              if (verify && !rx->expected_fill.empty()) {
                auto* base = rx->region_mem.data() + wcs[i].wr_id * msg;
                if (std::memcmp(base + 8, rx->expected_fill.data(),
                                std::min<size_t>(rx->expected_fill.size(), 256)) != 0)
                  rx->content_errors.fetch_add(1, std::memory_order_relaxed);
              }
              WorkRequest wr;
              wr.wr_id = wcs[i].wr_id;
              wr.opcode = WrOpcode::kRecv;
              wr.local = {rx->region.stag, uint64_t(wcs[i].wr_id) * msg, msg};
              try {
                rx->qp->post_recv(wr);
              } catch (const transport_error&) {
                return;
              }
            }
          }
        });
        workers.push_back(std::move(qp_wait));
      } else {
        UcRxStream* rx = rxp.get();
        auto w = std::thread([rx, msg, &stop, verify, transport] {
          rx->qp = rx->ep->accept(std::chrono::seconds(15));
          if (!rx->qp) return;
          if (transport == bench::Transport::kUcWriteImm) {
            WorkCompletion wcs[32];
            while (!stop) {
              if (!rx->ep->cq().wait(std::chrono::milliseconds(50))) continue;
              size_t n = rx->ep->cq().poll(std::span<WorkCompletion>(wcs, 32));
              for (size_t i = 0; i < n; i++) {
                if (wcs[i].opcode != WcOpcode::kRecvWriteImm) continue;
                rx->delivered.fetch_add(1, std::memory_order_relaxed);
                rx->delivered_bytes.fetch_add(wcs[i].byte_len, std::memory_order_relaxed);
                if (verify && !rx->expected_fill.empty() && wcs[i].byte_len == msg) {
                  uint64_t seq = wcs[i].imm;
                  auto* base = rx->region_mem.data() + (seq % kSlots) * msg;
                  uint64_t got = get_seq(std::span<const std::byte>(base, 8));
                  bool ok = (got & 0xffffffffu) == seq;
                  if (ok)
                    ok = std::memcmp(base + 8, rx->expected_fill.data(),
                                     std::min<size_t>(rx->expected_fill.size(), 256)) == 0;
                  if (!ok) rx->content_errors.fetch_add(1, std::memory_order_relaxed);
                }
              }
            }
          } else {
            // plain writes are invisible; rely on the endpoint counters
            while (!stop) std::this_thread::sleep_for(std::chrono::milliseconds(20));
          }
        });
        workers.push_back(std::move(w));
      }
    }
  } else {
    for (auto& rxp : sock_rx) {
      SockRxStream* rx = rxp.get();
      bool tcp = transport == bench::Transport::kTcpStream;
      workers.emplace_back([rx, msg, &stop, tcp] {
        if (tcp) {
          int c = -1;
          for (int i = 0; i < 300 && !stop; i++) {
            pollfd pfd{rx->fd, POLLIN, 0};
            if (::poll(&pfd, 1, 100) > 0 && (pfd.revents & POLLIN)) {
              c = ::accept(rx->fd, nullptr, nullptr);
              break;
            }
          }
          if (c < 0) return;
          timeval tv{0, 200000};
          setsockopt(c, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
          std::vector<char> buf(msg);
          uint32_t have = 0;
          while (!stop) {
            ssize_t n = ::recv(c, buf.data() + have, msg - have, 0);
            if (n == 0) break;
            if (n < 0) {
              if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) continue;
              break;
            }
            have += uint32_t(n);
            if (have == msg) {
              rx->delivered.fetch_add(1, std::memory_order_relaxed);
              rx->delivered_bytes.fetch_add(msg, std::memory_order_relaxed);
              have = 0;
            }
          }
          ::close(c);
        } else {
          net::set_recv_timeout(rx->fd, std::chrono::milliseconds(200));
          std::vector<char> buf(std::max<uint32_t>(msg, 1));
          while (!stop) {
            ssize_t n = ::recvfrom(rx->fd, buf.data(), buf.size(), 0, nullptr, nullptr);
            if (n < 0) {
              if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) continue;
              break;
            }
            if (uint32_t(n) == msg) {
              rx->delivered.fetch_add(1, std::memory_order_relaxed);
              rx->delivered_bytes.fetch_add(uint64_t(n), std::memory_order_relaxed);
            }
          }
        }
      });
    }
  }

  CpuSampler cpu;
  auto t0 = Clock::now();

  // generator runs; it reports per-stream offered counts when done
  bool got_done = net::recv_line(ctrl, line);
  double elapsed = std::chrono::duration<double>(Clock::now() - t0).count();
  double cpu_s = cpu.seconds_per_second();
  // give trailing datagrams a moment to drain before freezing counters
  std::this_thread::sleep_for(std::chrono::milliseconds(150));
  stop = true;
  for (auto& w : workers) w.join();

  json done = got_done ? json::parse(line) : json{};
  auto sent_list = done.value("sent", std::vector<uint64_t>(size_t(streams), 0));

  rep.receiver_cpu_seconds_per_second = cpu_s;
  for (int s = 0; s < streams; s++) {
    StreamReport sr;
    sr.stream = s;
    sr.messages_sent = size_t(s) < sent_list.size() ? sent_list[s] : 0;
    if (bench::is_uc(transport)) {
      auto snap = uc_rx[s]->ep->counters().snapshot();
      sr.messages_delivered = snap.messages_completed;
      sr.delivered_gbps = to_gbps(snap.delivered_payload_bytes, elapsed);
      sr.content_errors = uc_rx[s]->content_errors.load();
    } else {
      sr.messages_delivered = sock_rx[s]->delivered.load();
      sr.delivered_gbps = to_gbps(sock_rx[s]->delivered_bytes.load(), elapsed);
    }
    sr.missing = sr.messages_sent >= sr.messages_delivered
                     ? sr.messages_sent - sr.messages_delivered
                     : 0;
    sr.elapsed_s = elapsed;
    rep.aggregate_delivered_gbps += sr.delivered_gbps;
    rep.total_missing += sr.missing;
    rep.streams.push_back(sr);
  }

  net::send_line(ctrl, json{{"cmd", "report"}, {"report", rep.to_json()}}.dump());
  ::close(ctrl);
  return rep;
}

GeneratorReport run_sender(const StationStreamSpec& spec) {
  spec.validate();

  int ctrl = -1;
  sockaddr_in ca = net::parse_addr(spec.peer);
  for (int attempt = 0; attempt < 50; attempt++) {
    ctrl = net::tcp_socket();
    if (::connect(ctrl, reinterpret_cast<sockaddr*>(&ca), sizeof(ca)) == 0) break;
    ::close(ctrl);
    ctrl = -1;
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  if (ctrl < 0) throw transport_error("lofargen: cannot reach receiver at " + spec.peer);
  int one = 1;
  setsockopt(ctrl, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  timeval tv{int(spec.duration_s) + 120, 0};
  setsockopt(ctrl, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));

  net::send_line(ctrl, json{{"cmd", "config"},
                            {"transport", bench::to_string(spec.transport)},
                            {"streams", spec.streams},
                            {"message_size", spec.message_size},
                            {"seed", spec.seed},
                            {"verify", spec.verify_content},
                            {"max_payload", spec.max_payload}}
                           .dump());
  std::string line;
  if (!net::recv_line(ctrl, line)) {
    ::close(ctrl);
    throw transport_error("lofargen: receiver closed control channel");
  }
  json ready = json::parse(line);
  auto ports = ready.at("ports").get<std::vector<uint16_t>>();
  auto stags = ready.at("stags").get<std::vector<uint32_t>>();
  uint32_t slots = ready.value("slots", kSlots);
  std::string host = spec.peer.substr(0, spec.peer.rfind(':'));

  struct StreamResult {
    uint64_t sent = 0;
    double elapsed = 0;
    std::string error;
  };
  std::vector<StreamResult> results(size_t(spec.streams));
  std::vector<std::thread> threads;

  for (int s = 0; s < spec.streams; s++) {
    threads.emplace_back([&, s] {
      StreamResult& res = results[size_t(s)];
      try {
        const uint32_t msg = spec.message_size;
        std::string target = host + ":" + std::to_string(ports[size_t(s)]);
        TokenBucket bucket(spec.rate_mbps * 1e6 / 8.0, 4.0 * msg,
                           spec.pacer_granularity);  // 4-message burst depth
        auto t0 = Clock::now();
        auto deadline =
            t0 + std::chrono::duration_cast<Clock::duration>(
                     std::chrono::duration<double>(spec.duration_s));

        if (bench::is_uc(spec.transport)) {
          std::vector<std::byte> mem(size_t(kSlots) * msg);
          for (uint32_t i = 0; i < kSlots; i++)
            fill_stream_pattern(
                std::span<std::byte>(mem.data() + size_t(i) * msg, msg),
                spec.seed + uint64_t(s));
          EndpointConfig ec;
          ec.max_payload = spec.max_payload;
          Endpoint ep(ec);
          auto qp = ep.create_qp();
          ep.connect(qp, target);
          if (spec.impair) {
            ImpairmentSpec is = *spec.impair;
            is.seed += uint64_t(s) * 101;  // independent seeds per stream
            ep.set_tx_impair(is);
          }
          auto mr = ep.register_memory(mem, Access::kLocal);

          uint64_t posted = 0, completed = 0, succeeded = 0;
          WorkCompletion wcs[32];
          auto reap = [&](bool block) {
            if (block) ep.cq().wait(std::chrono::milliseconds(50));
            size_t n = ep.cq().poll(std::span<WorkCompletion>(wcs, 32));
            for (size_t i = 0; i < n; i++) {
              completed++;
              if (wcs[i].status == WcStatus::kSuccess) succeeded++;
            }
          };
          t0 = Clock::now();
          deadline = t0 + std::chrono::duration_cast<Clock::duration>(
                              std::chrono::duration<double>(spec.duration_s));
          while (Clock::now() < deadline) {
            bucket.acquire(msg);
            while (posted - completed >= kWindow) reap(true);
            uint64_t slot = posted % kSlots;
            put_seq(std::span<std::byte>(mem.data() + slot * msg, msg), posted);
            WorkRequest wr;
            wr.wr_id = posted;
            wr.local = {mr.stag, slot * msg, msg};
            switch (spec.transport) {
              case bench::Transport::kUcWriteImm:
                wr.opcode = WrOpcode::kWriteImm;
                wr.remote = {stags[size_t(s)], (posted % slots) * msg};
                wr.imm = uint32_t(posted);
                break;
              case bench::Transport::kUcWrite:
                wr.opcode = WrOpcode::kWrite;
                wr.remote = {stags[size_t(s)], (posted % slots) * msg};
                break;
              default:
                wr.opcode = WrOpcode::kSend;
                break;
            }
            qp->post_send(wr);
            posted++;
          }
          while (completed < posted) reap(true);
          res.sent = succeeded;
          res.elapsed = std::chrono::duration<double>(Clock::now() - t0).count();
        } else if (spec.transport == bench::Transport::kTcpStream) {
          int fd = net::tcp_socket();
          sockaddr_in da = net::parse_addr(target);
          if (::connect(fd, reinterpret_cast<sockaddr*>(&da), sizeof(da)) != 0)
            throw std::system_error(errno, std::generic_category(), "tcp connect");
          net::set_buffers(fd, 4 << 20, 4 << 20);
          std::vector<std::byte> buf(msg);
          fill_stream_pattern(buf, spec.seed + uint64_t(s));
          t0 = Clock::now();
          deadline = t0 + std::chrono::duration_cast<Clock::duration>(
                              std::chrono::duration<double>(spec.duration_s));
          uint64_t seq = 0;
          while (Clock::now() < deadline) {
            bucket.acquire(msg);
            put_seq(buf, seq);
            size_t off = 0;
            while (off < msg) {
              ssize_t n = ::send(fd, buf.data() + off, msg - off, MSG_NOSIGNAL);
              if (n <= 0) {
                off = msg + 1;
                break;
              }
              off += size_t(n);
            }
            if (off != msg) break;
            seq++;
          }
          ::shutdown(fd, SHUT_WR);
          ::close(fd);
          res.sent = seq;
          res.elapsed = std::chrono::duration<double>(Clock::now() - t0).count();
        } else {
          int fd = net::udp_socket();
          sockaddr_in da = net::parse_addr(target);
          if (::connect(fd, reinterpret_cast<sockaddr*>(&da), sizeof(da)) != 0)
            throw std::system_error(errno, std::generic_category(), "udp connect");
          net::set_buffers(fd, 4 << 20, 4 << 20);
          std::vector<std::byte> buf(msg);
          fill_stream_pattern(buf, spec.seed + uint64_t(s));
          t0 = Clock::now();
          deadline = t0 + std::chrono::duration_cast<Clock::duration>(
                              std::chrono::duration<double>(spec.duration_s));
          uint64_t seq = 0;
          while (Clock::now() < deadline) {
            bucket.acquire(msg);
            put_seq(buf, seq);
            if (::send(fd, buf.data(), msg, 0) == ssize_t(msg)) seq++;
          }
          ::close(fd);
          res.sent = seq;
          res.elapsed = std::chrono::duration<double>(Clock::now() - t0).count();
        }
      } catch (const std::exception& e) {
        res.error = e.what();
      }
    });
  }
  for (auto& t : threads) t.join();

  json sent = json::array();
  for (auto& r : results) sent.push_back(r.sent);
  net::send_line(ctrl, json{{"cmd", "done"}, {"sent", sent}}.dump());

  GeneratorReport receiver_rep;
  if (net::recv_line(ctrl, line)) {
    json jr = json::parse(line);
    if (jr.value("cmd", "") == "report")
      receiver_rep = GeneratorReport::from_json(jr["report"]);
  }
  ::close(ctrl);

  // merge: offered side from our threads, delivery side from the receiver
  GeneratorReport rep = receiver_rep;
  rep.streams.resize(size_t(spec.streams));
  rep.aggregate_offered_gbps = 0;
  for (int s = 0; s < spec.streams; s++) {
    auto& sr = rep.streams[size_t(s)];
    sr.stream = s;
    sr.messages_sent = results[size_t(s)].sent;
    sr.offered_gbps =
        to_gbps(results[size_t(s)].sent * uint64_t(spec.message_size),
                results[size_t(s)].elapsed);
    if (!results[size_t(s)].error.empty()) sr.error = results[size_t(s)].error;
    sr.missing = sr.messages_sent >= sr.messages_delivered
                     ? sr.messages_sent - sr.messages_delivered
                     : 0;
    rep.aggregate_offered_gbps += sr.offered_gbps;
  }
  rep.total_missing = 0;
  for (auto& sr : rep.streams) rep.total_missing += sr.missing;
  return rep;
}

PairReports run_loopback(StationStreamSpec spec) {
  spec.validate();
  // pick an ephemeral control port
  int probe = net::tcp_socket();
  net::bind_to(probe, net::parse_addr("127.0.0.1:0"));
  uint16_t port = net::local_port(probe);
  ::close(probe);
  spec.peer = "127.0.0.1:" + std::to_string(port);

  PairReports out;
  std::thread recv_thread([&] { out.receiver = run_receiver(spec); });
  std::this_thread::sleep_for(std::chrono::milliseconds(100));
  out.sender = run_sender(spec);
  recv_thread.join();
  return out;
}

void write_csv(const GeneratorReport& rep, const std::string& path) {
  std::ofstream out(path);
  out << "stream,messages_sent,messages_delivered,missing,content_errors,"
         "offered_gbps,delivered_gbps,elapsed_s,error\n";
  for (const auto& s : rep.streams) {
    out << s.stream << ',' << s.messages_sent << ',' << s.messages_delivered << ','
        << s.missing << ',' << s.content_errors << ',' << s.offered_gbps << ','
        << s.delivered_gbps << ',' << s.elapsed_s << ',' << s.error << '\n';
  }
}

}  // namespace ucrdma::lofargen
