#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <ucrdma/endpoint.hpp>
#include <ucrdma/netutil.hpp>

#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cstring>
#include <numeric>
#include <random>
#include <thread>
#include <vector>

using namespace ucrdma;
using namespace std::chrono_literals;

namespace {

std::vector<std::byte> pattern_bytes(size_t n, uint64_t seed) {
  std::mt19937_64 g(seed);
  std::vector<std::byte> v(n);
  for (auto& b : v) b = std::byte(g() & 0xff);
  return v;
}

// Blocks until `n` completions arrive or `timeout` passes.
std::vector<WorkCompletion> reap(CompletionQueue& cq, size_t n,
                                 std::chrono::milliseconds timeout = 3000ms) {
  std::vector<WorkCompletion> out;
  auto deadline = std::chrono::steady_clock::now() + timeout;
  WorkCompletion buf[64];
  while (out.size() < n && std::chrono::steady_clock::now() < deadline) {
    size_t got = cq.poll(std::span<WorkCompletion>(buf, std::min<size_t>(64, n - out.size())));
    if (got == 0) {
      cq.wait(10ms);
      continue;
    }
    out.insert(out.end(), buf, buf + got);
  }
  return out;
}

template <class F>
bool eventually(F&& cond, std::chrono::milliseconds timeout = 3000ms) {
  auto deadline = std::chrono::steady_clock::now() + timeout;
  while (std::chrono::steady_clock::now() < deadline) {
    if (cond()) return true;
    std::this_thread::sleep_for(2ms);
  }
  return cond();
}

struct LoopbackPair {
  std::unique_ptr<Endpoint> server;
  std::unique_ptr<Endpoint> client;
  std::shared_ptr<QueuePair> sqp;  // server side
  std::shared_ptr<QueuePair> cqp;  // client side

  explicit LoopbackPair(EndpointConfig cfg = {}, std::optional<EndpointConfig> server_cfg = {}) {
    EndpointConfig scfg = server_cfg.value_or(cfg);
    cfg.bind_address = "127.0.0.1";
    cfg.port = 0;
    scfg.bind_address = "127.0.0.1";
    scfg.port = 0;
    server = std::make_unique<Endpoint>(scfg);
    client = std::make_unique<Endpoint>(cfg);
    server->listen();
    cqp = client->create_qp();
    client->connect(cqp, "127.0.0.1:" + std::to_string(server->port()));
    sqp = server->accept(2000ms);
    REQUIRE(sqp != nullptr);
    REQUIRE(cqp->state() == QueuePair::State::kConnected);
    REQUIRE(sqp->state() == QueuePair::State::kConnected);
  }
};

// A hand-driven wire peer: does the handshake on a bare socket, then injects
// arbitrary datagrams. Gives tests exact control over fragments.
struct RawPeer {
  int fd;
  sockaddr_in server{};
  uint32_t my_conn_id = 7001;
  uint32_t server_conn_id = 0;
  uint32_t features = 0;

  explicit RawPeer(uint16_t server_port, uint32_t my_id = 7001) : my_conn_id(my_id) {
    fd = net::udp_socket();
    sockaddr_in local = net::parse_addr("127.0.0.1:0");
    net::bind_to(fd, local);
    server = net::parse_addr("127.0.0.1:" + std::to_string(server_port));
    net::set_recv_timeout(fd, 2000ms);
  }
  ~RawPeer() { ::close(fd); }

  void send_bytes(std::span<const std::byte> b) {
    ::sendto(fd, b.data(), b.size(), 0, reinterpret_cast<sockaddr*>(&server), sizeof(server));
  }

  void send_dgram(const DatagramHeader& h, std::span<const std::byte> payload = {}) {
    std::vector<std::byte> d(wire::kHeaderSize + payload.size());
    wire::encode_header(h, std::span<std::byte, wire::kHeaderSize>(d.data(), wire::kHeaderSize));
    if (!payload.empty())
      std::memcpy(d.data() + wire::kHeaderSize, payload.data(), payload.size());
    send_bytes(d);
  }

  void send_fragment(Opcode op, uint32_t msn, std::span<const std::byte> msg,
                     uint32_t max_payload, uint32_t index, uint32_t stag = 0,
                     uint64_t toffset = 0, uint32_t imm = 0) {
    auto msg_len = static_cast<uint32_t>(msg.size());
    uint64_t off = uint64_t(index) * max_payload;
    uint32_t len = msg_len == 0 ? 0 : uint32_t(std::min<uint64_t>(max_payload, msg_len - off));
    DatagramHeader h;
    h.opcode = op;
    h.conn_id = server_conn_id;
    h.msn = msn;
    h.frag_offset = uint32_t(off);
    h.msg_len = msg_len;
    h.flags =
        (off == 0 ? wire::kFlagFirst : 0) | (off + len == msg_len ? wire::kFlagLast : 0);
    h.stag = stag;
    h.tagged_offset = toffset;
    h.imm = imm;
    send_dgram(h, msg.subspan(size_t(off), len));
  }

  bool handshake() {
    wire::ConnPayload p;
    p.proposed_conn_id = my_conn_id;
    p.features = features;
    std::byte pay[wire::kConnPayloadSize];
    wire::encode_conn_payload(p, std::span<std::byte, wire::kConnPayloadSize>(pay, sizeof(pay)));
    DatagramHeader req;
    req.opcode = Opcode::kConnReq;
    req.conn_id = 0;
    req.msg_len = wire::kConnPayloadSize;
    req.flags = wire::kFlagFirst | wire::kFlagLast;
    send_dgram(req, std::span<const std::byte>(pay, sizeof(pay)));

    std::byte buf[512];
    ssize_t n = ::recv(fd, buf, sizeof(buf), 0);
    if (n < ssize_t(wire::kHeaderSize)) return false;
    DecodeError err;
    auto h = wire::decode_header(std::span<const std::byte>(buf, size_t(n)), err);
    if (!h || h->opcode != Opcode::kConnRep) return false;
    auto rep = wire::decode_conn_payload(
        std::span<const std::byte>(buf + wire::kHeaderSize, size_t(n) - wire::kHeaderSize));
    if (!rep) return false;
    server_conn_id = rep->proposed_conn_id;

    DatagramHeader rtu;
    rtu.opcode = Opcode::kConnRtu;
    rtu.conn_id = server_conn_id;
    rtu.flags = wire::kFlagFirst | wire::kFlagLast;
    send_dgram(rtu);
    return true;
  }
};

}  // namespace

// ---------------------------------------------------------------- registration

TEST_CASE("memory registration basics") {
  EndpointConfig cfg;
  cfg.bind_address = "127.0.0.1";
  Endpoint ep(cfg);

  std::vector<std::byte> buf(8192);
  auto mr = ep.register_memory(buf, Access::kLocal | Access::kRemoteWrite);
  CHECK(mr.stag != 0);
  CHECK(mr.buffer.size() == 8192);

  std::vector<std::byte> buf2(64);
  auto mr2 = ep.register_memory(buf2, Access::kLocal);
  CHECK(mr2.stag != mr.stag);

  CHECK_THROWS_AS(ep.register_memory(std::span<std::byte>(buf.data(), 0), Access::kLocal),
                  std::invalid_argument);

  ep.deregister_memory(mr2);
  CHECK_THROWS_AS(ep.deregister_memory(mr2), std::invalid_argument);  // double deregister
}

TEST_CASE("binding an occupied port fails") {
  EndpointConfig cfg;
  cfg.bind_address = "127.0.0.1";
  Endpoint a(cfg);
  EndpointConfig cfg2;
  cfg2.bind_address = "127.0.0.1";
  cfg2.port = a.port();
  CHECK_THROWS_AS(Endpoint{cfg2}, std::system_error);
}

// ------------------------------------------------------------------ send paths

TEST_CASE("write segments into the documented number of datagrams") {
  std::vector<std::byte> src(1 << 21);
  std::vector<std::byte> dst(1 << 21);
  LoopbackPair p;
  auto smr = p.client->register_memory(src, Access::kLocal);
  auto dmr = p.server->register_memory(dst, Access::kLocal | Access::kRemoteWrite);

  auto before = p.client->counters().snapshot();

  WorkRequest wr;
  wr.wr_id = 1;
  wr.opcode = WrOpcode::kWrite;
  wr.local = {smr.stag, 0, 8192};
  wr.remote = {dmr.stag, 0};
  p.cqp->post_send(wr);
  auto wcs = reap(p.client->cq(), 1);
  REQUIRE(wcs.size() == 1);
  CHECK(wcs[0].status == WcStatus::kSuccess);
  CHECK(wcs[0].wr_id == 1);
  CHECK(wcs[0].byte_len == 8192);
  CHECK(wcs[0].msn == 0);  // first message on the queue pair

  CHECK(eventually([&] {
    return p.client->counters().snapshot().datagrams_tx - before.datagrams_tx == 6;
  }));  // ceil(8192/1408)

  CHECK(eventually([&] { return p.server->counters().snapshot().messages_completed == 1; }));

  SUBCASE("a zero-length write is a single datagram and completes") {
    auto b2 = p.client->counters().snapshot();
    WorkRequest z;
    z.wr_id = 2;
    z.opcode = WrOpcode::kWrite;
    z.local = {smr.stag, 0, 0};
    z.remote = {dmr.stag, 0};
    p.cqp->post_send(z);
    auto zc = reap(p.client->cq(), 1);
    REQUIRE(zc.size() == 1);
    CHECK(zc[0].status == WcStatus::kSuccess);
    CHECK(zc[0].byte_len == 0);
    CHECK(eventually(
        [&] { return p.client->counters().snapshot().datagrams_tx - b2.datagrams_tx == 1; }));
    CHECK(eventually([&] { return p.server->counters().snapshot().messages_completed == 2; }));
  }
}

TEST_CASE("a 2 MiB write takes 1490 fragments and lands byte-for-byte") {
  std::vector<std::byte> src = pattern_bytes(1 << 21, 99);
  std::vector<std::byte> dst(1 << 21);
  LoopbackPair p;
  auto smr = p.client->register_memory(src, Access::kLocal);
  auto dmr = p.server->register_memory(dst, Access::kLocal | Access::kRemoteWrite);

  auto before = p.client->counters().snapshot();
  WorkRequest wr;
  wr.wr_id = 9;
  wr.opcode = WrOpcode::kWrite;
  wr.local = {smr.stag, 0, 1 << 21};
  wr.remote = {dmr.stag, 0};
  p.cqp->post_send(wr);
  REQUIRE(reap(p.client->cq(), 1, 10000ms).size() == 1);
  CHECK(eventually([&] {
    return p.client->counters().snapshot().datagrams_tx - before.datagrams_tx == 1490;
  }, 10000ms));

  REQUIRE(eventually([&] { return p.server->counters().snapshot().messages_completed == 1; },
                     10000ms));
  CHECK(dst == src);
}

TEST_CASE("post_send on an idle queue pair is a state error") {
  EndpointConfig cfg;
  cfg.bind_address = "127.0.0.1";
  std::vector<std::byte> b(64);
  Endpoint ep(cfg);
  auto qp = ep.create_qp();
  auto mr = ep.register_memory(b, Access::kLocal);
  WorkRequest wr;
  wr.opcode = WrOpcode::kSend;
  wr.local = {mr.stag, 0, 64};
  CHECK_THROWS_AS(qp->post_send(wr), bad_state_error);
}

TEST_CASE("send completions come back in posting order") {
  std::vector<std::byte> src(65536);
  std::vector<std::byte> dst(65536);
  LoopbackPair p;
  auto smr = p.client->register_memory(src, Access::kLocal);
  auto dmr = p.server->register_memory(dst, Access::kLocal | Access::kRemoteWrite);

  for (uint64_t i = 0; i < 16; i++) {
    WorkRequest wr;
    wr.wr_id = 100 + i;
    wr.opcode = WrOpcode::kWrite;
    wr.local = {smr.stag, i * 4096, 4096};
    wr.remote = {dmr.stag, i * 4096};
    p.cqp->post_send(wr);
  }
  auto wcs = reap(p.client->cq(), 16);
  REQUIRE(wcs.size() == 16);
  for (uint64_t i = 0; i < 16; i++) {
    CHECK(wcs[i].wr_id == 100 + i);
    CHECK(wcs[i].status == WcStatus::kSuccess);
    CHECK(wcs[i].msn == i);
  }
}

// --------------------------------------------------------------- send/recv path

TEST_CASE("send/recv delivers bytes into the posted buffer") {
  auto msg = pattern_bytes(10000, 5);
  std::vector<std::byte> dst(16384);
  LoopbackPair p;
  auto smr = p.client->register_memory(msg, Access::kLocal);
  auto dmr = p.server->register_memory(dst, Access::kLocal);

  WorkRequest rwr;
  rwr.wr_id = 500;
  rwr.opcode = WrOpcode::kRecv;
  rwr.local = {dmr.stag, 0, 16384};
  p.sqp->post_recv(rwr);

  WorkRequest swr;
  swr.wr_id = 7;
  swr.opcode = WrOpcode::kSend;
  swr.local = {smr.stag, 0, uint32_t(msg.size())};
  p.cqp->post_send(swr);

  auto swc = reap(p.client->cq(), 1);
  REQUIRE(swc.size() == 1);
  CHECK(swc[0].status == WcStatus::kSuccess);

  auto rwc = reap(p.server->cq(), 1);
  REQUIRE(rwc.size() == 1);
  CHECK(rwc[0].wr_id == 500);
  CHECK(rwc[0].opcode == WcOpcode::kRecv);
  CHECK(rwc[0].byte_len == msg.size());
  CHECK(std::memcmp(dst.data(), msg.data(), msg.size()) == 0);
}

TEST_CASE("incomplete send leaves the receive buffer for the next message") {
  // one posted recv; message 0 loses its middle fragment, message 1 is
  // complete: exactly one RECV completion, carrying message 1
  std::vector<std::byte> dst(8192);
  const uint32_t mp = 1408;
  auto msg0 = pattern_bytes(3 * mp, 100);
  auto msg1 = pattern_bytes(3 * mp, 101);
  LoopbackPair p;
  RawPeer peer(p.server->port(), 9001);
  REQUIRE(peer.handshake());
  auto qp = p.server->accept(2000ms);
  REQUIRE(qp != nullptr);

  auto dmr = p.server->register_memory(dst, Access::kLocal);
  WorkRequest rwr;
  rwr.wr_id = 42;
  rwr.opcode = WrOpcode::kRecv;
  rwr.local = {dmr.stag, 0, 8192};
  qp->post_recv(rwr);

  peer.send_fragment(Opcode::kSend, 0, msg0, mp, 0);
  peer.send_fragment(Opcode::kSend, 0, msg0, mp, 2);  // fragment 1 "lost"
  peer.send_fragment(Opcode::kSend, 1, msg1, mp, 0);
  peer.send_fragment(Opcode::kSend, 1, msg1, mp, 1);
  peer.send_fragment(Opcode::kSend, 1, msg1, mp, 2);

  auto wcs = reap(p.server->cq(), 1);
  REQUIRE(wcs.size() == 1);
  CHECK(wcs[0].wr_id == 42);
  CHECK(wcs[0].byte_len == msg1.size());
  CHECK(wcs[0].msn == 1);
  CHECK(std::memcmp(dst.data(), msg1.data(), msg1.size()) == 0);

  auto snap = p.server->counters().snapshot();
  CHECK(snap.messages_dropped_incomplete == 1);
  CHECK(snap.messages_completed == 1);
  WorkCompletion extra;
  CHECK(p.server->cq().poll(std::span<WorkCompletion>(&extra, 1)) == 0);
}

TEST_CASE("inbound send without a posted receive is counted and dropped") {
  auto msg = pattern_bytes(100, 3);
  LoopbackPair p;
  RawPeer peer(p.server->port(), 9002);
  REQUIRE(peer.handshake());
  REQUIRE(p.server->accept(2000ms) != nullptr);

  peer.send_fragment(Opcode::kSend, 0, msg, 1408, 0);
  CHECK(eventually([&] { return p.server->counters().snapshot().recv_no_buffer == 1; }));
  CHECK(p.server->counters().snapshot().messages_completed == 0);
}

TEST_CASE("receive buffer shorter than the message drops it and is reused") {
  std::vector<std::byte> dst(64);
  auto msg = pattern_bytes(4096, 4);
  auto small = pattern_bytes(48, 5);
  LoopbackPair p;
  RawPeer peer(p.server->port(), 9003);
  REQUIRE(peer.handshake());
  auto qp = p.server->accept(2000ms);
  REQUIRE(qp != nullptr);

  auto dmr = p.server->register_memory(dst, Access::kLocal);
  WorkRequest rwr;
  rwr.opcode = WrOpcode::kRecv;
  rwr.local = {dmr.stag, 0, 64};
  qp->post_recv(rwr);

  peer.send_fragment(Opcode::kSend, 0, msg, 1408, 0);
  peer.send_fragment(Opcode::kSend, 0, msg, 1408, 1);
  peer.send_fragment(Opcode::kSend, 0, msg, 1408, 2);
  CHECK(eventually([&] { return p.server->counters().snapshot().recv_too_small == 1; }));
  CHECK(p.server->counters().snapshot().messages_completed == 0);

  peer.send_fragment(Opcode::kSend, 1, small, 1408, 0);
  auto wcs = reap(p.server->cq(), 1);
  REQUIRE(wcs.size() == 1);
  CHECK(wcs[0].byte_len == 48);
}

// ------------------------------------------------------------------ tagged path

TEST_CASE("write_imm raises a notification with the immediate value") {
  std::vector<std::byte> src(4096);
  std::vector<std::byte> dst(4096);
  LoopbackPair p;
  auto smr = p.client->register_memory(src, Access::kLocal);
  auto dmr = p.server->register_memory(dst, Access::kLocal | Access::kRemoteWrite);

  WorkRequest wr;
  wr.wr_id = 3;
  wr.opcode = WrOpcode::kWriteImm;
  wr.local = {smr.stag, 0, 4096};
  wr.remote = {dmr.stag, 0};
  wr.imm = 0xabcd1234;
  p.cqp->post_send(wr);

  auto swc = reap(p.client->cq(), 1);
  REQUIRE(swc.size() == 1);
  CHECK(swc[0].opcode == WcOpcode::kWriteImm);

  auto nwc = reap(p.server->cq(), 1);
  REQUIRE(nwc.size() == 1);
  CHECK(nwc[0].opcode == WcOpcode::kRecvWriteImm);
  CHECK(nwc[0].imm_valid);
  CHECK(nwc[0].imm == 0xabcd1234);
  CHECK(nwc[0].byte_len == 4096);
}

TEST_CASE("plain write is invisible to the target application") {
  std::vector<std::byte> src(4096);
  std::vector<std::byte> dst(4096);
  LoopbackPair p;
  auto smr = p.client->register_memory(src, Access::kLocal);
  auto dmr = p.server->register_memory(dst, Access::kLocal | Access::kRemoteWrite);

  WorkRequest wr;
  wr.opcode = WrOpcode::kWrite;
  wr.local = {smr.stag, 0, 4096};
  wr.remote = {dmr.stag, 0};
  p.cqp->post_send(wr);
  REQUIRE(reap(p.client->cq(), 1).size() == 1);
  REQUIRE(eventually([&] { return p.server->counters().snapshot().messages_completed == 1; }));

  WorkCompletion wc;
  CHECK(p.server->cq().poll(std::span<WorkCompletion>(&wc, 1)) == 0);
}

TEST_CASE("out-of-order fragments still complete the message") {
  std::vector<std::byte> dst(8192);
  const uint32_t mp = 1408;
  auto msg = pattern_bytes(3 * mp, 7);
  LoopbackPair p;
  RawPeer peer(p.server->port(), 9004);
  REQUIRE(peer.handshake());
  REQUIRE(p.server->accept(2000ms) != nullptr);

  auto dmr = p.server->register_memory(dst, Access::kLocal | Access::kRemoteWrite);

  peer.send_fragment(Opcode::kWrite, 0, msg, mp, 0, dmr.stag, 0);
  peer.send_fragment(Opcode::kWrite, 0, msg, mp, 2, dmr.stag, 0);
  peer.send_fragment(Opcode::kWrite, 0, msg, mp, 1, dmr.stag, 0);

  REQUIRE(eventually([&] { return p.server->counters().snapshot().messages_completed == 1; }));
  CHECK(std::memcmp(dst.data(), msg.data(), msg.size()) == 0);
}

TEST_CASE("fragment to a region without REMOTE_WRITE is unauthorized") {
  std::vector<std::byte> dst(4096);
  auto msg = pattern_bytes(100, 8);
  LoopbackPair p;
  RawPeer peer(p.server->port(), 9005);
  REQUIRE(peer.handshake());
  REQUIRE(p.server->accept(2000ms) != nullptr);

  auto dmr = p.server->register_memory(dst, Access::kLocal);  // no REMOTE_WRITE

  peer.send_fragment(Opcode::kWrite, 0, msg, 1408, 0, dmr.stag, 0);
  CHECK(eventually([&] { return p.server->counters().snapshot().unauthorized_access == 1; }));
  CHECK(p.server->counters().snapshot().messages_completed == 0);
}

TEST_CASE("fragment past the region bounds is dropped whole") {
  std::vector<std::byte> dst(1000);
  auto msg = pattern_bytes(900, 9);
  LoopbackPair p;
  RawPeer peer(p.server->port(), 9006);
  REQUIRE(peer.handshake());
  REQUIRE(p.server->accept(2000ms) != nullptr);

  auto dmr = p.server->register_memory(dst, Access::kLocal | Access::kRemoteWrite);

  peer.send_fragment(Opcode::kWrite, 0, msg, 1408, 0, dmr.stag, 200);  // 200+900 > 1000
  CHECK(eventually([&] { return p.server->counters().snapshot().bounds_violation == 1; }));
}

TEST_CASE("duplicate fragments are idempotent and counted") {
  std::vector<std::byte> dst(8192);
  const uint32_t mp = 1408;
  auto msg = pattern_bytes(2 * mp, 11);
  LoopbackPair p;
  RawPeer peer(p.server->port(), 9007);
  REQUIRE(peer.handshake());
  REQUIRE(p.server->accept(2000ms) != nullptr);

  auto dmr = p.server->register_memory(dst, Access::kLocal | Access::kRemoteWrite);

  peer.send_fragment(Opcode::kWrite, 0, msg, mp, 0, dmr.stag, 0);
  peer.send_fragment(Opcode::kWrite, 0, msg, mp, 0, dmr.stag, 0);  // duplicate
  peer.send_fragment(Opcode::kWrite, 0, msg, mp, 1, dmr.stag, 0);

  REQUIRE(eventually([&] { return p.server->counters().snapshot().messages_completed == 1; }));
  auto snap = p.server->counters().snapshot();
  CHECK(snap.duplicate_fragment == 1);
  // the copy counter advanced by exactly msg_len despite the duplicate
  CHECK(snap.payload_copy_bytes == msg.size());
  CHECK(std::memcmp(dst.data(), msg.data(), msg.size()) == 0);
}

TEST_CASE("reassembly window pressure evicts the oldest incomplete message") {
  EndpointConfig cfg;
  cfg.reassembly_window = 8;
  std::vector<std::byte> dst(1 << 20);
  const uint32_t mp = 1408;
  auto msg = pattern_bytes(2 * mp, 12);
  LoopbackPair p(cfg);
  RawPeer peer(p.server->port(), 9008);
  REQUIRE(peer.handshake());
  REQUIRE(p.server->accept(2000ms) != nullptr);

  auto dmr = p.server->register_memory(dst, Access::kLocal | Access::kRemoteWrite);

  for (uint32_t msn = 0; msn < 9; msn++)  // nine incomplete messages
    peer.send_fragment(Opcode::kWrite, msn, msg, mp, 0, dmr.stag, msn * 4096);

  CHECK(eventually(
      [&] { return p.server->counters().snapshot().messages_dropped_incomplete == 1; }));

  // msn 0 was evicted: its late fragment is stale, not a delivery
  peer.send_fragment(Opcode::kWrite, 0, msg, mp, 1, dmr.stag, 0);
  CHECK(eventually([&] { return p.server->counters().snapshot().stale_fragment == 1; }));
  CHECK(p.server->counters().snapshot().messages_completed == 0);

  // msn 8 is still live and completes
  peer.send_fragment(Opcode::kWrite, 8, msg, mp, 1, dmr.stag, 8 * 4096);
  CHECK(eventually([&] { return p.server->counters().snapshot().messages_completed == 1; }));
}

TEST_CASE("reassembly inactivity timeout silently retires the message") {
  EndpointConfig cfg;
  cfg.reassembly_timeout = std::chrono::milliseconds(100);
  std::vector<std::byte> dst(8192);
  const uint32_t mp = 1408;
  auto msg = pattern_bytes(2 * mp, 13);
  LoopbackPair p(cfg);
  RawPeer peer(p.server->port(), 9009);
  REQUIRE(peer.handshake());
  auto qp = p.server->accept(2000ms);
  REQUIRE(qp != nullptr);

  auto dmr = p.server->register_memory(dst, Access::kLocal | Access::kRemoteWrite);

  peer.send_fragment(Opcode::kWrite, 0, msg, mp, 0, dmr.stag, 0);  // rest never sent

  CHECK(eventually(
      [&] { return p.server->counters().snapshot().messages_dropped_incomplete == 1; }, 2000ms));
  CHECK(qp->state() == QueuePair::State::kConnected);  // loss never touches the connection
  CHECK(p.server->counters().snapshot().messages_completed == 0);

  std::this_thread::sleep_for(300ms);
  CHECK(p.server->counters().snapshot().messages_dropped_incomplete == 1);  // nothing else expires
}

TEST_CASE("deregistered region drops subsequent inbound writes") {
  std::vector<std::byte> dst(4096);
  auto msg = pattern_bytes(64, 14);
  LoopbackPair p;
  RawPeer peer(p.server->port(), 9010);
  REQUIRE(peer.handshake());
  REQUIRE(p.server->accept(2000ms) != nullptr);

  auto dmr = p.server->register_memory(dst, Access::kLocal | Access::kRemoteWrite);
  p.server->deregister_memory(dmr);

  peer.send_fragment(Opcode::kWrite, 0, msg, 1408, 0, dmr.stag, 0);
  CHECK(eventually([&] { return p.server->counters().snapshot().remote_invalid_stag == 1; }));
}

TEST_CASE("deregistering a region with in-flight work is refused") {
  std::vector<std::byte> src(1 << 21);
  std::vector<std::byte> dst(1 << 21);
  std::vector<std::byte> rbuf(512);
  LoopbackPair p;
  auto smr = p.client->register_memory(src, Access::kLocal);
  auto dmr = p.server->register_memory(dst, Access::kLocal | Access::kRemoteWrite);

  // a large write keeps the source region pinned while fragments drain
  WorkRequest wr;
  wr.opcode = WrOpcode::kWrite;
  wr.local = {smr.stag, 0, 1 << 21};
  wr.remote = {dmr.stag, 0};
  p.cqp->post_send(wr);
  CHECK_THROWS_AS(p.client->deregister_memory(smr), region_in_use_error);
  REQUIRE(reap(p.client->cq(), 1, 10000ms).size() == 1);
  p.client->deregister_memory(smr);  // fine once the send completed

  // a posted recv pins its region too
  auto rmr = p.server->register_memory(rbuf, Access::kLocal);
  WorkRequest rwr;
  rwr.opcode = WrOpcode::kRecv;
  rwr.local = {rmr.stag, 0, 512};
  p.sqp->post_recv(rwr);
  std::this_thread::sleep_for(50ms);
  CHECK_THROWS_AS(p.server->deregister_memory(rmr), region_in_use_error);
}

// ------------------------------------------------------------------------ reads

TEST_CASE("read pulls a remote region into the local sink") {
  EndpointConfig cfg;
  cfg.read_enabled = true;
  auto src = pattern_bytes(65536, 21);
  std::vector<std::byte> sink(65536);
  LoopbackPair p(cfg);

  auto smr = p.server->register_memory(src, Access::kLocal | Access::kRemoteRead);
  auto kmr = p.client->register_memory(sink, Access::kLocal);

  WorkRequest wr;
  wr.wr_id = 77;
  wr.opcode = WrOpcode::kRead;
  wr.local = {kmr.stag, 0, 65536};
  wr.remote = {smr.stag, 0};
  p.cqp->post_send(wr);

  auto wcs = reap(p.client->cq(), 1, 5000ms);
  REQUIRE(wcs.size() == 1);
  CHECK(wcs[0].wr_id == 77);
  CHECK(wcs[0].opcode == WcOpcode::kRead);
  CHECK(wcs[0].status == WcStatus::kSuccess);
  CHECK(wcs[0].byte_len == 65536);
  CHECK(sink == src);
}

TEST_CASE("read is rejected when disabled or zero length") {
  std::vector<std::byte> sink(64);
  LoopbackPair p;  // read_enabled defaults to false
  auto kmr = p.client->register_memory(sink, Access::kLocal);
  WorkRequest wr;
  wr.opcode = WrOpcode::kRead;
  wr.local = {kmr.stag, 0, 64};
  wr.remote = {1, 0};
  CHECK_THROWS_AS(p.cqp->post_send(wr), bad_state_error);

  EndpointConfig cfg;
  cfg.read_enabled = true;
  std::vector<std::byte> sink2(64);
  LoopbackPair q(cfg);
  auto kmr2 = q.client->register_memory(sink2, Access::kLocal);
  WorkRequest zr;
  zr.opcode = WrOpcode::kRead;
  zr.local = {kmr2.stag, 0, 0};
  zr.remote = {1, 0};
  CHECK_THROWS_AS(q.cqp->post_send(zr), std::invalid_argument);
}

TEST_CASE("lost read request without a timer stalls; with a timer it times out") {
  EndpointConfig stall_cfg;
  stall_cfg.read_enabled = true;  // read_timeout stays none
  auto src = pattern_bytes(1024, 22);
  std::vector<std::byte> sink(1024);
  LoopbackPair p(stall_cfg);

  auto smr = p.server->register_memory(src, Access::kLocal | Access::kRemoteRead);
  auto kmr = p.client->register_memory(sink, Access::kLocal);

  ImpairmentSpec drop_all;
  drop_all.loss_prob = 1.0;
  drop_all.seed = 1;
  p.client->set_tx_impair(drop_all);

  WorkRequest wr;
  wr.wr_id = 88;
  wr.opcode = WrOpcode::kRead;
  wr.local = {kmr.stag, 0, 1024};
  wr.remote = {smr.stag, 0};
  p.cqp->post_send(wr);

  std::this_thread::sleep_for(400ms);
  WorkCompletion wc;
  CHECK(p.client->cq().poll(std::span<WorkCompletion>(&wc, 1)) == 0);  // stalled
  CHECK(p.cqp->state() == QueuePair::State::kConnected);
  p.client->set_tx_impair(std::nullopt);

  // same loss with a 200 ms read timer: READ_TIMEOUT completion
  EndpointConfig timer_cfg = stall_cfg;
  timer_cfg.read_timeout = std::chrono::milliseconds(200);
  auto src2 = pattern_bytes(1024, 23);
  std::vector<std::byte> sink2(1024);
  LoopbackPair q(timer_cfg);
  auto smr2 = q.server->register_memory(src2, Access::kLocal | Access::kRemoteRead);
  auto kmr2 = q.client->register_memory(sink2, Access::kLocal);
  q.client->set_tx_impair(drop_all);

  WorkRequest wr2;
  wr2.wr_id = 89;
  wr2.opcode = WrOpcode::kRead;
  wr2.local = {kmr2.stag, 0, 1024};
  wr2.remote = {smr2.stag, 0};
  q.cqp->post_send(wr2);

  auto wcs = reap(q.client->cq(), 1, 2000ms);
  REQUIRE(wcs.size() == 1);
  CHECK(wcs[0].wr_id == 89);
  CHECK(wcs[0].status == WcStatus::kReadTimeout);
  CHECK(q.client->counters().snapshot().reads_timed_out == 1);
  CHECK(q.cqp->state() == QueuePair::State::kConnected);
}

TEST_CASE("unauthorized read request is suppressed and counted") {
  EndpointConfig cfg;
  cfg.read_enabled = true;
  auto src = pattern_bytes(1024, 24);
  std::vector<std::byte> sink(1024);
  LoopbackPair p(cfg);

  auto smr = p.server->register_memory(src, Access::kLocal);  // no REMOTE_READ
  auto kmr = p.client->register_memory(sink, Access::kLocal);

  WorkRequest wr;
  wr.wr_id = 90;
  wr.opcode = WrOpcode::kRead;
  wr.local = {kmr.stag, 0, 1024};
  wr.remote = {smr.stag, 0};
  p.cqp->post_send(wr);

  CHECK(eventually([&] { return p.server->counters().snapshot().unauthorized_access == 1; }));
  std::this_thread::sleep_for(100ms);
  WorkCompletion wc;
  CHECK(p.client->cq().poll(std::span<WorkCompletion>(&wc, 1)) == 0);  // no reply at all
}

// ---------------------------------------------------------------- cq semantics

TEST_CASE("polling an empty cq returns nothing") {
  EndpointConfig cfg;
  cfg.bind_address = "127.0.0.1";
  Endpoint ep(cfg);
  WorkCompletion wc;
  CHECK(ep.cq().poll(std::span<WorkCompletion>(&wc, 1)) == 0);
}

TEST_CASE("posting fails fast when the cq is full") {
  EndpointConfig cfg;
  cfg.cq_capacity = 4;
  std::vector<std::byte> buf(4096);
  LoopbackPair p(cfg);
  auto mr = p.server->register_memory(buf, Access::kLocal);

  WorkRequest rwr;
  rwr.opcode = WrOpcode::kRecv;
  rwr.local = {mr.stag, 0, 64};
  for (int i = 0; i < 4; i++) p.sqp->post_recv(rwr);
  CHECK_THROWS_AS(p.sqp->post_recv(rwr), cq_full_error);
}

// ---------------------------------------------------------------- single copy

TEST_CASE("single-copy invariant holds under duplication impairment") {
  std::vector<std::byte> src(65536);
  std::vector<std::byte> dst(65536);
  LoopbackPair p;

  ImpairmentSpec dup;
  dup.dup_prob = 0.3;
  dup.seed = 777;
  p.client->set_tx_impair(dup);

  auto smr = p.client->register_memory(src, Access::kLocal);
  auto dmr = p.server->register_memory(dst, Access::kLocal | Access::kRemoteWrite);

  const int kMessages = 200;
  const uint32_t kSize = 8192;
  int outstanding = 0;
  int completed = 0;
  while (completed < kMessages) {
    while (outstanding < 8 && completed + outstanding < kMessages) {
      WorkRequest wr;
      wr.opcode = WrOpcode::kWrite;
      wr.local = {smr.stag, (uint64_t(completed + outstanding) % 8) * kSize, kSize};
      wr.remote = {dmr.stag, (uint64_t(completed + outstanding) % 8) * kSize};
      p.cqp->post_send(wr);
      outstanding++;
    }
    auto wcs = reap(p.client->cq(), 1);
    REQUIRE(!wcs.empty());
    outstanding -= int(wcs.size());
    completed += int(wcs.size());
  }

  REQUIRE(eventually(
      [&] { return p.server->counters().snapshot().messages_completed == kMessages; }, 10000ms));
  auto snap = p.server->counters().snapshot();
  CHECK(snap.duplicate_fragment > 0);  // the impairment really duplicated fragments
  CHECK(snap.payload_copy_bytes == uint64_t(kMessages) * kSize);
  CHECK(snap.delivered_payload_bytes == uint64_t(kMessages) * kSize);
}
