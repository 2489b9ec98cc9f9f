#include <ucrdma/endpoint.hpp>

#include <ucrdma/engine.hpp>
#include <ucrdma/netutil.hpp>

#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstring>
#include <deque>
#include <functional>
#include <future>
#include <map>
#include <thread>
#include <tuple>
#include <unordered_map>
#include <vector>

namespace ucrdma {

using Clock = std::chrono::steady_clock;

void EndpointConfig::validate() const {
  if (max_payload < 1 || max_payload > wire::kMaxPayloadLimit)
    throw std::invalid_argument("max_payload must be in [1, 8928]");
  if (reassembly_window < 1) throw std::invalid_argument("reassembly_window must be >= 1");
  if (cq_capacity < 1) throw std::invalid_argument("cq_capacity must be >= 1");
  if (max_outstanding_reads < 1)
    throw std::invalid_argument("max_outstanding_reads must be >= 1");
  if (tx_impair) tx_impair->validate();
  if (rx_impair) rx_impair->validate();
}

namespace {

constexpr int kRxBatch = 64;
constexpr int kTxBatch = 64;
constexpr int kRxRoundsPerIter = 8;
constexpr int kTxDatagramsPerIter = 512;
constexpr size_t kRxSlotBytes = wire::kHeaderSize + wire::kMaxPayloadLimit;
constexpr size_t kAcceptBacklog = 64;
constexpr auto kClosedLinger = std::chrono::seconds(5);
constexpr auto kIdlePoll = std::chrono::milliseconds(5);

struct RegionRecord {
  std::byte* base = nullptr;
  size_t length = 0;
  Access access = Access::kLocal;
  uint32_t pins = 0;
};

struct PendingSend {
  std::shared_ptr<QueuePair> qp;
  uint64_t wr_id = 0;
  WrOpcode opcode = WrOpcode::kSend;
  uint32_t msn = 0;
  uint32_t stag = 0;  // resolved local source
  uint64_t offset = 0;
  uint32_t length = 0;
  RemoteSpan remote;
  uint32_t imm = 0;
  uint32_t next_frag = 0;
};

// Responder-side READ_RESP transmission; no work request, no completion:
// the application layer is involved only on the initiating side.
struct ResponderSend {
  uint32_t read_id = 0;
  uint32_t src_stag = 0;
  uint64_t src_offset = 0;
  uint32_t sink_stag = 0;
  uint64_t sink_offset = 0;
  uint32_t length = 0;
  uint32_t next_frag = 0;
};

struct PostedRecv {
  uint64_t wr_id = 0;
  uint32_t stag = 0;
  uint64_t offset = 0;
  uint32_t length = 0;
};

struct Reassembly {
  uint32_t msn = 0;
  uint32_t msg_len = 0;
  engine::RangeCoverage cov;
  Opcode opcode = Opcode::kWrite;
  uint32_t stag = 0;  // tagged target
  uint64_t tagged_offset = 0;
  uint32_t imm = 0;
  Clock::time_point last_activity;

  Reassembly(uint32_t m, uint32_t len, Opcode op) : msn(m), msg_len(len), cov(len), opcode(op) {}
};

struct ReadState {
  uint32_t read_id = 0;
  uint64_t wr_id = 0;
  std::shared_ptr<QueuePair> qp;
  uint32_t sink_stag = 0;
  uint64_t sink_offset = 0;
  uint32_t length = 0;
  engine::RangeCoverage cov;
  std::optional<Clock::time_point> deadline;

  ReadState(uint32_t id, uint32_t len) : read_id(id), length(len), cov(len) {}
};

struct Connection {
  uint32_t local_id = 0;
  uint32_t remote_id = 0;
  sockaddr_in peer{};
  cm::ConnState state = cm::ConnState::kReqSent;
  std::shared_ptr<QueuePair> qp;
  uint32_t peer_features = 0;

  // control-plane retransmission
  std::vector<std::byte> cached_ctrl;  // REQ / REP / DISCONNECT depending on state
  std::vector<std::byte> cached_rtu;   // client side, re-sent on duplicate REP
  int retx_left = 0;
  Clock::time_point next_retx{};
  bool retx_armed = false;

  // data send side
  std::deque<PendingSend> send_queue;
  std::deque<ResponderSend> responder_queue;

  // data receive side
  std::map<uint32_t, Reassembly> tagged_rx;
  uint32_t next_fresh_tagged_msn = 0;
  std::optional<Reassembly> untagged_rx;
  uint64_t untagged_floor = 0;  // untagged msn below this is stale
  std::deque<PostedRecv> recv_queue;

  // reads
  std::map<uint32_t, ReadState> reads;          // initiator side, keyed by read id
  std::optional<uint32_t> last_read_id_served;  // responder-side dedup

  Clock::time_point closed_at{};

  bool has_tx_work() const { return !send_queue.empty() || !responder_queue.empty(); }
};

struct Command {
  enum class Type : uint8_t { kSend, kRecv, kConnect, kDisconnect, kSync, kStop };
  Type type = Type::kStop;
  std::shared_ptr<QueuePair> qp;
  WorkRequest wr{};
  uint32_t msn = 0;
  sockaddr_in peer{};
  std::function<void()> fn;                  // kSync
  std::shared_ptr<std::promise<void>> done;  // kSync / kDisconnect
};

struct OwnedDatagram {
  sockaddr_in dest;
  std::vector<std::byte> bytes;
};

}  // namespace

struct EndpointImpl {
  Endpoint* self;
  EndpointConfig cfg;
  int sock = -1;
  int wake_rd = -1, wake_wr = -1;
  std::thread progress;
  std::atomic<bool> stopping{false};
  bool closed = false;
  std::mutex close_mu;

  // commands (any thread -> progress thread)
  std::mutex cmd_mu;
  std::vector<Command> cmd_queue;

  // regions (post-side validation + progress-side placement)
  std::mutex reg_mu;
  std::unordered_map<uint32_t, RegionRecord> regions;
  uint32_t next_stag = 1;

  // connections (progress thread only)
  std::unordered_map<uint32_t, std::shared_ptr<Connection>> conns;
  std::map<std::tuple<uint32_t, uint16_t, uint32_t>, uint32_t> accept_dedup;
  std::atomic<uint32_t> next_conn_id{1};
  bool listening = false;
  size_t pending_handshakes = 0;  // server-side connections still in REP_SENT

  // accept queue (progress -> app)
  std::mutex accept_mu;
  std::condition_variable accept_cv;
  std::deque<std::shared_ptr<QueuePair>> accept_queue;

  // impairment (progress thread only)
  std::optional<ImpairmentFilter> tx_filter;
  std::optional<ImpairmentFilter> rx_filter;

  // transmit machinery
  std::deque<OwnedDatagram> tx_backlog;
  mmsghdr tx_msgs[kTxBatch];
  iovec tx_iovs[kTxBatch][2];
  sockaddr_in tx_dests[kTxBatch];
  std::byte tx_hdrs[kTxBatch][wire::kHeaderSize];
  std::vector<std::byte> tx_assembly;  // contiguous staging when a tx filter is active
  int tx_n = 0;
  bool tx_blocked = false;

  // receive machinery
  mmsghdr rx_msgs[kRxBatch];
  iovec rx_iovs[kRxBatch];
  sockaddr_in rx_srcs[kRxBatch];
  std::vector<std::byte> rx_bufs;
  std::vector<std::byte> rx_assembly;  // staging when an rx filter is active
  int last_rx_count = 0;

  // completions staged per loop iteration: one queue lock and one wakeup
  // instead of one per completion
  struct StagedWc {
    WorkCompletion wc;
    bool reserved;
  };
  std::vector<StagedWc> wc_staging;
  std::vector<std::pair<uint64_t, uint64_t>> gaps_scratch;  // placement reuse

  // progress thread parked in poll(); posts only write the wake pipe then
  std::atomic<bool> parked{false};

  Clock::time_point next_timer_scan{};

  // loop self-accounting, dumped at close when UCR_STATS is set
  uint64_t dbg_iters = 0, dbg_polls = 0, dbg_poll_timeout0 = 0, dbg_recvmmsg = 0,
           dbg_recvmmsg_empty = 0, dbg_rx_dgrams = 0, dbg_sendmmsg = 0, dbg_sendto = 0,
           dbg_cmd_batches = 0, dbg_cmds = 0;

  EndpointImpl(Endpoint* s, EndpointConfig c) : self(s), cfg(std::move(c)) {}

  void dump_stats() {
    if (!getenv("UCR_STATS")) return;
    fprintf(stderr,
            "[ucr-stats port=%u] iters=%llu polls=%llu poll_t0=%llu recvmmsg=%llu "
            "rx_empty=%llu rx_dgrams=%llu sendmmsg=%llu sendto=%llu "
            "cmd_batches=%llu cmds=%llu\n",
            unsigned(net::local_port(sock)), (unsigned long long)dbg_iters,
            (unsigned long long)dbg_polls, (unsigned long long)dbg_poll_timeout0,
            (unsigned long long)dbg_recvmmsg, (unsigned long long)dbg_recvmmsg_empty,
            (unsigned long long)dbg_rx_dgrams, (unsigned long long)dbg_sendmmsg,
            (unsigned long long)dbg_sendto, (unsigned long long)dbg_cmd_batches,
            (unsigned long long)dbg_cmds);
  }

  CounterSet& ctr() { return self->counters_; }
  CompletionQueue& cq() { return self->cq_; }

  // ------------------------------------------------------------------ util ---

  void wake() {
    char b = 1;
    ssize_t r = write(wake_wr, &b, 1);
    (void)r;
  }

  void enqueue(Command&& c) {
    bool was_empty;
    {
      std::lock_guard lk(cmd_mu);
      was_empty = cmd_queue.empty();
      cmd_queue.push_back(std::move(c));
    }
    if (was_empty && parked.load(std::memory_order_seq_cst)) wake();
  }

  void stage_completion(const WorkCompletion& wc, bool reserved) {
    wc_staging.push_back(StagedWc{wc, reserved});
  }

  void flush_completions() {
    if (wc_staging.empty()) return;
    for (auto& s : wc_staging) {
      if (s.reserved) {
        cq().push_reserved(s.wc);
      } else if (!cq().push_unreserved(s.wc)) {
        ctr().imm_notify_dropped.fetch_add(1, std::memory_order_relaxed);
      }
    }
    wc_staging.clear();
  }

  void run_sync(std::function<void()> fn) {
    auto done = std::make_shared<std::promise<void>>();
    auto fut = done->get_future();
    Command c;
    c.type = Command::Type::kSync;
    c.fn = std::move(fn);
    c.done = done;
    enqueue(std::move(c));
    fut.wait();
  }

  void unpin_region(uint32_t stag) {
    std::lock_guard lk(reg_mu);
    auto it = regions.find(stag);
    if (it != regions.end() && it->second.pins > 0) it->second.pins--;
  }

  // Base pointer when the region is live and [off, off+len) fits; else null.
  std::byte* region_span(uint32_t stag, uint64_t off, uint64_t len) {
    std::lock_guard lk(reg_mu);
    auto it = regions.find(stag);
    if (it == regions.end()) return nullptr;
    if (off + len > it->second.length) return nullptr;
    return it->second.base + off;
  }

  // -------------------------------------------------------------- raw sends ---

  void account_tx(size_t bytes) {
    ctr().datagrams_tx.fetch_add(1, std::memory_order_relaxed);
    ctr().bytes_tx.fetch_add(bytes, std::memory_order_relaxed);
  }

  void send_raw(const sockaddr_in& dest, std::span<const std::byte> bytes) {
    dbg_sendto++;
    ssize_t n = sendto(sock, bytes.data(), bytes.size(), 0,
                       reinterpret_cast<const sockaddr*>(&dest), sizeof(dest));
    if (n < 0) {
      if (errno == EAGAIN || errno == EWOULDBLOCK) {
        ctr().tx_would_block.fetch_add(1, std::memory_order_relaxed);
        tx_backlog.push_back(OwnedDatagram{dest, {bytes.begin(), bytes.end()}});
        tx_blocked = true;
        return;
      }
      return;  // datagram lost; unreliable service
    }
    account_tx(bytes.size());
  }

  // Filtered datagrams travel through the impairment filter with their
  // destination prefixed, so reorder-held entries stay routable and can be
  // flushed when the filter is swapped out or the endpoint closes.
  void send_prefixed(std::span<const std::byte> d) {
    if (d.size() < sizeof(sockaddr_in)) return;
    sockaddr_in dest;
    std::memcpy(&dest, d.data(), sizeof(dest));
    send_raw(dest, d.subspan(sizeof(dest)));
  }

  void feed_tx_filter(const sockaddr_in& dest, std::span<const std::byte> hdr,
                      std::span<const std::byte> payload) {
    tx_assembly.resize(sizeof(dest) + hdr.size() + payload.size());
    std::memcpy(tx_assembly.data(), &dest, sizeof(dest));
    std::memcpy(tx_assembly.data() + sizeof(dest), hdr.data(), hdr.size());
    if (!payload.empty())
      std::memcpy(tx_assembly.data() + sizeof(dest) + hdr.size(), payload.data(),
                  payload.size());
    tx_filter->feed(std::span<const std::byte>(tx_assembly),
                    [&](std::span<const std::byte> d) { send_prefixed(d); });
  }

  void flush_tx_filter() {
    if (tx_filter) tx_filter->flush([&](std::span<const std::byte> d) { send_prefixed(d); });
  }

  // One datagram through the tx impairment filter (control plane and the
  // filtered data path use this; unimpaired data goes through the batch).
  void tx_datagram(const sockaddr_in& dest, std::span<const std::byte> bytes) {
    if (tx_filter) {
      feed_tx_filter(dest, bytes, {});
    } else {
      send_raw(dest, bytes);
    }
  }

  // ----------------------------------------------------------- tx batching ---

  void flush_tx_batch() {
    int sent_total = 0;
    while (sent_total < tx_n) {
      dbg_sendmmsg++;
      int n = sendmmsg(sock, tx_msgs + sent_total, unsigned(tx_n - sent_total), 0);
      if (n < 0) {
        if (errno == EINTR) continue;
        if (errno == EAGAIN || errno == EWOULDBLOCK) {
          ctr().tx_would_block.fetch_add(1, std::memory_order_relaxed);
          tx_blocked = true;
          // keep the unsent tail; batch buffers are reused next round
          for (int i = sent_total; i < tx_n; i++) {
            OwnedDatagram d;
            d.dest = tx_dests[i];
            auto& iv = tx_iovs[i];
            d.bytes.reserve(iv[0].iov_len + iv[1].iov_len);
            auto* p0 = static_cast<const std::byte*>(iv[0].iov_base);
            d.bytes.insert(d.bytes.end(), p0, p0 + iv[0].iov_len);
            if (iv[1].iov_len > 0) {
              auto* p1 = static_cast<const std::byte*>(iv[1].iov_base);
              d.bytes.insert(d.bytes.end(), p1, p1 + iv[1].iov_len);
            }
            tx_backlog.push_back(std::move(d));
          }
          break;
        }
        break;
      }
      for (int i = sent_total; i < sent_total + n; i++)
        account_tx(tx_iovs[i][0].iov_len + tx_iovs[i][1].iov_len);
      sent_total += n;
    }
    tx_n = 0;
  }

  void batch_add(const sockaddr_in& dest, std::span<const std::byte> hdr,
                 std::span<const std::byte> payload) {
    int i = tx_n++;
    tx_dests[i] = dest;
    std::memcpy(tx_hdrs[i], hdr.data(), wire::kHeaderSize);
    tx_iovs[i][0] = {tx_hdrs[i], wire::kHeaderSize};
    tx_iovs[i][1] = {const_cast<std::byte*>(payload.data()), payload.size()};
    auto& mh = tx_msgs[i];
    std::memset(&mh, 0, sizeof(mh));
    mh.msg_hdr.msg_name = &tx_dests[i];
    mh.msg_hdr.msg_namelen = sizeof(sockaddr_in);
    mh.msg_hdr.msg_iov = tx_iovs[i];
    mh.msg_hdr.msg_iovlen = payload.empty() ? 1 : 2;
    if (tx_n == kTxBatch) flush_tx_batch();
  }

  // Emit one data fragment. Payload views reference registered memory
  // directly; nothing is staged unless an impairment filter needs to see the
  // datagram as contiguous bytes.
  void emit_fragment(const sockaddr_in& dest, const DatagramHeader& h,
                     std::span<const std::byte> payload) {
    std::byte hdr[wire::kHeaderSize];
    wire::encode_header(h, std::span<std::byte, wire::kHeaderSize>(hdr, wire::kHeaderSize));
    if (tx_filter) {
      feed_tx_filter(dest, std::span<const std::byte>(hdr, wire::kHeaderSize), payload);
    } else {
      batch_add(dest, std::span<const std::byte>(hdr, wire::kHeaderSize), payload);
    }
  }

  // ----------------------------------------------------------------- control ---

  std::vector<std::byte> make_control(Opcode op, uint32_t conn_id,
                                      std::span<const std::byte> payload) {
    DatagramHeader h;
    h.opcode = op;
    h.conn_id = conn_id;
    h.msg_len = static_cast<uint32_t>(payload.size());
    h.flags = wire::kFlagFirst | wire::kFlagLast;
    std::vector<std::byte> out(wire::kHeaderSize + payload.size());
    wire::encode_header(h,
                        std::span<std::byte, wire::kHeaderSize>(out.data(), wire::kHeaderSize));
    if (!payload.empty())
      std::memcpy(out.data() + wire::kHeaderSize, payload.data(), payload.size());
    return out;
  }

  std::vector<std::byte> make_conn_ctrl(Opcode op, uint32_t header_conn_id,
                                        uint32_t proposed_id) {
    wire::ConnPayload p;
    p.proposed_conn_id = proposed_id;
    p.features = cfg.read_enabled ? wire::kFeatureReadEnabled : 0;
    std::byte buf[wire::kConnPayloadSize];
    wire::encode_conn_payload(p, std::span<std::byte, wire::kConnPayloadSize>(buf, sizeof(buf)));
    return make_control(op, header_conn_id, std::span<const std::byte>(buf, sizeof(buf)));
  }

  void arm_retx(Connection& c, int transmissions_left) {
    c.retx_left = transmissions_left;
    c.next_retx = Clock::now() + cfg.connect_retransmit.interval;
    c.retx_armed = true;
  }

  void fail_connect(Connection& c) {
    if (!c.qp) return;
    c.qp->state_.store(QueuePair::State::kError, std::memory_order_release);
    std::lock_guard lk(c.qp->conn_mu_);
    c.qp->connect_outcome_ = QueuePair::ConnectOutcome::kTimeout;
    c.qp->conn_cv_.notify_all();
  }

  void signal_connected(Connection& c) {
    if (!c.qp) return;
    c.qp->peer_features_.store(c.peer_features, std::memory_order_release);
    c.qp->state_.store(QueuePair::State::kConnected, std::memory_order_release);
    std::lock_guard lk(c.qp->conn_mu_);
    c.qp->connect_outcome_ = QueuePair::ConnectOutcome::kOk;
    c.qp->conn_cv_.notify_all();
  }

  static WcOpcode wc_opcode_of(WrOpcode op) {
    switch (op) {
      case WrOpcode::kSend: return WcOpcode::kSend;
      case WrOpcode::kWrite: return WcOpcode::kWrite;
      case WrOpcode::kWriteImm: return WcOpcode::kWriteImm;
      case WrOpcode::kRead: return WcOpcode::kRead;
      case WrOpcode::kRecv: return WcOpcode::kRecv;
    }
    return WcOpcode::kSend;
  }

  // Flush all not-yet-completed work on a connection with FLUSHED status.
  void flush_connection(Connection& c) {
    for (auto& ps : c.send_queue) {
      unpin_region(ps.stag);
      WorkCompletion wc;
      wc.wr_id = ps.wr_id;
      wc.opcode = wc_opcode_of(ps.opcode);
      wc.status = WcStatus::kFlushed;
      wc.msn = ps.msn;
      stage_completion(wc, true);
      if (ps.opcode == WrOpcode::kRead && ps.qp)
        ps.qp->outstanding_reads_.fetch_sub(1, std::memory_order_relaxed);
    }
    c.send_queue.clear();
    for (auto& rs : c.responder_queue) unpin_region(rs.src_stag);
    c.responder_queue.clear();
    for (auto& pr : c.recv_queue) {
      unpin_region(pr.stag);
      WorkCompletion wc;
      wc.wr_id = pr.wr_id;
      wc.opcode = WcOpcode::kRecv;
      wc.status = WcStatus::kFlushed;
      stage_completion(wc, true);
    }
    c.recv_queue.clear();
    for (auto& [id, rs] : c.reads) {
      unpin_region(rs.sink_stag);
      WorkCompletion wc;
      wc.wr_id = rs.wr_id;
      wc.opcode = WcOpcode::kRead;
      wc.status = WcStatus::kFlushed;
      wc.msn = rs.read_id;
      stage_completion(wc, true);
      if (rs.qp) rs.qp->outstanding_reads_.fetch_sub(1, std::memory_order_relaxed);
    }
    c.reads.clear();
    c.tagged_rx.clear();
    c.untagged_rx.reset();
  }

  void close_connection(Connection& c) {
    if (c.state == cm::ConnState::kClosed) return;
    if (c.state == cm::ConnState::kReqSent) fail_connect(c);
    if (c.state == cm::ConnState::kRepSent && pending_handshakes > 0) pending_handshakes--;
    c.state = cm::ConnState::kClosed;
    c.closed_at = Clock::now();
    c.retx_armed = false;
    if (c.qp) c.qp->state_.store(QueuePair::State::kClosed, std::memory_order_release);
    flush_connection(c);
  }

  // -------------------------------------------------------------- commands ---

  void process_commands() {
    std::vector<Command> cmds;
    {
      std::lock_guard lk(cmd_mu);
      cmds.swap(cmd_queue);
    }
    if (!cmds.empty()) {
      dbg_cmd_batches++;
      dbg_cmds += cmds.size();
    }
    for (auto& c : cmds) {
      switch (c.type) {
        case Command::Type::kStop: stopping = true; break;
        case Command::Type::kSync:
          if (c.fn) c.fn();
          if (c.done) c.done->set_value();
          break;
        case Command::Type::kConnect: do_connect(c); break;
        case Command::Type::kDisconnect: do_disconnect(c); break;
        case Command::Type::kSend: do_post_send(c); break;
        case Command::Type::kRecv: do_post_recv(c); break;
      }
    }
  }

  std::shared_ptr<Connection> conn_of(const std::shared_ptr<QueuePair>& qp) {
    uint32_t id = qp->conn_id_.load(std::memory_order_acquire);
    auto it = conns.find(id);
    return it == conns.end() ? nullptr : it->second;
  }

  void do_connect(Command& c) {
    auto conn = std::make_shared<Connection>();
    conn->local_id = next_conn_id.fetch_add(1);
    conn->peer = c.peer;
    conn->state = cm::ConnState::kReqSent;
    conn->qp = c.qp;
    conns[conn->local_id] = conn;
    c.qp->conn_id_.store(conn->local_id, std::memory_order_release);
    conn->cached_ctrl = make_conn_ctrl(Opcode::kConnReq, 0, conn->local_id);
    tx_datagram(conn->peer, conn->cached_ctrl);
    arm_retx(*conn, cfg.connect_retransmit.budget - 1);
  }

  void do_disconnect(Command& c) {
    auto conn = conn_of(c.qp);
    if (conn && conn->state == cm::ConnState::kEstablished) {
      conn->cached_ctrl = make_control(Opcode::kDisconnect, conn->remote_id, {});
      tx_datagram(conn->peer, conn->cached_ctrl);
      close_connection(*conn);
      arm_retx(*conn, cfg.disconnect_transmissions - 1);  // fire-and-forget repeats
    }
    if (c.done) c.done->set_value();
  }

  void flush_one(const Command& c, WcOpcode op) {
    unpin_region(c.wr.local.stag);
    WorkCompletion wc;
    wc.wr_id = c.wr.wr_id;
    wc.opcode = op;
    wc.status = WcStatus::kFlushed;
    wc.msn = c.msn;
    stage_completion(wc, true);
  }

  void do_post_send(Command& c) {
    auto conn = conn_of(c.qp);
    if (!conn || conn->state != cm::ConnState::kEstablished) {
      flush_one(c, wc_opcode_of(c.wr.opcode));
      if (c.wr.opcode == WrOpcode::kRead)
        c.qp->outstanding_reads_.fetch_sub(1, std::memory_order_relaxed);
      return;
    }
    PendingSend ps;
    ps.qp = c.qp;
    ps.wr_id = c.wr.wr_id;
    ps.opcode = c.wr.opcode;
    ps.msn = c.msn;
    ps.stag = c.wr.local.stag;
    ps.offset = c.wr.local.offset;
    ps.length = c.wr.local.length;
    ps.remote = c.wr.remote;
    ps.imm = c.wr.imm;
    conn->send_queue.push_back(std::move(ps));
  }

  void do_post_recv(Command& c) {
    auto conn = conn_of(c.qp);
    if (!conn || conn->state == cm::ConnState::kClosed) {
      flush_one(c, WcOpcode::kRecv);
      return;
    }
    conn->recv_queue.push_back(
        PostedRecv{c.wr.wr_id, c.wr.local.stag, c.wr.local.offset, c.wr.local.length});
  }

  // --------------------------------------------------------------- tx pump ---

  void drain_backlog() {
    while (!tx_backlog.empty()) {
      auto& d = tx_backlog.front();
      ssize_t n = sendto(sock, d.bytes.data(), d.bytes.size(), 0,
                         reinterpret_cast<sockaddr*>(&d.dest), sizeof(d.dest));
      if (n < 0) {
        if (errno == EAGAIN || errno == EWOULDBLOCK) {
          tx_blocked = true;
          return;
        }
        tx_backlog.pop_front();
        continue;
      }
      account_tx(d.bytes.size());
      tx_backlog.pop_front();
    }
  }

  void complete_send(PendingSend& ps) {
    if (ps.opcode == WrOpcode::kRead) return;  // completes with the response or timer
    unpin_region(ps.stag);
    WorkCompletion wc;
    wc.wr_id = ps.wr_id;
    wc.opcode = wc_opcode_of(ps.opcode);
    wc.status = WcStatus::kSuccess;
    wc.byte_len = ps.length;
    wc.msn = ps.msn;
    stage_completion(wc, true);
  }

  int pump_send(Connection& conn, PendingSend& ps, int quota) {
    int used = 0;
    const uint32_t nfrag = engine::fragment_count(ps.length, cfg.max_payload);
    if (ps.opcode == WrOpcode::kRead) {
      if (quota > 0 && !tx_blocked) {
        emit_read_request(conn, ps);
        ps.next_frag = nfrag;
        used = 1;
      }
      return used;
    }
    while (ps.next_frag < nfrag && used < quota && !tx_blocked) {
      auto fb = engine::fragment_bound(ps.length, cfg.max_payload, ps.next_frag);
      std::byte* src = region_span(ps.stag, ps.offset + fb.offset, fb.length);
      if (!src) {  // pinned regions cannot vanish; length-0 spans still resolve
        ps.next_frag = nfrag;
        break;
      }
      DatagramHeader h;
      h.opcode = ps.opcode == WrOpcode::kSend    ? Opcode::kSend
                 : ps.opcode == WrOpcode::kWrite ? Opcode::kWrite
                                                 : Opcode::kWriteImm;
      h.flags = (fb.first ? wire::kFlagFirst : 0) | (fb.last ? wire::kFlagLast : 0);
      h.conn_id = conn.remote_id;
      h.msn = ps.msn;
      h.frag_offset = fb.offset;
      h.msg_len = ps.length;
      if (ps.opcode != WrOpcode::kSend) {
        h.stag = ps.remote.stag;
        h.tagged_offset = ps.remote.offset;
      }
      if (ps.opcode == WrOpcode::kWriteImm) h.imm = ps.imm;
      emit_fragment(conn.peer, h, std::span<const std::byte>(src, fb.length));
      ps.next_frag++;
      used++;
    }
    return used;
  }

  void emit_read_request(Connection& conn, PendingSend& ps) {
    // initiator state exists before the request hits the wire; the response
    // cannot overtake us since both run on this thread
    ReadState rs(ps.msn, ps.length);
    rs.wr_id = ps.wr_id;
    rs.qp = ps.qp;
    rs.sink_stag = ps.stag;
    rs.sink_offset = ps.offset;
    if (cfg.read_timeout) rs.deadline = Clock::now() + *cfg.read_timeout;
    conn.reads.emplace(ps.msn, std::move(rs));
    // the sink region pin taken at post time now belongs to the ReadState

    ReadRequestPayload p;
    p.source_stag = ps.remote.stag;
    p.source_offset = ps.remote.offset;
    p.sink_stag = ps.stag;
    p.sink_offset = ps.offset;
    p.read_len = ps.length;
    std::byte payload[wire::kReadRequestSize];
    wire::encode_read_request(
        p, std::span<std::byte, wire::kReadRequestSize>(payload, sizeof(payload)));

    DatagramHeader h;
    h.opcode = Opcode::kReadReq;
    h.flags = wire::kFlagFirst | wire::kFlagLast;
    h.conn_id = conn.remote_id;
    h.msn = ps.msn;  // the read id travels in the msn field
    h.msg_len = wire::kReadRequestSize;
    // sent immediately: the tx batch holds payload views, and this payload
    // lives on our stack rather than in a registered region
    std::byte dgram[wire::kHeaderSize + wire::kReadRequestSize];
    wire::encode_header(h, std::span<std::byte, wire::kHeaderSize>(dgram, wire::kHeaderSize));
    std::memcpy(dgram + wire::kHeaderSize, payload, sizeof(payload));
    tx_datagram(conn.peer, std::span<const std::byte>(dgram, sizeof(dgram)));
  }

  int pump_responder(Connection& conn, ResponderSend& rs, int quota) {
    int used = 0;
    const uint32_t nfrag = engine::fragment_count(rs.length, cfg.max_payload);
    while (rs.next_frag < nfrag && used < quota && !tx_blocked) {
      auto fb = engine::fragment_bound(rs.length, cfg.max_payload, rs.next_frag);
      std::byte* src = region_span(rs.src_stag, rs.src_offset + fb.offset, fb.length);
      if (!src) {
        rs.next_frag = nfrag;
        break;
      }
      DatagramHeader h;
      h.opcode = Opcode::kReadResp;
      h.flags = (fb.first ? wire::kFlagFirst : 0) | (fb.last ? wire::kFlagLast : 0);
      h.conn_id = conn.remote_id;
      h.msn = rs.read_id;  // echoed read id
      h.frag_offset = fb.offset;
      h.msg_len = rs.length;
      h.stag = rs.sink_stag;
      h.tagged_offset = rs.sink_offset;
      emit_fragment(conn.peer, h, std::span<const std::byte>(src, fb.length));
      rs.next_frag++;
      used++;
    }
    return used;
  }

  bool any_tx_work() {
    if (!tx_backlog.empty()) return true;
    for (auto& [id, c] : conns)
      if (c->state == cm::ConnState::kEstablished && c->has_tx_work()) return true;
    return false;
  }

  void pump_tx() {
    tx_blocked = false;
    drain_backlog();
    int quota = kTxDatagramsPerIter;
    bool progress_made = true;
    std::vector<PendingSend> finished;  // completed after the final flush
    while (quota > 0 && progress_made && !tx_blocked) {
      progress_made = false;
      for (auto& [id, connp] : conns) {
        Connection& conn = *connp;
        if (conn.state != cm::ConnState::kEstablished) continue;
        int burst = std::min(quota, kTxBatch);
        while (!conn.responder_queue.empty() && burst > 0 && !tx_blocked) {
          auto& rs = conn.responder_queue.front();
          int used = pump_responder(conn, rs, burst);
          burst -= used;
          quota -= used;
          if (used > 0) progress_made = true;
          if (rs.next_frag >= engine::fragment_count(rs.length, cfg.max_payload)) {
            unpin_region(rs.src_stag);
            conn.responder_queue.pop_front();
          } else {
            break;
          }
        }
        while (!conn.send_queue.empty() && burst > 0 && !tx_blocked) {
          auto& ps = conn.send_queue.front();
          int used = pump_send(conn, ps, burst);
          burst -= used;
          quota -= used;
          if (used > 0) progress_made = true;
          if (ps.next_frag >= engine::fragment_count(ps.length, cfg.max_payload)) {
            finished.push_back(std::move(ps));
            conn.send_queue.pop_front();
          } else {
            break;
          }
        }
        if (quota <= 0 || tx_blocked) break;
      }
    }
    if (tx_n > 0) flush_tx_batch();
    // SUCCESS means handed to the socket, so completions follow the flush
    for (auto& ps : finished) complete_send(ps);
  }

  // ---------------------------------------------------------------- rx path ---

  void setup_rx_slots() {
    rx_bufs.resize(size_t(kRxBatch) * kRxSlotBytes);
    for (int i = 0; i < kRxBatch; i++)
      rx_iovs[i] = {rx_bufs.data() + size_t(i) * kRxSlotBytes, kRxSlotBytes};
  }

  void reset_rx_headers() {
    for (int i = 0; i < kRxBatch; i++) {
      auto& mh = rx_msgs[i];
      std::memset(&mh, 0, sizeof(mh));
      mh.msg_hdr.msg_iov = &rx_iovs[i];
      mh.msg_hdr.msg_iovlen = 1;
      mh.msg_hdr.msg_name = &rx_srcs[i];
      mh.msg_hdr.msg_namelen = sizeof(sockaddr_in);
    }
  }

  bool rx_round() {
    reset_rx_headers();
    dbg_recvmmsg++;
    int n = recvmmsg(sock, rx_msgs, kRxBatch, 0, nullptr);
    if (n <= 0) {
      dbg_recvmmsg_empty++;
      return false;
    }
    last_rx_count += n;
    dbg_rx_dgrams += uint64_t(n);
    for (int i = 0; i < n; i++) {
      size_t len = rx_msgs[i].msg_len;
      ctr().datagrams_rx.fetch_add(1, std::memory_order_relaxed);
      ctr().bytes_rx.fetch_add(len, std::memory_order_relaxed);
      if (rx_msgs[i].msg_hdr.msg_flags & MSG_TRUNC) {
        ctr().malformed_rx.fetch_add(1, std::memory_order_relaxed);
        continue;
      }
      std::span<const std::byte> d(rx_bufs.data() + size_t(i) * kRxSlotBytes, len);
      if (rx_filter) {
        rx_assembly.resize(sizeof(sockaddr_in) + len);
        std::memcpy(rx_assembly.data(), &rx_srcs[i], sizeof(sockaddr_in));
        std::memcpy(rx_assembly.data() + sizeof(sockaddr_in), d.data(), len);
        rx_filter->feed(std::span<const std::byte>(rx_assembly),
                        [&](std::span<const std::byte> out) { process_prefixed(out); });
      } else {
        process_datagram(d, rx_srcs[i]);
      }
    }
    return n == kRxBatch;
  }

  void process_prefixed(std::span<const std::byte> d) {
    if (d.size() < sizeof(sockaddr_in)) return;
    sockaddr_in from;
    std::memcpy(&from, d.data(), sizeof(from));
    process_datagram(d.subspan(sizeof(from)), from);
  }

  void process_datagram(std::span<const std::byte> d, const sockaddr_in& from) {
    DecodeError err;
    auto hopt = wire::decode_header(d, err);
    if (!hopt) {
      ctr().malformed_rx.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    const DatagramHeader& h = *hopt;
    std::span<const std::byte> payload = d.subspan(wire::kHeaderSize);

    if (wire::is_control_opcode(h.opcode)) {
      handle_control(h, payload, from);
      return;
    }

    auto it = conns.find(h.conn_id);
    if (it == conns.end()) {
      ctr().unknown_conn.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    Connection& conn = *it->second;
    switch (conn.state) {
      case cm::ConnState::kRepSent:
        establish_server_side(conn);  // first data datagram acts as CONN_RTU
        break;
      case cm::ConnState::kEstablished:
        break;
      case cm::ConnState::kClosed:
        ctr().data_after_close.fetch_add(1, std::memory_order_relaxed);
        return;
      default:
        ctr().unknown_conn.fetch_add(1, std::memory_order_relaxed);
        return;
    }

    switch (h.opcode) {
      case Opcode::kSend: place_untagged(conn, h, payload); break;
      case Opcode::kWrite:
      case Opcode::kWriteImm: place_tagged(conn, h, payload); break;
      case Opcode::kReadReq: handle_read_request(conn, h, payload); break;
      case Opcode::kReadResp: place_read_response(conn, h, payload); break;
      default: break;
    }
  }

  // ------------------------------------------------------------- cm handlers ---

  void establish_server_side(Connection& conn) {
    if (pending_handshakes > 0) pending_handshakes--;
    conn.state = cm::ConnState::kEstablished;
    conn.retx_armed = false;
    if (conn.qp) conn.qp->state_.store(QueuePair::State::kConnected, std::memory_order_release);
    {
      std::lock_guard lk(accept_mu);
      accept_queue.push_back(conn.qp);
    }
    accept_cv.notify_one();
  }

  void handle_control(const DatagramHeader& h, std::span<const std::byte> payload,
                      const sockaddr_in& from) {
    switch (h.opcode) {
      case Opcode::kConnReq: {
        auto p = wire::decode_conn_payload(payload);
        if (!p || p->proposed_conn_id == 0 || h.conn_id != 0) {
          ctr().malformed_rx.fetch_add(1, std::memory_order_relaxed);
          return;
        }
        if (!listening) {
          ctr().control_dropped.fetch_add(1, std::memory_order_relaxed);
          return;
        }
        auto key = std::make_tuple(from.sin_addr.s_addr, from.sin_port, p->proposed_conn_id);
        if (auto it = accept_dedup.find(key); it != accept_dedup.end()) {
          if (auto cit = conns.find(it->second); cit != conns.end())
            tx_datagram(from, cit->second->cached_ctrl);  // re-send cached CONN_REP
          return;
        }
        size_t backlog;
        {
          std::lock_guard lk(accept_mu);
          backlog = accept_queue.size();
        }
        if (backlog + pending_handshakes > kAcceptBacklog * 2) {
          ctr().control_dropped.fetch_add(1, std::memory_order_relaxed);
          return;
        }
        auto conn = std::make_shared<Connection>();
        conn->local_id = next_conn_id.fetch_add(1);
        conn->remote_id = p->proposed_conn_id;
        conn->peer = from;
        conn->peer_features = p->features;
        conn->state = cm::ConnState::kRepSent;
        auto qp = std::shared_ptr<QueuePair>(new QueuePair(self));
        qp->conn_id_.store(conn->local_id, std::memory_order_release);
        qp->peer_features_.store(p->features, std::memory_order_release);
        qp->state_.store(QueuePair::State::kConnecting, std::memory_order_release);
        conn->qp = qp;
        conns[conn->local_id] = conn;
        accept_dedup[key] = conn->local_id;
        pending_handshakes++;
        conn->cached_ctrl = make_conn_ctrl(Opcode::kConnRep, conn->remote_id, conn->local_id);
        tx_datagram(from, conn->cached_ctrl);
        arm_retx(*conn, cfg.connect_retransmit.budget - 1);
        break;
      }
      case Opcode::kConnRep: {
        auto p = wire::decode_conn_payload(payload);
        if (!p || p->proposed_conn_id == 0) {
          ctr().malformed_rx.fetch_add(1, std::memory_order_relaxed);
          return;
        }
        auto it = conns.find(h.conn_id);
        if (it == conns.end()) {
          ctr().unknown_conn.fetch_add(1, std::memory_order_relaxed);
          return;
        }
        Connection& conn = *it->second;
        if (conn.state == cm::ConnState::kReqSent) {
          conn.remote_id = p->proposed_conn_id;
          conn.peer_features = p->features;
          conn.state = cm::ConnState::kEstablished;
          conn.retx_armed = false;
          conn.cached_rtu = make_control(Opcode::kConnRtu, conn.remote_id, {});
          tx_datagram(conn.peer, conn.cached_rtu);
          signal_connected(conn);
        } else if (conn.state == cm::ConnState::kEstablished && !conn.cached_rtu.empty()) {
          tx_datagram(conn.peer, conn.cached_rtu);  // our RTU was lost
        }
        break;
      }
      case Opcode::kConnRtu: {
        auto it = conns.find(h.conn_id);
        if (it == conns.end()) {
          ctr().unknown_conn.fetch_add(1, std::memory_order_relaxed);
          return;
        }
        if (it->second->state == cm::ConnState::kRepSent) establish_server_side(*it->second);
        break;
      }
      case Opcode::kDisconnect: {
        auto it = conns.find(h.conn_id);
        if (it == conns.end()) {
          ctr().unknown_conn.fetch_add(1, std::memory_order_relaxed);
          return;
        }
        close_connection(*it->second);
        break;
      }
      default:
        break;
    }
  }

  // ----------------------------------------------------------- placement paths ---

  // Copies the fresh subranges into the target region under the registry
  // lock, so a concurrent deregister cannot release the memory mid-copy.
  void copy_gaps(uint32_t stag, uint64_t target_off, const DatagramHeader& h,
                 std::span<const std::byte> payload,
                 const std::vector<std::pair<uint64_t, uint64_t>>& gaps) {
    std::lock_guard lk(reg_mu);
    auto it = regions.find(stag);
    if (it == regions.end()) return;  // deregistered mid-message: bytes stay undefined
    for (auto [go, gl] : gaps) {
      std::memcpy(it->second.base + target_off + go, payload.data() + (go - h.frag_offset), gl);
      ctr().payload_copy_bytes.fetch_add(gl, std::memory_order_relaxed);
    }
  }

  void place_tagged(Connection& conn, const DatagramHeader& h,
                    std::span<const std::byte> payload) {
    // authorization and bounds precede any state creation
    {
      std::lock_guard lk(reg_mu);
      auto it = regions.find(h.stag);
      if (it == regions.end()) {
        ctr().remote_invalid_stag.fetch_add(1, std::memory_order_relaxed);
        return;
      }
      if (!has_access(it->second.access, Access::kRemoteWrite)) {
        ctr().unauthorized_access.fetch_add(1, std::memory_order_relaxed);
        return;
      }
      if (h.tagged_offset + uint64_t(h.msg_len) > it->second.length) {
        ctr().bounds_violation.fetch_add(1, std::memory_order_relaxed);
        return;
      }
    }

    auto sit = conn.tagged_rx.find(h.msn);
    if (sit == conn.tagged_rx.end()) {
      if (h.msn < conn.next_fresh_tagged_msn) {
        ctr().stale_fragment.fetch_add(1, std::memory_order_relaxed);
        return;
      }
      if (conn.tagged_rx.size() >= cfg.reassembly_window) {
        // window pressure evicts the oldest incomplete message
        conn.tagged_rx.erase(conn.tagged_rx.begin());
        ctr().messages_dropped_incomplete.fetch_add(1, std::memory_order_relaxed);
      }
      Reassembly r(h.msn, h.msg_len, h.opcode);
      r.stag = h.stag;
      r.tagged_offset = h.tagged_offset;
      r.last_activity = Clock::now();
      sit = conn.tagged_rx.emplace(h.msn, std::move(r)).first;
      conn.next_fresh_tagged_msn = h.msn + 1;
    }
    Reassembly& st = sit->second;
    if (st.msg_len != h.msg_len || st.stag != h.stag || st.tagged_offset != h.tagged_offset ||
        st.opcode != h.opcode) {
      ctr().malformed_rx.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    st.last_activity = Clock::now();
    if (h.opcode == Opcode::kWriteImm) st.imm = h.imm;

    auto& gaps = gaps_scratch;
    gaps.clear();
    uint64_t fresh = st.cov.add(h.frag_offset, payload.size(), gaps);
    if (fresh == 0 && !payload.empty())
      ctr().duplicate_fragment.fetch_add(1, std::memory_order_relaxed);
    if (!gaps.empty()) copy_gaps(h.stag, h.tagged_offset, h, payload, gaps);

    if (st.cov.complete()) {
      ctr().messages_completed.fetch_add(1, std::memory_order_relaxed);
      ctr().delivered_payload_bytes.fetch_add(st.msg_len, std::memory_order_relaxed);
      if (st.opcode == Opcode::kWriteImm) {
        WorkCompletion wc;
        wc.opcode = WcOpcode::kRecvWriteImm;
        wc.status = WcStatus::kSuccess;
        wc.byte_len = st.msg_len;
        wc.imm_valid = true;
        wc.imm = st.imm;
        wc.msn = st.msn;
        stage_completion(wc, false);
      }
      conn.tagged_rx.erase(sit);
    }
  }

  void place_untagged(Connection& conn, const DatagramHeader& h,
                      std::span<const std::byte> payload) {
    if (h.msn < conn.untagged_floor ||
        (conn.untagged_rx && h.msn < conn.untagged_rx->msn)) {
      ctr().stale_fragment.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    if (conn.untagged_rx && h.msn > conn.untagged_rx->msn) {
      // a newer message claims the head buffer; the incomplete one is
      // silently dropped and the buffer is reused
      conn.untagged_floor = uint64_t(conn.untagged_rx->msn) + 1;
      conn.untagged_rx.reset();
      ctr().messages_dropped_incomplete.fetch_add(1, std::memory_order_relaxed);
    }
    if (!conn.untagged_rx) {
      if (conn.recv_queue.empty()) {
        ctr().recv_no_buffer.fetch_add(1, std::memory_order_relaxed);
        conn.untagged_floor = uint64_t(h.msn) + 1;
        return;
      }
      if (h.msg_len > conn.recv_queue.front().length) {
        ctr().recv_too_small.fetch_add(1, std::memory_order_relaxed);
        conn.untagged_floor = uint64_t(h.msn) + 1;
        return;
      }
      conn.untagged_rx.emplace(h.msn, h.msg_len, Opcode::kSend);
      conn.untagged_rx->last_activity = Clock::now();
    }
    Reassembly& st = *conn.untagged_rx;
    if (st.msg_len != h.msg_len) {
      ctr().malformed_rx.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    st.last_activity = Clock::now();

    PostedRecv& pr = conn.recv_queue.front();
    auto& gaps = gaps_scratch;
    gaps.clear();
    uint64_t fresh = st.cov.add(h.frag_offset, payload.size(), gaps);
    if (fresh == 0 && !payload.empty())
      ctr().duplicate_fragment.fetch_add(1, std::memory_order_relaxed);
    if (!gaps.empty()) copy_gaps(pr.stag, pr.offset, h, payload, gaps);

    if (st.cov.complete()) {
      ctr().messages_completed.fetch_add(1, std::memory_order_relaxed);
      ctr().delivered_payload_bytes.fetch_add(st.msg_len, std::memory_order_relaxed);
      WorkCompletion wc;
      wc.wr_id = pr.wr_id;
      wc.opcode = WcOpcode::kRecv;
      wc.status = WcStatus::kSuccess;
      wc.byte_len = st.msg_len;
      wc.msn = st.msn;
      stage_completion(wc, true);
      unpin_region(pr.stag);
      conn.recv_queue.pop_front();
      conn.untagged_floor = uint64_t(st.msn) + 1;
      conn.untagged_rx.reset();
    }
  }

  void handle_read_request(Connection& conn, const DatagramHeader& h,
                           std::span<const std::byte> payload) {
    auto req = wire::decode_read_request(payload);
    if (!req) {
      ctr().malformed_rx.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    if (conn.last_read_id_served && h.msn <= *conn.last_read_id_served) {
      ctr().duplicate_read_req.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    {
      std::lock_guard lk(reg_mu);
      auto it = regions.find(req->source_stag);
      if (it == regions.end()) {
        ctr().remote_invalid_stag.fetch_add(1, std::memory_order_relaxed);
        return;
      }
      if (!has_access(it->second.access, Access::kRemoteRead)) {
        ctr().unauthorized_access.fetch_add(1, std::memory_order_relaxed);
        return;
      }
      if (req->source_offset + uint64_t(req->read_len) > it->second.length) {
        ctr().bounds_violation.fetch_add(1, std::memory_order_relaxed);
        return;
      }
      it->second.pins++;  // the in-flight response references the region
    }
    conn.last_read_id_served = h.msn;
    ResponderSend rs;
    rs.read_id = h.msn;
    rs.src_stag = req->source_stag;
    rs.src_offset = req->source_offset;
    rs.sink_stag = req->sink_stag;
    rs.sink_offset = req->sink_offset;
    rs.length = req->read_len;
    conn.responder_queue.push_back(rs);
  }

  void place_read_response(Connection& conn, const DatagramHeader& h,
                           std::span<const std::byte> payload) {
    auto it = conn.reads.find(h.msn);
    if (it == conn.reads.end()) {
      ctr().read_resp_unmatched.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    ReadState& rs = it->second;
    if (h.stag != rs.sink_stag || h.tagged_offset != rs.sink_offset || h.msg_len != rs.length) {
      ctr().malformed_rx.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    auto& gaps = gaps_scratch;
    gaps.clear();
    uint64_t fresh = rs.cov.add(h.frag_offset, payload.size(), gaps);
    if (fresh == 0 && !payload.empty())
      ctr().duplicate_fragment.fetch_add(1, std::memory_order_relaxed);
    if (!gaps.empty()) copy_gaps(rs.sink_stag, rs.sink_offset, h, payload, gaps);
    if (rs.cov.complete()) {
      ctr().messages_completed.fetch_add(1, std::memory_order_relaxed);
      ctr().delivered_payload_bytes.fetch_add(rs.length, std::memory_order_relaxed);
      WorkCompletion wc;
      wc.wr_id = rs.wr_id;
      wc.opcode = WcOpcode::kRead;
      wc.status = WcStatus::kSuccess;
      wc.byte_len = rs.length;
      wc.msn = rs.read_id;
      stage_completion(wc, true);
      unpin_region(rs.sink_stag);
      if (rs.qp) rs.qp->outstanding_reads_.fetch_sub(1, std::memory_order_relaxed);
      conn.reads.erase(it);
    }
  }

  // ------------------------------------------------------------------ timers ---

  void run_timers() {
    auto now = Clock::now();
    if (now < next_timer_scan) return;
    next_timer_scan = now + std::chrono::milliseconds(5);

    std::vector<uint32_t> to_erase;
    for (auto& [id, connp] : conns) {
      Connection& conn = *connp;

      if (conn.retx_armed && now >= conn.next_retx) {
        if (conn.retx_left > 0) {
          conn.retx_left--;
          conn.next_retx = now + cfg.connect_retransmit.interval;
          tx_datagram(conn.peer, conn.cached_ctrl);
        } else {
          conn.retx_armed = false;
          switch (conn.state) {
            case cm::ConnState::kReqSent:
              fail_connect(conn);
              conn.state = cm::ConnState::kClosed;
              conn.closed_at = now;
              break;
            case cm::ConnState::kRepSent:
              if (pending_handshakes > 0) pending_handshakes--;
              to_erase.push_back(id);  // client never confirmed
              break;
            default:
              break;  // DISCONNECT repeats simply stop
          }
        }
      }

      // reassembly inactivity expiry: silent, keeps the connection intact
      for (auto rit = conn.tagged_rx.begin(); rit != conn.tagged_rx.end();) {
        if (now - rit->second.last_activity >= cfg.reassembly_timeout) {
          rit = conn.tagged_rx.erase(rit);
          ctr().messages_dropped_incomplete.fetch_add(1, std::memory_order_relaxed);
        } else {
          ++rit;
        }
      }
      if (conn.untagged_rx && now - conn.untagged_rx->last_activity >= cfg.reassembly_timeout) {
        conn.untagged_floor = uint64_t(conn.untagged_rx->msn) + 1;
        conn.untagged_rx.reset();
        ctr().messages_dropped_incomplete.fetch_add(1, std::memory_order_relaxed);
      }

      // read deadlines (only armed when read_timeout is configured)
      for (auto rit = conn.reads.begin(); rit != conn.reads.end();) {
        ReadState& rs = rit->second;
        if (rs.deadline && now >= *rs.deadline) {
          WorkCompletion wc;
          wc.wr_id = rs.wr_id;
          wc.opcode = WcOpcode::kRead;
          wc.status = WcStatus::kReadTimeout;
          wc.msn = rs.read_id;
          stage_completion(wc, true);
          ctr().reads_timed_out.fetch_add(1, std::memory_order_relaxed);
          unpin_region(rs.sink_stag);
          if (rs.qp) rs.qp->outstanding_reads_.fetch_sub(1, std::memory_order_relaxed);
          rit = conn.reads.erase(rit);
        } else {
          ++rit;
        }
      }

      if (conn.state == cm::ConnState::kClosed && !conn.retx_armed &&
          now - conn.closed_at >= kClosedLinger)
        to_erase.push_back(id);
    }
    for (uint32_t id : to_erase) {
      auto it = conns.find(id);
      if (it == conns.end()) continue;
      for (auto dit = accept_dedup.begin(); dit != accept_dedup.end();) {
        if (dit->second == id)
          dit = accept_dedup.erase(dit);
        else
          ++dit;
      }
      conns.erase(it);
    }
  }

  // --------------------------------------------------------------- main loop ---

  void run() {
    setup_rx_slots();
    pollfd pfds[2];
    while (!stopping) {
      dbg_iters++;
      process_commands();
      if (stopping) break;

      bool more_rx = true;
      last_rx_count = 0;
      for (int round = 0; round < kRxRoundsPerIter && more_rx; round++) more_rx = rx_round();

      pump_tx();
      run_timers();
      flush_completions();

      int timeout_ms = (more_rx || any_tx_work()) ? 0 : int(kIdlePoll.count());
      parked.store(true, std::memory_order_seq_cst);
      {
        std::lock_guard lk(cmd_mu);
        if (!cmd_queue.empty()) timeout_ms = 0;
      }
      pfds[0] = {sock, POLLIN, 0};
      if (tx_blocked) pfds[0].events |= POLLOUT;
      pfds[1] = {wake_rd, POLLIN, 0};
      dbg_polls++;
      if (timeout_ms == 0) dbg_poll_timeout0++;
      int pr = poll(pfds, 2, timeout_ms);
      parked.store(false, std::memory_order_seq_cst);
      if (pr > 0 && (pfds[1].revents & POLLIN)) {
        char buf[64];
        while (read(wake_rd, buf, sizeof(buf)) > 0) {
        }
      }
    }

    flush_tx_filter();
    drain_backlog();
    for (auto& [id, connp] : conns) close_connection(*connp);
    conns.clear();
    flush_completions();
    dump_stats();
    cq().close();
    {
      std::lock_guard lk(accept_mu);
      accept_queue.clear();
    }
    accept_cv.notify_all();
  }
};

// ---------------------------------------------------------------- public API ---

Endpoint::Endpoint(EndpointConfig cfg)
    : impl_(std::make_unique<EndpointImpl>(this, cfg)),
      cfg_(std::move(cfg)),
      cq_(cfg_.cq_capacity) {
  cfg_.validate();
  impl_->cfg = cfg_;

  int pipefd[2];
  if (pipe(pipefd) < 0) throw std::system_error(errno, std::generic_category(), "pipe");
  impl_->wake_rd = pipefd[0];
  impl_->wake_wr = pipefd[1];
  net::set_nonblocking(impl_->wake_rd);
  net::set_nonblocking(impl_->wake_wr);

  impl_->sock = net::udp_socket();
  try {
    net::bind_to(impl_->sock, net::parse_addr(cfg_.bind_address + ":" + std::to_string(cfg_.port)));
    net::set_buffers(impl_->sock, cfg_.socket_buffer, cfg_.socket_buffer);
    net::set_nonblocking(impl_->sock);
  } catch (...) {
    ::close(impl_->sock);
    ::close(impl_->wake_rd);
    ::close(impl_->wake_wr);
    throw;
  }

  if (cfg_.tx_impair) impl_->tx_filter.emplace(*cfg_.tx_impair);
  if (cfg_.rx_impair) impl_->rx_filter.emplace(*cfg_.rx_impair);

  impl_->progress = std::thread([this] { impl_->run(); });
}

Endpoint::~Endpoint() { close(); }

void Endpoint::close() {
  {
    std::lock_guard lk(impl_->close_mu);
    if (impl_->closed) return;
    impl_->closed = true;
  }
  Command c;
  c.type = Command::Type::kStop;
  impl_->enqueue(std::move(c));
  if (impl_->progress.joinable()) impl_->progress.join();
  ::close(impl_->sock);
  ::close(impl_->wake_rd);
  ::close(impl_->wake_wr);
}

uint16_t Endpoint::port() const { return net::local_port(impl_->sock); }

MemoryRegion Endpoint::register_memory(std::span<std::byte> buffer, Access access) {
  if (buffer.empty()) throw std::invalid_argument("register_memory: zero-length buffer");
  std::lock_guard lk(impl_->reg_mu);
  uint32_t stag = impl_->next_stag++;
  if (stag == 0) stag = impl_->next_stag++;
  impl_->regions[stag] = RegionRecord{buffer.data(), buffer.size(), access, 0};
  return MemoryRegion{stag, buffer, access};
}

void Endpoint::deregister_memory(const MemoryRegion& region) {
  std::lock_guard lk(impl_->reg_mu);
  auto it = impl_->regions.find(region.stag);
  if (it == impl_->regions.end())
    throw std::invalid_argument("deregister_memory: unknown or already-deregistered stag");
  if (it->second.pins > 0)
    throw region_in_use_error("deregister_memory: region referenced by in-flight work");
  impl_->regions.erase(it);
}

std::shared_ptr<QueuePair> Endpoint::create_qp() {
  return std::shared_ptr<QueuePair>(new QueuePair(this));
}

void Endpoint::listen() {
  impl_->run_sync([this] { impl_->listening = true; });
}

std::shared_ptr<QueuePair> Endpoint::accept(std::chrono::milliseconds timeout) {
  std::unique_lock lk(impl_->accept_mu);
  impl_->accept_cv.wait_for(lk, timeout,
                            [&] { return !impl_->accept_queue.empty() || impl_->stopping; });
  if (impl_->accept_queue.empty()) return nullptr;
  auto qp = impl_->accept_queue.front();
  impl_->accept_queue.pop_front();
  return qp;
}

void Endpoint::connect(const std::shared_ptr<QueuePair>& qp, const std::string& peer) {
  auto expected = QueuePair::State::kIdle;
  if (!qp->state_.compare_exchange_strong(expected, QueuePair::State::kConnecting))
    throw bad_state_error("connect: queue pair not idle");
  {
    std::lock_guard lk(qp->conn_mu_);
    qp->connect_outcome_ = QueuePair::ConnectOutcome::kPending;
  }
  Command c;
  c.type = Command::Type::kConnect;
  c.qp = qp;
  c.peer = net::parse_addr(peer);
  impl_->enqueue(std::move(c));

  std::unique_lock lk(qp->conn_mu_);
  auto deadline = cfg_.connect_retransmit.deadline() + std::chrono::milliseconds(500);
  bool done = qp->conn_cv_.wait_for(
      lk, deadline, [&] { return qp->connect_outcome_ != QueuePair::ConnectOutcome::kPending; });
  if (!done || qp->connect_outcome_ != QueuePair::ConnectOutcome::kOk) {
    qp->state_.store(QueuePair::State::kError, std::memory_order_release);
    throw connect_timeout_error("connect: no response from " + peer);
  }
}

void Endpoint::disconnect(const std::shared_ptr<QueuePair>& qp) {
  if (qp->state() != QueuePair::State::kConnected)
    throw bad_state_error("disconnect: queue pair not connected");
  auto done = std::make_shared<std::promise<void>>();
  auto fut = done->get_future();
  Command c;
  c.type = Command::Type::kDisconnect;
  c.qp = qp;
  c.done = done;
  impl_->enqueue(std::move(c));
  fut.wait();
}

void Endpoint::post_send(QueuePair& qp, const WorkRequest& wr) {
  std::lock_guard post_lk(qp.post_mu_);
  if (qp.state() != QueuePair::State::kConnected)
    throw bad_state_error("post_send: queue pair not connected");
  if (wr.opcode == WrOpcode::kRecv)
    throw std::invalid_argument("post_send: RECV is posted via post_recv");

  bool tagged = wr.opcode == WrOpcode::kWrite || wr.opcode == WrOpcode::kWriteImm ||
                wr.opcode == WrOpcode::kRead;
  if (tagged && wr.remote.stag == 0)
    throw std::invalid_argument("post_send: tagged operation requires a remote stag");
  if (!tagged && (wr.remote.stag != 0 || wr.remote.offset != 0))
    throw std::invalid_argument("post_send: remote span only valid for tagged opcodes");
  if (wr.imm != 0 && wr.opcode != WrOpcode::kWriteImm)
    throw std::invalid_argument("post_send: imm requires WRITE_IMM");

  if (wr.opcode == WrOpcode::kRead) {
    if (!cfg_.read_enabled) throw bad_state_error("post_send: READ disabled by configuration");
    if (!(qp.peer_features() & wire::kFeatureReadEnabled))
      throw bad_state_error("post_send: peer does not support READ");
    if (wr.local.length < 1) throw std::invalid_argument("post_send: zero-length read");
    if (qp.outstanding_reads_.load(std::memory_order_relaxed) >= cfg_.max_outstanding_reads)
      throw read_limit_error("post_send: outstanding read limit reached");
  }

  {
    std::lock_guard lk(impl_->reg_mu);
    auto it = impl_->regions.find(wr.local.stag);
    if (it == impl_->regions.end()) throw std::invalid_argument("post_send: unknown local stag");
    if (!has_access(it->second.access, Access::kLocal))
      throw std::invalid_argument("post_send: local region lacks LOCAL access");
    if (wr.local.offset + uint64_t(wr.local.length) > it->second.length)
      throw std::invalid_argument("post_send: local range out of bounds");
    it->second.pins++;
  }

  if (!cq_.try_reserve()) {
    impl_->unpin_region(wr.local.stag);
    throw cq_full_error("post_send: completion queue full");
  }

  Command c;
  c.type = Command::Type::kSend;
  c.qp = qp.shared_from_this();
  c.wr = wr;
  c.msn = qp.next_msn_++;
  if (wr.opcode == WrOpcode::kRead) qp.outstanding_reads_.fetch_add(1, std::memory_order_relaxed);
  impl_->enqueue(std::move(c));
}

void Endpoint::post_recv(QueuePair& qp, const WorkRequest& wr) {
  std::lock_guard post_lk(qp.post_mu_);
  auto st = qp.state();
  if (st != QueuePair::State::kConnected && st != QueuePair::State::kConnecting)
    throw bad_state_error("post_recv: queue pair not connected or connecting");
  if (wr.opcode != WrOpcode::kRecv) throw std::invalid_argument("post_recv: opcode must be RECV");
  if (wr.remote.stag != 0) throw std::invalid_argument("post_recv: remote span not allowed");

  {
    std::lock_guard lk(impl_->reg_mu);
    auto it = impl_->regions.find(wr.local.stag);
    if (it == impl_->regions.end()) throw std::invalid_argument("post_recv: unknown local stag");
    if (!has_access(it->second.access, Access::kLocal))
      throw std::invalid_argument("post_recv: local region lacks LOCAL access");
    if (wr.local.offset + uint64_t(wr.local.length) > it->second.length)
      throw std::invalid_argument("post_recv: local range out of bounds");
    it->second.pins++;
  }

  if (!cq_.try_reserve()) {
    impl_->unpin_region(wr.local.stag);
    throw cq_full_error("post_recv: completion queue full");
  }

  Command c;
  c.type = Command::Type::kRecv;
  c.qp = qp.shared_from_this();
  c.wr = wr;
  impl_->enqueue(std::move(c));
}

void Endpoint::set_tx_impair(std::optional<ImpairmentSpec> spec) {
  impl_->run_sync([this, spec] {
    impl_->flush_tx_filter();  // held datagrams still go out
    if (spec)
      impl_->tx_filter.emplace(*spec);
    else
      impl_->tx_filter.reset();
  });
}

void Endpoint::set_rx_impair(std::optional<ImpairmentSpec> spec) {
  impl_->run_sync([this, spec] {
    if (impl_->rx_filter)
      impl_->rx_filter->flush(
          [&](std::span<const std::byte> d) { impl_->process_prefixed(d); });
    if (spec)
      impl_->rx_filter.emplace(*spec);
    else
      impl_->rx_filter.reset();
  });
}

ImpairmentFilter::Stats Endpoint::tx_impair_stats() {
  ImpairmentFilter::Stats out{};
  impl_->run_sync([this, &out] {
    if (impl_->tx_filter) out = impl_->tx_filter->stats();
  });
  return out;
}

ImpairmentFilter::Stats Endpoint::rx_impair_stats() {
  ImpairmentFilter::Stats out{};
  impl_->run_sync([this, &out] {
    if (impl_->rx_filter) out = impl_->rx_filter->stats();
  });
  return out;
}

void QueuePair::post_send(const WorkRequest& wr) { ep_->post_send(*this, wr); }
void QueuePair::post_recv(const WorkRequest& wr) { ep_->post_recv(*this, wr); }

namespace cm {
const char* to_string(ConnState s) {
  switch (s) {
    case ConnState::kReqSent: return "REQ_SENT";
    case ConnState::kRepSent: return "REP_SENT";
    case ConnState::kEstablished: return "ESTABLISHED";
    case ConnState::kClosed: return "CLOSED";
  }
  return "?";
}
}  // namespace cm

}  // namespace ucrdma
