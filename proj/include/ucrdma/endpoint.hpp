// A transport endpoint: one UDP socket, one progress thread that owns all
// reassembly and connection state, and any number of unreliable-connected
// queue pairs multiplexed by connection id.
//
// Threading contract: verbs calls are safe from any thread and are serialized
// per queue pair; poll_cq has a single consumer; all placement, timers and
// connection management run on the endpoint's progress thread.
#pragma once

#include <ucrdma/cm.hpp>
#include <ucrdma/impair.hpp>
#include <ucrdma/metrics.hpp>
#include <ucrdma/verbs.hpp>
#include <ucrdma/wire.hpp>

#include <netinet/in.h>

#include <atomic>
#include <chrono>
#include <memory>
#include <optional>
#include <string>

namespace ucrdma {

struct EndpointConfig {
  std::string bind_address = "0.0.0.0";
  uint16_t port = 0;  // 0 picks an ephemeral port

  uint32_t max_payload = wire::kDefaultMaxPayload;  // bytes per fragment, <= 8928
  uint32_t reassembly_window = 8;    // concurrent inbound tagged messages per connection
  std::chrono::milliseconds reassembly_timeout{500};  // inactivity bound per message
  bool read_enabled = false;
  std::optional<std::chrono::milliseconds> read_timeout;  // none: lost reads stall
  uint32_t max_outstanding_reads = 16;
  int socket_buffer = 4 << 20;
  uint32_t cq_capacity = 4096;

  cm::RetransmitPolicy connect_retransmit;
  int disconnect_transmissions = 3;

  // In-process link impairment between engine and socket (tests/benchmarks).
  std::optional<ImpairmentSpec> tx_impair;
  std::optional<ImpairmentSpec> rx_impair;

  void validate() const;
};

class Endpoint;
struct EndpointImpl;

class QueuePair : public std::enable_shared_from_this<QueuePair> {
 public:
  enum class State : uint8_t { kIdle, kConnecting, kConnected, kError, kClosed };

  State state() const { return state_.load(std::memory_order_acquire); }
  uint32_t qp_id() const { return conn_id_.load(std::memory_order_acquire); }
  uint32_t peer_features() const { return peer_features_.load(std::memory_order_acquire); }

  void post_send(const WorkRequest& wr);
  void post_recv(const WorkRequest& wr);

 private:
  friend class Endpoint;
  friend struct EndpointImpl;
  explicit QueuePair(Endpoint* ep) : ep_(ep) {}

  Endpoint* ep_;
  std::atomic<State> state_{State::kIdle};
  std::atomic<uint32_t> conn_id_{0};
  std::atomic<uint32_t> peer_features_{0};
  std::atomic<uint32_t> outstanding_reads_{0};

  std::mutex post_mu_;  // serializes posting on this queue pair
  uint32_t next_msn_ = 0;

  // connect() rendezvous
  std::mutex conn_mu_;
  std::condition_variable conn_cv_;
  enum class ConnectOutcome : uint8_t { kPending, kOk, kTimeout } connect_outcome_ =
      ConnectOutcome::kPending;
};

class Endpoint {
 public:
  explicit Endpoint(EndpointConfig cfg);
  ~Endpoint();

  Endpoint(const Endpoint&) = delete;
  Endpoint& operator=(const Endpoint&) = delete;

  // --- memory registration --------------------------------------------------
  MemoryRegion register_memory(std::span<std::byte> buffer, Access access);
  void deregister_memory(const MemoryRegion& region);

  // --- connection management -------------------------------------------------
  std::shared_ptr<QueuePair> create_qp();
  void listen();
  std::shared_ptr<QueuePair> accept(std::chrono::milliseconds timeout);
  void connect(const std::shared_ptr<QueuePair>& qp, const std::string& peer);  // blocking
  void disconnect(const std::shared_ptr<QueuePair>& qp);

  // --- verbs -------------------------------------------------------------------
  void post_send(QueuePair& qp, const WorkRequest& wr);
  void post_recv(QueuePair& qp, const WorkRequest& wr);
  CompletionQueue& cq() { return cq_; }

  // --- observability -------------------------------------------------------------
  const CounterSet& counters() const { return counters_; }
  uint16_t port() const;
  const EndpointConfig& config() const { return cfg_; }

  // Swap link impairment on the live endpoint (synchronized with the
  // progress thread; the filter restarts from its seed).
  void set_tx_impair(std::optional<ImpairmentSpec> spec);
  void set_rx_impair(std::optional<ImpairmentSpec> spec);
  ImpairmentFilter::Stats tx_impair_stats();
  ImpairmentFilter::Stats rx_impair_stats();

  void close();  // idempotent; flushes outstanding work

 private:
  friend class QueuePair;
  friend struct EndpointImpl;
  std::unique_ptr<EndpointImpl> impl_;
  EndpointConfig cfg_;
  CounterSet counters_;
  CompletionQueue cq_;
};

}  // namespace ucrdma
