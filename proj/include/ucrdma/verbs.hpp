// Application-facing asynchronous API: registered memory, work requests,
// work completions, and the completion queue. Usage is documented in
// docs/api.md; the endpoint/queue-pair side lives in endpoint.hpp.
#pragma once

#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>

namespace ucrdma {

class Endpoint;
struct EndpointImpl;

enum class Access : uint8_t {
  kLocal = 0x1,        // usable as a local source/target of work requests
  kRemoteWrite = 0x2,  // peer may place RDMA Writes here
  kRemoteRead = 0x4,   // peer may serve RDMA Reads from here
};

constexpr Access operator|(Access a, Access b) {
  return static_cast<Access>(static_cast<uint8_t>(a) | static_cast<uint8_t>(b));
}
constexpr bool has_access(Access set, Access bit) {
  return (static_cast<uint8_t>(set) & static_cast<uint8_t>(bit)) != 0;
}

// Handle to a registered buffer. The application owns the memory; the region
// stays addressable until deregistered. stag is endpoint-unique and nonzero.
struct MemoryRegion {
  uint32_t stag = 0;
  std::span<std::byte> buffer;
  Access access = Access::kLocal;
};

enum class WrOpcode : uint8_t { kSend, kWrite, kWriteImm, kRead, kRecv };

enum class WcOpcode : uint8_t {
  kSend,
  kWrite,
  kWriteImm,
  kRead,
  kRecv,
  kRecvWriteImm,  // target-side notification of a fully placed WRITE_IMM
};

enum class WcStatus : uint8_t { kSuccess, kFlushed, kLocalError, kReadTimeout };

struct LocalSpan {
  uint32_t stag = 0;
  uint64_t offset = 0;
  uint32_t length = 0;
};

struct RemoteSpan {
  uint32_t stag = 0;
  uint64_t offset = 0;
};

struct WorkRequest {
  uint64_t wr_id = 0;
  WrOpcode opcode = WrOpcode::kSend;
  LocalSpan local;   // SEND/WRITE source, RECV buffer, READ sink
  RemoteSpan remote; // WRITE/WRITE_IMM target, READ source; zero otherwise
  uint32_t imm = 0;  // WRITE_IMM only
};

struct WorkCompletion {
  uint64_t wr_id = 0;
  WcOpcode opcode = WcOpcode::kSend;
  WcStatus status = WcStatus::kSuccess;
  uint32_t byte_len = 0;
  bool imm_valid = false;
  uint32_t imm = 0;
  uint32_t msn = 0;
};

struct transport_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct bad_state_error : transport_error {
  using transport_error::transport_error;
};
struct cq_full_error : transport_error {
  using transport_error::transport_error;
};
struct connect_timeout_error : transport_error {
  using transport_error::transport_error;
};
struct region_in_use_error : transport_error {
  using transport_error::transport_error;
};
struct read_limit_error : transport_error {
  using transport_error::transport_error;
};

// Bounded completion queue. Capacity covers queued entries plus completions
// reserved by posted-but-unfinished work requests; posting fails fast with
// cq_full_error instead of ever dropping a completion. Single consumer.
class CompletionQueue {
 public:
  explicit CompletionQueue(uint32_t capacity) : cap_(capacity) {}

  // Removes and returns up to out.size() completions, oldest first.
  size_t poll(std::span<WorkCompletion> out) {
    std::lock_guard lk(mu_);
    size_t n = 0;
    while (n < out.size() && !q_.empty()) {
      out[n++] = q_.front();
      q_.pop_front();
    }
    return n;
  }

  // Blocks until the queue is nonempty, the timeout elapses, or the endpoint
  // shuts down. Returns true when completions are available.
  bool wait(std::chrono::milliseconds timeout) {
    std::unique_lock lk(mu_);
    cv_.wait_for(lk, timeout, [&] { return !q_.empty() || closed_; });
    return !q_.empty();
  }

  uint32_t capacity() const { return cap_; }

  size_t size() const {
    std::lock_guard lk(mu_);
    return q_.size();
  }

 private:
  friend class Endpoint;
  friend struct EndpointImpl;

  bool try_reserve() {
    std::lock_guard lk(mu_);
    if (q_.size() + reserved_ >= cap_) return false;
    reserved_++;
    return true;
  }
  void cancel_reservation() {
    std::lock_guard lk(mu_);
    if (reserved_ > 0) reserved_--;
  }
  void push_reserved(const WorkCompletion& wc) {
    {
      std::lock_guard lk(mu_);
      if (reserved_ > 0) reserved_--;
      q_.push_back(wc);
    }
    cv_.notify_one();
  }
  // For unsolicited notifications (inbound WRITE_IMM); false when full.
  bool push_unreserved(const WorkCompletion& wc) {
    {
      std::lock_guard lk(mu_);
      if (q_.size() + reserved_ >= cap_) return false;
      q_.push_back(wc);
    }
    cv_.notify_one();
    return true;
  }
  void close() {
    {
      std::lock_guard lk(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<WorkCompletion> q_;
  uint32_t cap_;
  uint32_t reserved_ = 0;
  bool closed_ = false;
};

}  // namespace ucrdma
