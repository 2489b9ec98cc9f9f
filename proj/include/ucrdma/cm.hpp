// Connection management over the same unreliable datagram channel.
// Control messages (CONN_REQ / CONN_REP / CONN_RTU / DISCONNECT) get
// best-effort reliability through bounded retransmission; data never does.
#pragma once

#include <chrono>
#include <cstdint>

namespace ucrdma::cm {

enum class ConnState : uint8_t {
  kReqSent,      // client sent CONN_REQ, waiting for CONN_REP
  kRepSent,      // server sent CONN_REP, waiting for CONN_RTU (or data)
  kEstablished,
  kClosed,
};

struct RetransmitPolicy {
  int budget = 5;  // total transmissions per control message
  std::chrono::milliseconds interval{200};

  // Worst-case time until a handshake either progresses or fails.
  std::chrono::milliseconds deadline() const { return interval * budget + interval; }
};

const char* to_string(ConnState s);

}  // namespace ucrdma::cm
