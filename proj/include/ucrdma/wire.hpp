// Wire format of the UC-RDMA datagram protocol: a fixed 32-byte header in
// network byte order followed by the fragment payload. See docs/wire.md for
// the bit-exact layout.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>

namespace ucrdma {

enum class Opcode : uint8_t {
  kSend = 0,
  kWrite = 1,
  kWriteImm = 2,
  kReadReq = 3,
  kReadResp = 4,
  kConnReq = 16,
  kConnRep = 17,
  kConnRtu = 18,
  kDisconnect = 19,
};

struct DatagramHeader {
  Opcode opcode = Opcode::kSend;
  uint8_t flags = 0;
  uint32_t conn_id = 0;
  uint32_t msn = 0;
  uint32_t frag_offset = 0;
  uint32_t msg_len = 0;
  uint32_t stag = 0;
  uint64_t tagged_offset = 0;  // 32-bit on the wire, see docs/wire.md
  uint32_t imm = 0;

  bool operator==(const DatagramHeader&) const = default;
};

// Logical payload of a READ_REQ datagram. The initiator-chosen read id is not
// part of these 28 bytes: it travels in the READ_REQ header's msn field and is
// echoed back in the msn field of every READ_RESP fragment.
struct ReadRequestPayload {
  uint32_t source_stag = 0;
  uint64_t source_offset = 0;
  uint32_t sink_stag = 0;
  uint64_t sink_offset = 0;
  uint32_t read_len = 0;
};

enum class DecodeError : uint8_t {
  kNone = 0,
  kTooShort,
  kBadVersion,
  kBadOpcode,
  kInconsistentFlags,
  kOverflow,
};

namespace wire {

inline constexpr size_t kHeaderSize = 32;
inline constexpr uint8_t kVersion = 0x01;
inline constexpr uint8_t kFlagLast = 0x01;
inline constexpr uint8_t kFlagFirst = 0x02;

inline constexpr size_t kReadRequestSize = 28;
inline constexpr size_t kConnPayloadSize = 8;
inline constexpr uint32_t kFeatureReadEnabled = 0x1;

// Default fragment payload limit: fits a 1500-byte MTU together with
// IPv4 + UDP + the 32-byte header, rounded down to a 64-byte multiple.
inline constexpr uint32_t kDefaultMaxPayload = 1408;
// Upper bound for jumbo frames (9000-byte MTU).
inline constexpr uint32_t kMaxPayloadLimit = 8928;

inline bool is_data_opcode(Opcode op) {
  return op == Opcode::kSend || op == Opcode::kWrite || op == Opcode::kWriteImm ||
         op == Opcode::kReadReq || op == Opcode::kReadResp;
}

inline bool is_tagged_opcode(Opcode op) {
  return op == Opcode::kWrite || op == Opcode::kWriteImm || op == Opcode::kReadResp;
}

inline bool is_control_opcode(Opcode op) {
  return op == Opcode::kConnReq || op == Opcode::kConnRep || op == Opcode::kConnRtu ||
         op == Opcode::kDisconnect;
}

// Encodes `h` into exactly 32 bytes. Throws std::invalid_argument when the
// header violates an invariant; never emits malformed bytes.
void encode_header(const DatagramHeader& h, std::span<std::byte, kHeaderSize> out);

// Decodes and validates a datagram (header + payload). The payload length is
// implied by the datagram size. Returns the header, or nullopt with `err` set.
// Never reads past `datagram`.
std::optional<DatagramHeader> decode_header(std::span<const std::byte> datagram,
                                            DecodeError& err);

void encode_read_request(const ReadRequestPayload& p, std::span<std::byte, kReadRequestSize> out);
std::optional<ReadRequestPayload> decode_read_request(std::span<const std::byte> payload);

// CONN_REQ / CONN_REP payload: the proposer's receive-side connection id plus
// protocol feature bits (bit0: read support).
struct ConnPayload {
  uint32_t proposed_conn_id = 0;
  uint32_t features = 0;
};

void encode_conn_payload(const ConnPayload& p, std::span<std::byte, kConnPayloadSize> out);
std::optional<ConnPayload> decode_conn_payload(std::span<const std::byte> payload);

const char* to_string(DecodeError err);
const char* to_string(Opcode op);

}  // namespace wire
}  // namespace ucrdma
