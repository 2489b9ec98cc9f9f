#include <ucrdma/wire.hpp>

#include <cstring>

namespace ucrdma::wire {

namespace {

void put_u32(std::byte* p, uint32_t v) {
  p[0] = std::byte(v >> 24);
  p[1] = std::byte(v >> 16);
  p[2] = std::byte(v >> 8);
  p[3] = std::byte(v);
}

void put_u64(std::byte* p, uint64_t v) {
  put_u32(p, static_cast<uint32_t>(v >> 32));
  put_u32(p + 4, static_cast<uint32_t>(v));
}

uint32_t get_u32(const std::byte* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

uint64_t get_u64(const std::byte* p) {
  return (uint64_t(get_u32(p)) << 32) | get_u32(p + 4);
}

bool known_opcode(uint8_t v) {
  switch (static_cast<Opcode>(v)) {
    case Opcode::kSend:
    case Opcode::kWrite:
    case Opcode::kWriteImm:
    case Opcode::kReadReq:
    case Opcode::kReadResp:
    case Opcode::kConnReq:
    case Opcode::kConnRep:
    case Opcode::kConnRtu:
    case Opcode::kDisconnect:
      return true;
  }
  return false;
}

}  // namespace

void encode_header(const DatagramHeader& h, std::span<std::byte, kHeaderSize> out) {
  if (!known_opcode(static_cast<uint8_t>(h.opcode)))
    throw std::invalid_argument("encode_header: unknown opcode");
  if (h.flags & ~(kFlagFirst | kFlagLast))
    throw std::invalid_argument("encode_header: undefined flag bits");
  bool first = h.flags & kFlagFirst;
  if (first != (h.frag_offset == 0))
    throw std::invalid_argument("encode_header: FIRST flag inconsistent with frag_offset");
  if (h.frag_offset > h.msg_len)
    throw std::invalid_argument("encode_header: frag_offset beyond msg_len");
  if (h.tagged_offset > UINT32_MAX)
    throw std::invalid_argument("encode_header: tagged_offset exceeds wire width");
  if (!is_tagged_opcode(h.opcode) && (h.stag != 0 || h.tagged_offset != 0))
    throw std::invalid_argument("encode_header: tagged fields must be 0 for untagged opcode");
  if (h.opcode != Opcode::kWriteImm && h.imm != 0)
    throw std::invalid_argument("encode_header: imm must be 0 unless WRITE_IMM");

  out[0] = std::byte{kVersion};
  out[1] = std::byte(static_cast<uint8_t>(h.opcode));
  out[2] = std::byte(h.flags);
  out[3] = std::byte{0};
  put_u32(out.data() + 4, h.conn_id);
  put_u32(out.data() + 8, h.msn);
  put_u32(out.data() + 12, h.frag_offset);
  put_u32(out.data() + 16, h.msg_len);
  put_u32(out.data() + 20, h.stag);
  put_u32(out.data() + 24, static_cast<uint32_t>(h.tagged_offset));
  put_u32(out.data() + 28, h.imm);
}

std::optional<DatagramHeader> decode_header(std::span<const std::byte> datagram,
                                            DecodeError& err) {
  if (datagram.size() < kHeaderSize) {
    err = DecodeError::kTooShort;
    return std::nullopt;
  }
  const std::byte* p = datagram.data();
  if (p[0] != std::byte{kVersion}) {
    err = DecodeError::kBadVersion;
    return std::nullopt;
  }
  if (!known_opcode(static_cast<uint8_t>(p[1]))) {
    err = DecodeError::kBadOpcode;
    return std::nullopt;
  }

  DatagramHeader h;
  h.opcode = static_cast<Opcode>(p[1]);
  h.flags = static_cast<uint8_t>(p[2]) & (kFlagFirst | kFlagLast);
  h.conn_id = get_u32(p + 4);
  h.msn = get_u32(p + 8);
  h.frag_offset = get_u32(p + 12);
  h.msg_len = get_u32(p + 16);
  h.stag = get_u32(p + 20);
  h.tagged_offset = get_u32(p + 24);
  h.imm = get_u32(p + 28);

  const uint64_t payload_len = datagram.size() - kHeaderSize;
  if (uint64_t(h.frag_offset) + payload_len > h.msg_len) {
    err = DecodeError::kOverflow;
    return std::nullopt;
  }
  bool first = h.flags & kFlagFirst;
  bool last = h.flags & kFlagLast;
  if (first != (h.frag_offset == 0) ||
      last != (uint64_t(h.frag_offset) + payload_len == h.msg_len)) {
    err = DecodeError::kInconsistentFlags;
    return std::nullopt;
  }
  err = DecodeError::kNone;
  return h;
}

void encode_read_request(const ReadRequestPayload& p, std::span<std::byte, kReadRequestSize> out) {
  if (p.read_len < 1) throw std::invalid_argument("encode_read_request: read_len must be >= 1");
  put_u32(out.data() + 0, p.source_stag);
  put_u64(out.data() + 4, p.source_offset);
  put_u32(out.data() + 12, p.sink_stag);
  put_u64(out.data() + 16, p.sink_offset);
  put_u32(out.data() + 24, p.read_len);
}

std::optional<ReadRequestPayload> decode_read_request(std::span<const std::byte> payload) {
  if (payload.size() < kReadRequestSize) return std::nullopt;
  ReadRequestPayload p;
  p.source_stag = get_u32(payload.data() + 0);
  p.source_offset = get_u64(payload.data() + 4);
  p.sink_stag = get_u32(payload.data() + 12);
  p.sink_offset = get_u64(payload.data() + 16);
  p.read_len = get_u32(payload.data() + 24);
  if (p.read_len < 1) return std::nullopt;
  return p;
}

void encode_conn_payload(const ConnPayload& p, std::span<std::byte, kConnPayloadSize> out) {
  put_u32(out.data() + 0, p.proposed_conn_id);
  put_u32(out.data() + 4, p.features);
}

std::optional<ConnPayload> decode_conn_payload(std::span<const std::byte> payload) {
  if (payload.size() < kConnPayloadSize) return std::nullopt;
  ConnPayload p;
  p.proposed_conn_id = get_u32(payload.data() + 0);
  p.features = get_u32(payload.data() + 4);
  return p;
}

const char* to_string(DecodeError err) {
  switch (err) {
    case DecodeError::kNone: return "none";
    case DecodeError::kTooShort: return "too_short";
    case DecodeError::kBadVersion: return "bad_version";
    case DecodeError::kBadOpcode: return "bad_opcode";
    case DecodeError::kInconsistentFlags: return "inconsistent_flags";
    case DecodeError::kOverflow: return "overflow";
  }
  return "?";
}

const char* to_string(Opcode op) {
  switch (op) {
    case Opcode::kSend: return "SEND";
    case Opcode::kWrite: return "WRITE";
    case Opcode::kWriteImm: return "WRITE_IMM";
    case Opcode::kReadReq: return "READ_REQ";
    case Opcode::kReadResp: return "READ_RESP";
    case Opcode::kConnReq: return "CONN_REQ";
    case Opcode::kConnRep: return "CONN_REP";
    case Opcode::kConnRtu: return "CONN_RTU";
    case Opcode::kDisconnect: return "DISCONNECT";
  }
  return "?";
}

}  // namespace ucrdma::wire
