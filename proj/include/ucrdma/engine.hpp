// Message segmentation arithmetic and receive-side byte-range tracking.
// These are the pure parts of the transport engine; the socket-facing side
// lives in endpoint.cpp.
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

namespace ucrdma::engine {

struct FragmentBound {
  uint32_t offset;
  uint32_t length;
  bool first;
  bool last;
};

// Number of datagrams a message of msg_len bytes occupies. An empty message
// still takes one (FIRST|LAST, zero payload).
inline uint32_t fragment_count(uint32_t msg_len, uint32_t max_payload) {
  if (msg_len == 0) return 1;
  return static_cast<uint32_t>((uint64_t(msg_len) + max_payload - 1) / max_payload);
}

inline FragmentBound fragment_bound(uint32_t msg_len, uint32_t max_payload, uint32_t index) {
  uint64_t off = uint64_t(index) * max_payload;
  uint32_t n = fragment_count(msg_len, max_payload);
  uint32_t len = msg_len == 0 ? 0
                              : static_cast<uint32_t>(
                                    std::min<uint64_t>(max_payload, uint64_t(msg_len) - off));
  return FragmentBound{static_cast<uint32_t>(off), len, index == 0, index == n - 1};
}

// Tracks which byte ranges of a message have been placed. add() reports the
// previously-uncovered subranges so the caller copies each byte exactly once,
// keeping duplicate fragments idempotent.
class RangeCoverage {
 public:
  explicit RangeCoverage(uint64_t total) : total_(total) {}

  // Marks [off, off+len) covered. Appends the newly covered subranges to
  // `fresh` and returns the number of newly covered bytes.
  uint64_t add(uint64_t off, uint64_t len, std::vector<std::pair<uint64_t, uint64_t>>& fresh) {
    if (len == 0) return 0;
    uint64_t end = off + len;
    uint64_t added = 0;

    // first span that could overlap or touch [off, end)
    auto it = spans_.upper_bound(off);
    if (it != spans_.begin()) {
      auto prev = std::prev(it);
      if (prev->second >= off) it = prev;
    }

    uint64_t cursor = off;
    uint64_t new_start = off, new_end = end;
    while (it != spans_.end() && it->first <= end) {
      if (it->first > cursor) {
        fresh.emplace_back(cursor, it->first - cursor);
        added += it->first - cursor;
      }
      cursor = std::max(cursor, it->second);
      new_start = std::min(new_start, it->first);
      new_end = std::max(new_end, it->second);
      it = spans_.erase(it);
    }
    if (cursor < end) {
      fresh.emplace_back(cursor, end - cursor);
      added += end - cursor;
    }
    spans_[new_start] = new_end;
    covered_ += added;
    return added;
  }

  bool complete() const { return covered_ == total_; }
  uint64_t covered() const { return covered_; }
  uint64_t total() const { return total_; }

 private:
  uint64_t total_;
  uint64_t covered_ = 0;
  std::map<uint64_t, uint64_t> spans_;  // disjoint [start, end), merged on insert
};

}  // namespace ucrdma::engine
