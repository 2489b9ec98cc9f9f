// Token-bucket pacing for offered-load control. Tokens accrue from absolute
// elapsed time so the long-run rate stays exact even when individual waits
// jitter.
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <thread>

namespace ucrdma {

class TokenBucket {
 public:
  using Clock = std::chrono::steady_clock;

  // rate in bytes/second; burst in bytes (how far the bucket can fill);
  // granularity sets the scheduling step: consumption catches up with accrual
  // in line-rate bursts of roughly rate * granularity bytes
  TokenBucket(double rate_bytes_per_s, double burst_bytes,
              std::chrono::microseconds granularity = std::chrono::milliseconds(1))
      : rate_(rate_bytes_per_s),
        burst_(burst_bytes),
        granularity_(granularity),
        start_(Clock::now()) {}

  bool try_acquire(uint64_t bytes) {
    forfeit_deep_debt();
    if (available() < double(bytes)) return false;
    consumed_ += double(bytes);
    return true;
  }

  // Blocks (sleeping in <= 1 ms steps) until `bytes` tokens are available.
  void acquire(uint64_t bytes) {
    while (!try_acquire(bytes)) {
      double deficit = double(bytes) - available();
      if (deficit <= 0) continue;
      auto wait = std::chrono::duration_cast<std::chrono::nanoseconds>(
          std::chrono::duration<double>(deficit / rate_));
      std::this_thread::sleep_for(std::clamp<std::chrono::nanoseconds>(
          wait, granularity_, granularity_ * 2));
    }
  }

  double available() const {
    double elapsed = std::chrono::duration<double>(Clock::now() - start_).count();
    return std::min(burst_, elapsed * rate_ - consumed_);
  }

 private:
  // tokens accrued while the sender was stalled beyond two scheduling steps
  // are forfeited: catch-up bursts stay bounded instead of hitting the
  // receiver at line rate
  void forfeit_deep_debt() {
    double elapsed = std::chrono::duration<double>(Clock::now() - start_).count();
    double cap = std::max(burst_, rate_ * 2.0 *
                                      std::chrono::duration<double>(granularity_).count());
    double accrued = elapsed * rate_;
    if (accrued - consumed_ > cap) consumed_ = accrued - cap;
  }

  double rate_;
  double burst_;
  std::chrono::microseconds granularity_;
  Clock::time_point start_;
  double consumed_ = 0;
};

}  // namespace ucrdma
