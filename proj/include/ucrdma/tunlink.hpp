// A self-contained lossy IP link built on a TUN device: packets routed to the
// peer address come back address-swapped after seeded impairment and an
// optional fixed one-way delay. Kernel transports (TCP included) experience
// real packet loss without tc/netem. Requires /dev/net/tun and CAP_NET_ADMIN.
//
// Address-swap reflection keeps IP/TCP/UDP checksums valid: exchanging the
// source and destination addresses leaves the checksum sums unchanged.
#pragma once

#include <ucrdma/impair.hpp>

#include <cstdint>
#include <memory>
#include <string>

namespace ucrdma {

struct TunLinkConfig {
  std::string device = "ucr%d";      // kernel fills the %d
  std::string local_ip = "10.99.77.1";
  std::string peer_ip = "10.99.77.2";  // reflected alias of local_ip
  int prefix_len = 24;
  ImpairmentSpec impair;             // applied to every forwarded packet
  double delay_ms = 0.0;             // fixed one-way delay
  int mtu = 0;                       // 0 keeps the kernel default (1500)
};

class TunLossyLink {
 public:
  static bool available();

  explicit TunLossyLink(TunLinkConfig cfg);
  ~TunLossyLink();

  TunLossyLink(const TunLossyLink&) = delete;
  TunLossyLink& operator=(const TunLossyLink&) = delete;

  void stop();
  ImpairmentFilter::Stats stats() const;
  const TunLinkConfig& config() const { return cfg_; }
  const std::string& device() const { return dev_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  TunLinkConfig cfg_;
  std::string dev_;
};

}  // namespace ucrdma
