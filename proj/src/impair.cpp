#include <ucrdma/impair.hpp>
#include <ucrdma/netutil.hpp>

#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstring>
#include <mutex>
#include <thread>

namespace ucrdma {

namespace impair {

std::optional<uint64_t> find_drop_seed(double loss_prob, uint32_t horizon,
                                       const std::vector<uint32_t>& drop_indices,
                                       uint64_t max_attempts) {
  std::byte dummy[8]{};
  for (uint64_t seed = 1; seed <= max_attempts; seed++) {
    ImpairmentSpec spec{};
    spec.loss_prob = loss_prob;
    spec.seed = seed;
    ImpairmentFilter f(spec);
    std::vector<uint32_t> dropped;
    for (uint32_t i = 0; i < horizon; i++) {
      size_t emitted = 0;
      f.feed(dummy, [&](std::span<const std::byte>) { emitted++; });
      if (emitted == 0) dropped.push_back(i);
    }
    if (dropped == drop_indices) return seed;
  }
  return std::nullopt;
}

}  // namespace impair

struct UdpProxy::Impl {
  int listen_fd = -1;
  int forward_fd = -1;
  sockaddr_in forward_addr{};
  std::atomic<bool> stop{false};
  std::thread fwd_thread;
  std::thread back_thread;

  std::mutex mu;  // guards client_addr and the filters' stats reads
  sockaddr_in client_addr{};
  bool client_known = false;
  ImpairmentFilter to_forward;
  ImpairmentFilter to_client;

  Impl(const ImpairmentSpec& a, const ImpairmentSpec& b) : to_forward(a), to_client(b) {}
};

UdpProxy::UdpProxy(const std::string& listen_addr, const std::string& forward_addr,
                   const ImpairmentSpec& spec) {
  spec.validate();
  ImpairmentSpec back = spec;
  back.seed = spec.seed + 1;  // directions impaired independently
  impl_ = new Impl(spec, back);

  impl_->listen_fd = net::udp_socket();
  net::bind_to(impl_->listen_fd, net::parse_addr(listen_addr));
  listen_port_ = net::local_port(impl_->listen_fd);
  impl_->forward_fd = net::udp_socket();
  impl_->forward_addr = net::parse_addr(forward_addr);
  net::set_buffers(impl_->listen_fd, 4 << 20, 4 << 20);
  net::set_buffers(impl_->forward_fd, 4 << 20, 4 << 20);
  net::set_recv_timeout(impl_->listen_fd, std::chrono::milliseconds(100));
  net::set_recv_timeout(impl_->forward_fd, std::chrono::milliseconds(100));

  // client -> forward direction
  impl_->fwd_thread = std::thread([impl = impl_] {
    std::vector<std::byte> buf(65536);
    while (!impl->stop) {
      sockaddr_in from{};
      socklen_t fl = sizeof(from);
      ssize_t n = recvfrom(impl->listen_fd, buf.data(), buf.size(), 0, (sockaddr*)&from, &fl);
      if (n < 0) {
        if (errno == EINTR || errno == EAGAIN || errno == EWOULDBLOCK) continue;
        break;
      }
      std::lock_guard lk(impl->mu);
      impl->client_addr = from;
      impl->client_known = true;
      impl->to_forward.feed(std::span<const std::byte>(buf.data(), size_t(n)),
                            [&](std::span<const std::byte> d) {
                              sendto(impl->forward_fd, d.data(), d.size(), 0,
                                     (sockaddr*)&impl->forward_addr, sizeof(impl->forward_addr));
                            });
    }
  });

  // forward -> client direction
  impl_->back_thread = std::thread([impl = impl_] {
    std::vector<std::byte> buf(65536);
    while (!impl->stop) {
      ssize_t n = recv(impl->forward_fd, buf.data(), buf.size(), 0);
      if (n < 0) {
        if (errno == EINTR || errno == EAGAIN || errno == EWOULDBLOCK) continue;
        break;
      }
      std::lock_guard lk(impl->mu);
      if (!impl->client_known) continue;
      impl->to_client.feed(std::span<const std::byte>(buf.data(), size_t(n)),
                           [&](std::span<const std::byte> d) {
                             sendto(impl->listen_fd, d.data(), d.size(), 0,
                                    (sockaddr*)&impl->client_addr, sizeof(impl->client_addr));
                           });
    }
  });
}

void UdpProxy::stop() {
  if (!impl_ || impl_->stop.exchange(true)) return;
  // the 100ms receive timeout lets both loops notice the flag
  if (impl_->fwd_thread.joinable()) impl_->fwd_thread.join();
  if (impl_->back_thread.joinable()) impl_->back_thread.join();
  close(impl_->listen_fd);
  close(impl_->forward_fd);
}

UdpProxy::Stats UdpProxy::stats() const {
  std::lock_guard lk(impl_->mu);
  return Stats{impl_->to_forward.stats(), impl_->to_client.stats()};
}

UdpProxy::~UdpProxy() {
  stop();
  delete impl_;
}

}  // namespace ucrdma
