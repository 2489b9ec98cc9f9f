#include <ucrdma/tunlink.hpp>

#include <ucrdma/netutil.hpp>

#include <arpa/inet.h>
#include <fcntl.h>
#include <net/if.h>
#include <linux/if_tun.h>
#include <linux/netlink.h>
#include <linux/rtnetlink.h>
#include <sys/ioctl.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <stdexcept>
#include <system_error>
#include <thread>
#include <vector>

namespace ucrdma {

namespace {

using Clock = std::chrono::steady_clock;

int tun_open(std::string& name) {
  int fd = ::open("/dev/net/tun", O_RDWR);
  if (fd < 0) throw std::system_error(errno, std::generic_category(), "open /dev/net/tun");
  ifreq ifr{};
  ifr.ifr_flags = IFF_TUN | IFF_NO_PI;
  std::strncpy(ifr.ifr_name, name.c_str(), IFNAMSIZ - 1);
  if (ioctl(fd, TUNSETIFF, &ifr) < 0) {
    int err = errno;
    ::close(fd);
    throw std::system_error(err, std::generic_category(), "TUNSETIFF");
  }
  name = ifr.ifr_name;
  return fd;
}

struct NlRequest {
  nlmsghdr nh;
  union {
    ifaddrmsg ifa;
    ifinfomsg ifi;
  };
  char attrs[256];
};

void nl_addattr(nlmsghdr* nh, int type, const void* data, int len) {
  rtattr* rta = reinterpret_cast<rtattr*>(reinterpret_cast<char*>(nh) +
                                          NLMSG_ALIGN(nh->nlmsg_len));
  rta->rta_type = static_cast<unsigned short>(type);
  rta->rta_len = static_cast<unsigned short>(RTA_LENGTH(len));
  std::memcpy(RTA_DATA(rta), data, size_t(len));
  nh->nlmsg_len = NLMSG_ALIGN(nh->nlmsg_len) + RTA_ALIGN(rta->rta_len);
}

void nl_talk(int fd, NlRequest* req, const char* what) {
  if (::send(fd, req, req->nh.nlmsg_len, 0) < 0)
    throw std::system_error(errno, std::generic_category(), what);
  char buf[4096];
  ssize_t n = ::recv(fd, buf, sizeof(buf), 0);
  if (n < 0) throw std::system_error(errno, std::generic_category(), what);
  auto* rh = reinterpret_cast<nlmsghdr*>(buf);
  if (rh->nlmsg_type == NLMSG_ERROR) {
    auto* err = static_cast<nlmsgerr*>(NLMSG_DATA(rh));
    if (err->error != 0)
      throw std::system_error(-err->error, std::generic_category(), what);
  }
}

void configure_interface(const std::string& dev, const std::string& ip, int prefix, int mtu) {
  unsigned idx = if_nametoindex(dev.c_str());
  if (idx == 0) throw std::runtime_error("tunlink: interface vanished: " + dev);

  int nl = ::socket(AF_NETLINK, SOCK_RAW, NETLINK_ROUTE);
  if (nl < 0) throw std::system_error(errno, std::generic_category(), "netlink socket");
  try {
    {
      NlRequest req{};
      req.nh.nlmsg_len = NLMSG_LENGTH(sizeof(ifaddrmsg));
      req.nh.nlmsg_type = RTM_NEWADDR;
      req.nh.nlmsg_flags = NLM_F_REQUEST | NLM_F_ACK | NLM_F_CREATE | NLM_F_EXCL;
      req.ifa.ifa_family = AF_INET;
      req.ifa.ifa_prefixlen = static_cast<uint8_t>(prefix);
      req.ifa.ifa_index = idx;
      in_addr a{};
      if (inet_pton(AF_INET, ip.c_str(), &a) != 1)
        throw std::invalid_argument("tunlink: bad address " + ip);
      nl_addattr(&req.nh, IFA_LOCAL, &a, 4);
      nl_addattr(&req.nh, IFA_ADDRESS, &a, 4);
      nl_talk(nl, &req, "RTM_NEWADDR");
    }
    {
      NlRequest req{};
      req.nh.nlmsg_len = NLMSG_LENGTH(sizeof(ifinfomsg));
      req.nh.nlmsg_type = RTM_NEWLINK;
      req.nh.nlmsg_flags = NLM_F_REQUEST | NLM_F_ACK;
      req.ifi.ifi_family = AF_UNSPEC;
      req.ifi.ifi_index = static_cast<int>(idx);
      req.ifi.ifi_flags = IFF_UP;
      req.ifi.ifi_change = IFF_UP;
      if (mtu > 0) {
        uint32_t m = uint32_t(mtu);
        nl_addattr(&req.nh, IFLA_MTU, &m, 4);
      }
      nl_talk(nl, &req, "RTM_NEWLINK");
    }
  } catch (...) {
    ::close(nl);
    throw;
  }
  ::close(nl);
}

}  // namespace

struct TunLossyLink::Impl {
  int tfd = -1;
  std::atomic<bool> stop{false};
  std::thread reader;
  std::thread writer;

  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::pair<Clock::time_point, std::vector<unsigned char>>> queue;
  bool reader_done = false;

  mutable std::mutex stats_mu;
  ImpairmentFilter filter;

  explicit Impl(const ImpairmentSpec& spec) : filter(spec) {}
};

bool TunLossyLink::available() {
  int fd = ::open("/dev/net/tun", O_RDWR);
  if (fd < 0) return false;
  ifreq ifr{};
  ifr.ifr_flags = IFF_TUN | IFF_NO_PI;
  std::strncpy(ifr.ifr_name, "ucrprobe%d", IFNAMSIZ - 1);
  bool ok = ioctl(fd, TUNSETIFF, &ifr) == 0;
  ::close(fd);  // device disappears with the descriptor
  return ok;
}

TunLossyLink::TunLossyLink(TunLinkConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.impair.validate();
  dev_ = cfg_.device;
  impl_ = std::make_unique<Impl>(cfg_.impair);
  impl_->tfd = tun_open(dev_);
  try {
    configure_interface(dev_, cfg_.local_ip, cfg_.prefix_len, cfg_.mtu);
  } catch (...) {
    ::close(impl_->tfd);
    throw;
  }

  auto delay = std::chrono::microseconds(int64_t(cfg_.delay_ms * 1000.0));
  Impl* im = impl_.get();

  im->reader = std::thread([im, delay] {
    std::vector<unsigned char> buf(65600);
    // swap src and dst of each emitted packet (filters may duplicate or hold
    // packets, so the swap applies per emission); checksums stay valid
    // because the sum of the two addresses is unchanged
    auto reflect = [im, delay](std::span<const std::byte> pkt) {
      if (pkt.size() < 20) return;
      std::vector<unsigned char> out(pkt.size());
      std::memcpy(out.data(), pkt.data(), pkt.size());
      unsigned char tmp[4];
      std::memcpy(tmp, out.data() + 12, 4);
      std::memcpy(out.data() + 12, out.data() + 16, 4);
      std::memcpy(out.data() + 16, tmp, 4);
      auto rel = Clock::now() + delay;
      {
        std::lock_guard qlk(im->mu);
        im->queue.emplace_back(rel, std::move(out));
      }
      im->cv.notify_one();
    };
    while (!im->stop) {
      ssize_t n = ::read(im->tfd, buf.data(), buf.size());
      if (n <= 0) break;
      if (n < 20 || (buf[0] >> 4) != 4) continue;  // IPv4 only
      std::lock_guard lk(im->stats_mu);
      im->filter.feed(
          std::span<const std::byte>(reinterpret_cast<const std::byte*>(buf.data()), size_t(n)),
          reflect);
    }
    {
      std::lock_guard lk(im->mu);
      im->reader_done = true;
    }
    im->cv.notify_one();
  });

  im->writer = std::thread([im] {
    std::unique_lock lk(im->mu);
    for (;;) {
      if (im->queue.empty()) {
        if (im->reader_done) return;
        im->cv.wait(lk);
        continue;
      }
      auto rel = im->queue.front().first;
      if (Clock::now() < rel) {
        im->cv.wait_until(lk, rel);
        continue;
      }
      auto pkt = std::move(im->queue.front().second);
      im->queue.pop_front();
      lk.unlock();
      ssize_t w = ::write(im->tfd, pkt.data(), pkt.size());
      (void)w;
      lk.lock();
    }
  });
}

void TunLossyLink::stop() {
  if (!impl_ || impl_->stop.exchange(true)) return;
  // poke the device so the blocking read wakes up
  int fd = ::socket(AF_INET, SOCK_DGRAM, 0);
  if (fd >= 0) {
    sockaddr_in a{};
    a.sin_family = AF_INET;
    inet_pton(AF_INET, cfg_.peer_ip.c_str(), &a.sin_addr);
    a.sin_port = htons(9);
    char z = 0;
    ::sendto(fd, &z, 1, 0, reinterpret_cast<sockaddr*>(&a), sizeof(a));
    ::close(fd);
  }
  if (impl_->reader.joinable()) impl_->reader.join();
  if (impl_->writer.joinable()) impl_->writer.join();
  ::close(impl_->tfd);  // device disappears with the descriptor
}

ImpairmentFilter::Stats TunLossyLink::stats() const {
  std::lock_guard lk(impl_->stats_mu);
  return impl_->filter.stats();
}

TunLossyLink::~TunLossyLink() { stop(); }

}  // namespace ucrdma
