// ucr-tunlink: stands up a lossy reflected IP link on a TUN device so that
// kernel transports (including TCP) experience packet loss and delay without
// tc/netem. Traffic sent to the peer address comes back address-swapped.
//
//   ucr-tunlink --local 10.99.77.1 --peer-ip 10.99.77.2 --loss 0.03 --delay-ms 2
//
// Requires /dev/net/tun and CAP_NET_ADMIN.

#include <ucrdma/tunlink.hpp>

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <atomic>
#include <thread>

using namespace ucrdma;

namespace {
std::atomic<bool> g_stop{false};
void on_signal(int) { g_stop = true; }
}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lossy reflected TUN link"};

  TunLinkConfig cfg;
  double loss = 0.0, dup = 0.0, reorder = 0.0;
  uint32_t reorder_depth = 1;
  uint64_t seed = 1;

  app.add_option("--device", cfg.device, "interface name pattern");
  app.add_option("--local", cfg.local_ip, "address assigned to the device");
  app.add_option("--peer-ip", cfg.peer_ip, "reflected peer address");
  app.add_option("--prefix", cfg.prefix_len, "subnet prefix length");
  app.add_option("--loss", loss, "loss probability")->check(CLI::Range(0.0, 1.0));
  app.add_option("--dup", dup, "duplication probability")->check(CLI::Range(0.0, 1.0));
  app.add_option("--reorder", reorder, "reorder probability")->check(CLI::Range(0.0, 1.0));
  app.add_option("--reorder-depth", reorder_depth, "reorder hold depth");
  app.add_option("--seed", seed, "rng seed");
  app.add_option("--delay-ms", cfg.delay_ms, "fixed one-way delay in milliseconds");
  app.add_option("--mtu", cfg.mtu, "device MTU (0 = kernel default)");

  CLI11_PARSE(app, argc, argv);

  try {
    cfg.impair.loss_prob = loss;
    cfg.impair.dup_prob = dup;
    cfg.impair.reorder_prob = reorder;
    cfg.impair.reorder_depth = reorder_depth;
    cfg.impair.seed = seed;

    TunLossyLink link(cfg);
    std::fprintf(stderr, "tunlink: %s up, %s <-> %s, loss %.4f, delay %.2f ms\n",
                 link.device().c_str(), cfg.local_ip.c_str(), cfg.peer_ip.c_str(), loss,
                 cfg.delay_ms);

    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));

    auto st = link.stats();
    link.stop();
    std::fprintf(stderr, "forwarded %llu, dropped %llu, dup %llu, reordered %llu\n",
                 static_cast<unsigned long long>(st.forwarded),
                 static_cast<unsigned long long>(st.dropped),
                 static_cast<unsigned long long>(st.duplicated),
                 static_cast<unsigned long long>(st.reordered));
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ucr-tunlink: %s\n", e.what());
    return 1;
  }
}
