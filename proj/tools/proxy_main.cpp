// ucr-impair-proxy: bidirectional UDP forwarding proxy with seeded loss,
// duplication, and reordering applied independently per direction.
//
//   ucr-impair-proxy --listen 0.0.0.0:19600 --forward 127.0.0.1:19555 \
//                    --loss 0.03 --seed 7

#include <ucrdma/impair.hpp>

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
  CLI::App app{"Seeded UDP link impairment proxy"};

  std::string listen = "0.0.0.0:19600";
  std::string forward = "127.0.0.1:19555";
  double loss = 0.0, dup = 0.0, reorder = 0.0;
  uint32_t reorder_depth = 1;
  uint64_t seed = 1;

  app.add_option("--listen", listen, "address to accept client datagrams on");
  app.add_option("--forward", forward, "address to forward them to");
  app.add_option("--loss", loss, "loss probability")->check(CLI::Range(0.0, 1.0));
  app.add_option("--dup", dup, "duplication probability")->check(CLI::Range(0.0, 1.0));
  app.add_option("--reorder", reorder, "reorder probability")->check(CLI::Range(0.0, 1.0));
  app.add_option("--reorder-depth", reorder_depth, "reorder hold depth in slots");
  app.add_option("--seed", seed, "rng seed");

  CLI11_PARSE(app, argc, argv);

  try {
    ImpairmentSpec spec;
    spec.loss_prob = loss;
    spec.dup_prob = dup;
    spec.reorder_prob = reorder;
    spec.reorder_depth = reorder_depth;
    spec.seed = seed;

    UdpProxy proxy(listen, forward, spec);
    std::fprintf(stderr, "proxy: %s <-> %s (loss %.4f dup %.4f reorder %.4f seed %llu)\n",
                 listen.c_str(), forward.c_str(), loss, dup, reorder,
                 static_cast<unsigned long long>(seed));

    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));

    auto st = proxy.stats();
    proxy.stop();
    std::fprintf(stderr,
                 "to-forward: offered %llu forwarded %llu dropped %llu dup %llu\n"
                 "to-client:  offered %llu forwarded %llu dropped %llu dup %llu\n",
                 static_cast<unsigned long long>(st.to_forward.offered),
                 static_cast<unsigned long long>(st.to_forward.forwarded),
                 static_cast<unsigned long long>(st.to_forward.dropped),
                 static_cast<unsigned long long>(st.to_forward.duplicated),
                 static_cast<unsigned long long>(st.to_client.offered),
                 static_cast<unsigned long long>(st.to_client.forwarded),
                 static_cast<unsigned long long>(st.to_client.dropped),
                 static_cast<unsigned long long>(st.to_client.duplicated));
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ucr-impair-proxy: %s\n", e.what());
    return 1;
  }
}
