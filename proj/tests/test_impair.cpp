#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <ucrdma/impair.hpp>

#include <cmath>
#include <cstring>
#include <vector>

using namespace ucrdma;

namespace {

std::vector<std::byte> dgram(uint32_t tag) {
  std::vector<std::byte> d(8);
  std::memcpy(d.data(), &tag, 4);
  return d;
}

uint32_t tag_of(std::span<const std::byte> d) {
  uint32_t t;
  std::memcpy(&t, d.data(), 4);
  return t;
}

// run a stream of n tagged datagrams through a filter; returns output tags
std::vector<uint32_t> run_filter(const ImpairmentSpec& spec, int n) {
  ImpairmentFilter f(spec);
  std::vector<uint32_t> out;
  for (int i = 0; i < n; i++) {
    auto d = dgram(static_cast<uint32_t>(i));
    f.feed(d, [&](std::span<const std::byte> b) { out.push_back(tag_of(b)); });
  }
  f.flush([&](std::span<const std::byte> b) { out.push_back(tag_of(b)); });
  return out;
}

}  // namespace

TEST_CASE("zero-impairment spec is the identity") {
  ImpairmentSpec spec{};
  spec.seed = 5;
  auto out = run_filter(spec, 1000);
  REQUIRE(out.size() == 1000);
  for (int i = 0; i < 1000; i++) CHECK(out[i] == static_cast<uint32_t>(i));
}

TEST_CASE("loss 1.0 drops everything") {
  ImpairmentSpec spec{};
  spec.loss_prob = 1.0;
  spec.seed = 5;
  CHECK(run_filter(spec, 500).empty());
}

TEST_CASE("identical seed and input give bit-identical output") {
  ImpairmentSpec spec{};
  spec.loss_prob = 0.2;
  spec.dup_prob = 0.1;
  spec.reorder_prob = 0.15;
  spec.reorder_depth = 4;
  spec.seed = 0xfeedface;
  auto a = run_filter(spec, 5000);
  auto b = run_filter(spec, 5000);
  CHECK(a == b);

  spec.seed = 0xfeedfacf;
  auto c = run_filter(spec, 5000);
  CHECK(a != c);
}

TEST_CASE("empirical loss rate converges within 3-sigma binomial bounds") {
  const int N = 100000;
  const double p = 0.10;
  ImpairmentSpec spec{};
  spec.loss_prob = p;
  spec.seed = 99;
  auto out = run_filter(spec, N);
  double observed = 1.0 - double(out.size()) / N;
  // binomial sigma = sqrt(p(1-p)/N) ~ 0.00095; spec tolerance is +-0.003
  CHECK(observed == doctest::Approx(p).epsilon(0.03));
  CHECK(std::abs(observed - p) < 0.003);

  auto st = ImpairmentFilter(spec).stats();
  (void)st;
}

TEST_CASE("duplication rate approximately multiplies the stream by 1+p") {
  const int N = 100000;
  ImpairmentSpec spec{};
  spec.dup_prob = 0.5;
  spec.seed = 31337;
  auto out = run_filter(spec, N);
  double factor = double(out.size()) / N;
  double sigma = std::sqrt(0.5 * 0.5 / N);
  CHECK(std::abs(factor - 1.5) < 3 * sigma + 1e-9);
}

TEST_CASE("reorder delays a datagram by at most reorder_depth slots") {
  ImpairmentSpec spec{};
  spec.reorder_prob = 0.2;
  spec.reorder_depth = 3;
  spec.seed = 4242;
  const int N = 20000;
  auto out = run_filter(spec, N);
  REQUIRE(out.size() == N);  // nothing lost, nothing duplicated

  // every tag appears exactly once, displaced by at most depth slots forward
  std::vector<int> pos(N, -1);
  for (int i = 0; i < N; i++) {
    REQUIRE(pos[out[i]] == -1);
    pos[out[i]] = i;
  }
  bool any_reordered = false;
  for (int t = 0; t < N; t++) {
    CHECK(pos[t] >= t - 3 - 3);  // a held datagram lets later ones overtake
    CHECK(pos[t] <= t + 3);
    if (pos[t] != t) any_reordered = true;
  }
  CHECK(any_reordered);
}

TEST_CASE("filter stats account for every decision") {
  ImpairmentSpec spec{};
  spec.loss_prob = 0.3;
  spec.dup_prob = 0.2;
  spec.seed = 7;
  ImpairmentFilter f(spec);
  size_t emitted = 0;
  for (int i = 0; i < 10000; i++) {
    auto d = dgram(i);
    f.feed(d, [&](std::span<const std::byte>) { emitted++; });
  }
  f.flush([&](std::span<const std::byte>) { emitted++; });
  auto st = f.stats();
  CHECK(st.offered == 10000);
  CHECK(st.dropped + st.forwarded == 10000);
  CHECK(st.forwarded + st.duplicated == emitted);
}

TEST_CASE("find_drop_seed locates a seed with a requested drop pattern") {
  // drop exactly datagram index 1 out of the first 6
  auto seed = impair::find_drop_seed(0.3, 6, {1});
  REQUIRE(seed.has_value());
  ImpairmentSpec spec{};
  spec.loss_prob = 0.3;
  spec.seed = *seed;
  auto out = run_filter(spec, 6);
  REQUIRE(out.size() == 5);
  CHECK(out == std::vector<uint32_t>{0, 2, 3, 4, 5});
}
