#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "stm/sim.hpp"

using namespace stm;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
}

std::size_t feature_index(const FeatureSchema& s, const std::string& name) {
  for (std::size_t i = 0; i < s.names.size(); ++i)
    if (s.names[i] == name) return i;
  REQUIRE(false);
  return 0;
}

// hop distance from target to upstream callers (independent oracle)
std::vector<std::size_t> hops_oracle(const ServiceGraph& g, std::size_t tgt) {
  const std::size_t inf = static_cast<std::size_t>(-1);
  std::vector<std::size_t> d(g.n, inf);
  d[tgt] = 0;
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& [u, v] : g.edges) {
      if (d[v] != inf && d[u] > d[v] + 1) {
        d[u] = d[v] + 1;
        changed = true;
      }
    }
  }
  return d;
}

}  // namespace

TEST_CASE("default_schema") {
  FeatureSchema s = default_schema();
  CHECK(s.names.size() == 16);
  std::set<std::string> uniq(s.names.begin(), s.names.end());
  CHECK(uniq.size() == 16);
  for (auto i : s.network_flags) CHECK(i < 16);
  CHECK(s.names[feature_index(s, "cpu_usage")] == "cpu_usage");
  CHECK(s.names[feature_index(s, "request_rate")] == "request_rate");
}

TEST_CASE("build_topology") {
  SUBCASE("two services force the single entry->backend edge") {
    SeededRng rng(1);
    auto [g, m] = build_topology(2, 1, rng);
    REQUIRE(g.edges.size() == 1);
    CHECK(g.layer[g.edges[0].first] == 0);
    CHECK(g.layer[g.edges[0].second] == 2);
  }
  SUBCASE("deterministic per seed") {
    SeededRng r1(9), r2(9);
    auto [g1, m1] = build_topology(8, 3, r1);
    auto [g2, m2] = build_topology(8, 3, r2);
    CHECK(g1.edges == g2.edges);
    CHECK(g1.host == g2.host);
    CHECK(m1.host_counts == m2.host_counts);
  }
  SUBCASE("structure over 100 seeds") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      SeededRng rng(seed);
      std::size_t n = 4 + seed % 9, M = 1 + seed % 4;
      auto [g, m] = build_topology(n, M, rng);
      std::size_t total = 0;
      for (auto c : m.host_counts) total += c;
      CHECK(total == n);
      // host-contiguous node order
      for (std::size_t i = 1; i < n; ++i) CHECK(g.host[i - 1] <= g.host[i]);
      for (const auto& [u, v] : g.edges) CHECK(u != v);
      // every service reachable from some entry
      std::vector<char> seen(n, 0);
      for (std::size_t i = 0; i < n; ++i)
        if (g.layer[i] == 0) seen[i] = 1;
      bool grow = true;
      while (grow) {
        grow = false;
        for (const auto& [u, v] : g.edges)
          if (seen[u] && !seen[v]) {
            seen[v] = 1;
            grow = true;
          }
      }
      for (std::size_t i = 0; i < n; ++i) CHECK(seen[i] == 1);
    }
  }
  SUBCASE("rejects degenerate sizes") {
    SeededRng rng(1);
    CHECK_THROWS_AS(build_topology(1, 1, rng), std::invalid_argument);
    CHECK_THROWS_AS(build_topology(4, 0, rng), std::invalid_argument);
  }
}

TEST_CASE("simulate_window") {
  SeededRng trng(5);
  auto [g, m] = build_topology(6, 2, trng);
  FeatureSchema schema = default_schema();
  const std::size_t T = 32;

  SUBCASE("zero noise, no faults: pure deterministic baseline") {
    SeededRng r1(11), r2(11);
    WindowData a = simulate_window(g, m, schema, {}, T, r1, 0.0);
    WindowData b = simulate_window(g, m, schema, {}, T, r2, 0.0);
    CHECK(a.states.data == b.states.data);
    CHECK(a.adjacency.data == b.adjacency.data);
    // trajectory is a pure sinusoid: f(t) == f(t + period)
    const std::size_t period = 16;  // max(8, T/2)
    for (std::size_t t = 0; t + period < T; ++t)
      for (std::size_t i = 0; i < 6 * 16; ++i)
        CHECK(a.states.data[t * 6 * 16 + i] ==
              doctest::Approx(a.states.data[(t + period) * 6 * 16 + i])
                  .epsilon(1e-9));
  }
  SUBCASE("cpu stress doubles the target's mean cpu usage") {
    FaultSpec f;
    f.kind = FaultKind::kCpuStress;
    f.target = 2;
    f.start = 8;
    f.duration = 12;
    f.intensity = 1.0;
    SeededRng rng(21);
    WindowData w = simulate_window(g, m, schema, {f}, T, rng);
    std::size_t cpu = feature_index(schema, "cpu_usage");
    double inside = 0, outside = 0;
    std::size_t ni = 0, no = 0;
    for (std::size_t t = 0; t < T; ++t) {
      double v = w.states.data[(t * 6 + f.target) * 16 + cpu];
      if (t >= f.start && t < f.start + f.duration) {
        inside += v;
        ++ni;
      } else {
        outside += v;
        ++no;
      }
    }
    CHECK(inside / ni > 2.0 * (outside / no));
  }
  SUBCASE("cascade onsets are delayed by 2 steps per hop and ordered") {
    // zero noise isolates the fault response exactly
    SeededRng rb(31), rf(31);
    WindowData base = simulate_window(g, m, schema, {}, T, rb, 0.0);
    FaultSpec f;
    f.kind = FaultKind::kNetworkDelay;
    // pick a callee that has at least one caller
    f.target = g.edges.front().second;
    f.start = 4;
    f.duration = 10;
    f.intensity = 1.0;
    WindowData w = simulate_window(g, m, schema, {f}, T, rf, 0.0);
    auto dist = hops_oracle(g, f.target);
    std::vector<std::size_t> onset(6, T + 1);
    for (std::size_t n = 0; n < 6; ++n) {
      for (std::size_t t = 0; t < T; ++t) {
        bool differs = false;
        for (std::size_t c = 0; c < 16; ++c) {
          if (std::abs(w.states.data[(t * 6 + n) * 16 + c] -
                       base.states.data[(t * 6 + n) * 16 + c]) > 1e-9) {
            differs = true;
            break;
          }
        }
        if (differs) {
          onset[n] = t;
          break;
        }
      }
    }
    for (std::size_t n = 0; n < 6; ++n) {
      if (dist[n] == static_cast<std::size_t>(-1)) {
        CHECK(onset[n] == T + 1);  // untouched off-path services
        continue;
      }
      CHECK(onset[n] == f.start + 2 * dist[n]);
    }
  }
  SUBCASE("pod kill zeroes the pod and its adjacency, then restores") {
    FaultSpec f;
    f.kind = FaultKind::kPodKill;
    f.target = g.edges.front().first;
    f.start = 10;
    f.duration = 6;
    f.intensity = 1.0;
    SeededRng rng(41);
    WindowData w = simulate_window(g, m, schema, {f}, T, rng);
    for (std::size_t t = f.start; t < f.start + f.duration; ++t) {
      for (std::size_t c = 0; c < 16; ++c)
        CHECK(w.states.data[(t * 6 + f.target) * 16 + c] == 0.0);
      for (std::size_t v = 0; v < 6; ++v) {
        CHECK(w.adjacency.data[(t * 6 + f.target) * 6 + v] == 0.0);
        CHECK(w.adjacency.data[(t * 6 + v) * 6 + f.target] == 0.0);
      }
    }
    // restored outside the fault window
    double after = 0;
    for (std::size_t c = 0; c < 16; ++c)
      after += w.states.data[((f.start + f.duration) * 6 + f.target) * 16 + c];
    CHECK(after > 0.0);
  }
  SUBCASE("adjacency support is exactly the edge set") {
    SeededRng rng(51);
    WindowData w = simulate_window(g, m, schema, {}, T, rng);
    std::set<std::pair<std::size_t, std::size_t>> es(g.edges.begin(),
                                                     g.edges.end());
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t u = 0; u < 6; ++u)
        for (std::size_t v = 0; v < 6; ++v) {
          double x = w.adjacency.data[(t * 6 + u) * 6 + v];
          CHECK(x >= 0.0);
          if (es.count({u, v})) CHECK(x > 0.0);
          else CHECK(x == 0.0);
        }
  }
  SUBCASE("fault outside the window is rejected") {
    FaultSpec f;
    f.start = T - 2;
    f.duration = 5;
    SeededRng rng(61);
    CHECK_THROWS_AS(simulate_window(g, m, schema, {f}, T, rng),
                    std::invalid_argument);
  }
  SUBCASE("normal windows are stationary around the baseline") {
    SeededRng rb(1);
    WindowData base = simulate_window(g, m, schema, {}, T, rb, 0.0);
    const std::size_t R = 100;
    // per-window per-feature means
    std::vector<std::vector<double>> wm(16, std::vector<double>(R, 0.0));
    for (std::size_t r = 0; r < R; ++r) {
      SeededRng rng = SeededRng::derive(777, r);
      WindowData w = simulate_window(g, m, schema, {}, T, rng);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t n = 0; n < 6; ++n)
          for (std::size_t c = 0; c < 16; ++c)
            wm[c][r] += w.states.data[(t * 6 + n) * 16 + c];
      for (std::size_t c = 0; c < 16; ++c) wm[c][r] /= T * 6.0;
    }
    for (std::size_t c = 0; c < 16; ++c) {
      double b = 0;
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t n = 0; n < 6; ++n)
          b += base.states.data[(t * 6 + n) * 16 + c];
      b /= T * 6.0;
      double mean = 0;
      for (double v : wm[c]) mean += v;
      mean /= R;
      double var = 0;
      for (double v : wm[c]) var += (v - mean) * (v - mean);
      double sd = std::sqrt(var / R) + 1e-9;
      std::size_t within = 0;
      for (double v : wm[c])
        if (std::abs(v - b) <= 3.0 * sd + 0.05 * (b + 1.0)) ++within;
      CHECK(within >= 99);
    }
  }
}

TEST_CASE("apportion_counts") {
  SUBCASE("acceptance mix resolves exactly") {
    std::vector<double> r = {0.4, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1};
    CHECK(apportion_counts(r, 200) ==
          std::vector<std::size_t>{80, 20, 20, 20, 20, 20, 20});
    CHECK(apportion_counts(r, 10) ==
          std::vector<std::size_t>{4, 1, 1, 1, 1, 1, 1});
  }
  SUBCASE("largest remainders win the leftover slots") {
    std::vector<double> r = {0.5, 0.3, 0.2};
    // exact 3.5 / 2.1 / 1.4; floors 3/2/1; remainder order .5 > .4 > .1
    CHECK(apportion_counts(r, 7) == std::vector<std::size_t>{4, 2, 1});
  }
  SUBCASE("counts always cover the total") {
    std::vector<double> r = {0.4, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1};
    for (std::size_t total = 1; total <= 50; ++total) {
      auto c = apportion_counts(r, total);
      std::size_t sum = 0;
      for (auto x : c) sum += x;
      CHECK(sum == total);
    }
  }
}

TEST_CASE("generate_dataset") {
  namespace fs = std::filesystem;
  GenConfig cfg;
  cfg.samples = 10;
  cfg.T = 16;
  cfg.N = 8;
  cfg.M = 3;
  cfg.C = 16;
  cfg.seed = 7;

  SUBCASE("byte-identical regeneration") {
    cfg.ratios = {0.4, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1};
    generate_dataset(cfg, "gen_a");
    generate_dataset(cfg, "gen_b");
    for (const char* f :
         {"manifest.txt", "states.bin", "adjacency.bin", "deployment.bin"}) {
      CHECK(slurp(std::string("gen_a/") + f) ==
            slurp(std::string("gen_b/") + f));
    }
    // extents: samples x 2T x N x C floats
    CHECK(fs::file_size("gen_a/states.bin") == 10 * 32 * 8 * 16 * 4);
    CHECK(fs::file_size("gen_a/adjacency.bin") == 10 * 32 * 8 * 8 * 4);
    CHECK(fs::file_size("gen_a/deployment.bin") == 3 * 4);
    fs::remove_all("gen_a");
    fs::remove_all("gen_b");
  }
  SUBCASE("all-normal manifest carries no fault rows") {
    cfg.ratios = {1, 0, 0, 0, 0, 0, 0};
    generate_dataset(cfg, "gen_n");
    std::string man = slurp("gen_n/manifest.txt");
    CHECK(man.find("fault=") == std::string::npos);
    fs::remove_all("gen_n");
  }
  SUBCASE("fault rows match the apportioned counts") {
    cfg.samples = 20;
    cfg.ratios = {0.4, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1};
    generate_dataset(cfg, "gen_f");
    std::string man = slurp("gen_f/manifest.txt");
    std::size_t rows = 0, pos = 0;
    while ((pos = man.find("fault=", pos)) != std::string::npos) {
      ++rows;
      pos += 6;
    }
    CHECK(rows == 12);  // 20 - 8 normals
    fs::remove_all("gen_f");
  }
  SUBCASE("invalid ratios rejected") {
    cfg.ratios = {0.5, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1};
    CHECK_THROWS_AS(generate_dataset(cfg, "gen_x"), std::invalid_argument);
  }
}
