#include "stm/sim.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace stm {

namespace {

constexpr std::size_t kFeatures = 16;
constexpr std::size_t kReqRate = 9;
constexpr double kCascadeDelay = 2.0;  // steps per hop
constexpr double kCascadeAtten = 0.5;

struct FeatureDef {
  const char* name;
  double base, sin_amp, noise_amp, coupling;
};

// base levels keep every trajectory nonnegative under modest noise
constexpr FeatureDef kDefs[kFeatures] = {
    {"cpu_usage", 45, 8, 1.5, 10},
    {"memory_usage", 60, 5, 1.0, 4},
    {"disk_read", 20, 6, 1.2, 3},
    {"disk_write", 15, 4, 1.0, 2},
    {"connection_latency", 30, 5, 1.5, 5},
    {"tcp_retransmits", 4, 1.5, 0.5, 1},
    {"socket_queue_length", 10, 3, 1.0, 2},
    {"throughput_in", 80, 20, 3.0, 15},
    {"throughput_out", 70, 18, 2.5, 12},
    {"request_rate", 100, 25, 4.0, 0},
    {"error_rate", 1.0, 0.3, 0.15, 0.3},
    {"p95_latency", 50, 10, 2.0, 8},
    {"gc_pause", 5, 1, 0.4, 0.5},
    {"thread_count", 40, 4, 1.0, 2},
    {"open_fds", 120, 10, 2.0, 4},
    {"restart_count", 0.2, 0.05, 0.02, 0},
};

double sinus(std::size_t c, std::size_t n, std::size_t t, double period) {
  double theta = 2.0 * M_PI * static_cast<double>(t) / period + 0.7 * c +
                 1.3 * static_cast<double>(n);
  return kDefs[c].base + kDefs[c].sin_amp * std::sin(theta);
}

// hop distance from the faulty service to each upstream caller
std::vector<std::size_t> hop_distances(const ServiceGraph& g,
                                       std::size_t target) {
  const std::size_t kUnreached = static_cast<std::size_t>(-1);
  std::vector<std::size_t> dist(g.n, kUnreached);
  dist[target] = 0;
  std::vector<std::size_t> frontier = {target};
  while (!frontier.empty()) {
    std::vector<std::size_t> next;
    for (auto v : frontier) {
      for (const auto& [caller, callee] : g.edges) {
        if (callee == v && dist[caller] == kUnreached) {
          dist[caller] = dist[v] + 1;
          next.push_back(caller);
        }
      }
    }
    frontier = std::move(next);
  }
  return dist;
}

}  // namespace

const char* fault_kind_name(FaultKind k) {
  switch (k) {
    case FaultKind::kCpuStress: return "cpu-stress";
    case FaultKind::kMemoryStress: return "memory-stress";
    case FaultKind::kNetworkLoss: return "network-loss";
    case FaultKind::kNetworkDelay: return "network-delay";
    case FaultKind::kIoStress: return "io-stress";
    case FaultKind::kPodKill: return "pod-kill";
  }
  return "unknown";
}

FaultKind fault_kind_from_name(const std::string& name) {
  for (int i = 0; i < 6; ++i) {
    FaultKind k = static_cast<FaultKind>(i);
    if (name == fault_kind_name(k)) return k;
  }
  throw std::invalid_argument("unknown fault kind '" + name + "'");
}

FeatureSchema default_schema() {
  FeatureSchema s;
  for (const auto& d : kDefs) s.names.emplace_back(d.name);
  s.network_flags = {4, 5, 6, 7, 8, 9, 11};
  return s;
}

std::pair<ServiceGraph, DeploymentMap> build_topology(std::size_t n_services,
                                                      std::size_t n_hosts,
                                                      SeededRng& rng) {
  if (n_services < 2) {
    throw std::invalid_argument("build_topology: need at least 2 services");
  }
  if (n_hosts < 1) {
    throw std::invalid_argument("build_topology: need at least 1 host");
  }
  const std::size_t n = n_services;
  std::size_t entries = std::max<std::size_t>(1, n / 4);
  std::size_t backends = std::max<std::size_t>(1, n / 4);
  if (entries + backends > n) backends = n - entries;

  std::vector<std::size_t> layer(n, 1);
  for (std::size_t i = 0; i < entries; ++i) layer[i] = 0;
  for (std::size_t i = n - backends; i < n; ++i) layer[i] = 2;

  // every non-entry service gets at least one earlier caller
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t v = entries; v < n; ++v) {
    std::size_t caller = rng.randint(v);
    edges.emplace_back(caller, v);
    for (std::size_t u = 0; u < v; ++u) {
      if (u != caller && layer[u] <= layer[v] && rng.uniform01() < 0.25) {
        edges.emplace_back(u, v);
      }
    }
  }

  // round-robin placement with rng swaps, then relabel host-contiguous
  std::vector<std::size_t> host(n);
  for (std::size_t i = 0; i < n; ++i) host[i] = i % n_hosts;
  for (std::size_t k = 0; k < n / 2; ++k) {
    std::size_t a = rng.randint(n), b = rng.randint(n);
    std::swap(host[a], host[b]);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return host[a] < host[b];
                   });
  std::vector<std::size_t> relabel(n);  // old index -> new index
  for (std::size_t i = 0; i < n; ++i) relabel[order[i]] = i;

  ServiceGraph g;
  g.n = n;
  g.layer.resize(n);
  g.host.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    g.layer[relabel[i]] = layer[i];
    g.host[relabel[i]] = host[i];
  }
  for (auto& [u, v] : edges) g.edges.emplace_back(relabel[u], relabel[v]);
  std::sort(g.edges.begin(), g.edges.end());

  DeploymentMap m;
  m.host_counts.assign(n_hosts, 0);
  for (auto h : g.host) ++m.host_counts[h];
  return {g, m};
}

WindowData simulate_window(const ServiceGraph& graph, const DeploymentMap& map,
                           const FeatureSchema& schema,
                           const std::vector<FaultSpec>& faults, std::size_t T,
                           SeededRng& rng, double noise_amp) {
  const std::size_t N = graph.n, C = schema.names.size();
  if (C != kFeatures) {
    throw std::invalid_argument("simulate_window: schema must carry " +
                                std::to_string(kFeatures) + " features");
  }
  if (map.total() != N) {
    throw std::invalid_argument("simulate_window: deployment map mismatch");
  }
  for (const auto& f : faults) {
    if (f.target >= N || f.start >= T || f.start + f.duration > T) {
      throw std::invalid_argument("simulate_window: fault outside window");
    }
    if (!(f.intensity > 0.0 && f.intensity <= 1.0)) {
      throw std::invalid_argument("simulate_window: intensity must be (0,1]");
    }
  }
  const double period = std::max<double>(8.0, static_cast<double>(T) / 2.0);

  // AR(0.8) noise, drawn in fixed (n, c, t) order
  std::vector<double> noise(N * C * T, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      double e = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        e = 0.8 * e + noise_amp * kDefs[c].noise_amp * rng.normal();
        noise[(n * C + c) * T + t] = e;
      }
    }
  }

  // request-rate deviation from its sinusoid, propagated caller->callee
  std::vector<double> dev_r(N * T, 0.0);
  std::vector<std::size_t> topo(N);
  std::iota(topo.begin(), topo.end(), 0);
  std::stable_sort(topo.begin(), topo.end(), [&](std::size_t a, std::size_t b) {
    return graph.layer[a] < graph.layer[b];
  });
  for (auto v : topo) {
    for (std::size_t t = 0; t < T; ++t) {
      double d = noise[(v * C + kReqRate) * T + t];
      for (const auto& [caller, callee] : graph.edges) {
        if (callee == v) d += 0.4 * dev_r[caller * T + t];
      }
      dev_r[v * T + t] = d;
    }
  }

  WindowData out;
  out.states = DenseArray({T, N, C});
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        double v = sinus(c, n, t, period) + noise[(n * C + c) * T + t];
        if (c != kReqRate) {
          v += kDefs[c].coupling * dev_r[n * T + t] / kDefs[kReqRate].base;
        } else {
          v += dev_r[n * T + t] - noise[(n * C + kReqRate) * T + t];
        }
        out.states.data[(t * N + n) * C + c] = v;
      }
    }
  }

  auto bump = [&](std::size_t t, std::size_t n, std::size_t c, double amount) {
    out.states.data[(t * N + n) * C + c] += amount;
  };

  std::vector<char> killed(T * N, 0);
  std::vector<std::vector<std::size_t>> fault_dists;
  for (const auto& f : faults) fault_dists.push_back(hop_distances(graph, f.target));

  for (std::size_t fi = 0; fi < faults.size(); ++fi) {
    const FaultSpec& f = faults[fi];
    const double I = f.intensity;
    for (std::size_t t = f.start; t < f.start + f.duration; ++t) {
      switch (f.kind) {
        case FaultKind::kCpuStress:
          bump(t, f.target, 0, 3.0 * kDefs[0].base * I);
          bump(t, f.target, 11, 15.0 * I);
          bump(t, f.target, 12, 4.0 * I);
          break;
        case FaultKind::kMemoryStress:
          bump(t, f.target, 1, 2.5 * kDefs[1].base * I);
          bump(t, f.target, 12, 6.0 * I);
          break;
        case FaultKind::kNetworkLoss:
          bump(t, f.target, 5, 20.0 * I);
          bump(t, f.target, 10, 8.0 * I);
          bump(t, f.target, 11, 20.0 * I);
          bump(t, f.target, 7, -0.5 * kDefs[7].base * I);
          bump(t, f.target, 8, -0.5 * kDefs[8].base * I);
          break;
        case FaultKind::kNetworkDelay:
          bump(t, f.target, 4, 40.0 * I);
          bump(t, f.target, 11, 30.0 * I);
          bump(t, f.target, 6, 10.0 * I);
          break;
        case FaultKind::kIoStress:
          bump(t, f.target, 2, 30.0 * I);
          bump(t, f.target, 3, 25.0 * I);
          bump(t, f.target, 11, 10.0 * I);
          break;
        case FaultKind::kPodKill:
          killed[t * N + f.target] = 1;
          break;
      }
    }
    // latency/error cascade to upstream callers, delayed and attenuated
    const auto& dist = fault_dists[fi];
    for (std::size_t n = 0; n < N; ++n) {
      std::size_t h = dist[n];
      if (h == 0 || h == static_cast<std::size_t>(-1)) continue;
      double a = std::pow(kCascadeAtten, static_cast<double>(h)) * I;
      std::size_t delay = static_cast<std::size_t>(kCascadeDelay) * h;
      std::size_t t0 = f.start + delay;
      std::size_t t1 = std::min<std::size_t>(T, f.start + f.duration + delay);
      for (std::size_t t = t0; t < t1 && t < T; ++t) {
        bump(t, n, 4, 20.0 * a);
        bump(t, n, 11, 30.0 * a);
        bump(t, n, 10, 3.0 * a);
      }
    }
  }

  for (auto& v : out.states.data) v = std::max(v, 0.0);

  // adjacency: connection-count / inverse-latency blend on edges
  out.adjacency = DenseArray({T, N, N});
  for (const auto& [u, v] : graph.edges) {
    double base_conn = 5.0 + static_cast<double>((u + 2 * v) % 7);
    double base_lat = 10.0 + static_cast<double>((3 * u + v) % 9);
    double phase = 0.9 * static_cast<double>(u) + 0.4 * static_cast<double>(v);
    for (std::size_t t = 0; t < T; ++t) {
      double conn = base_conn *
                        (1.0 + 0.3 * std::sin(2.0 * M_PI * t / period + phase)) +
                    0.05 * dev_r[u * T + t];
      double lat = base_lat *
                   (1.0 + 0.2 * std::sin(2.0 * M_PI * t / period + phase + 1.1));
      for (const auto& f : faults) {
        if (f.kind == FaultKind::kNetworkDelay &&
            (f.target == u || f.target == v) && t >= f.start &&
            t < f.start + f.duration) {
          lat += 40.0 * f.intensity;
        }
      }
      conn = std::max(conn, 0.1);
      double val = 0.6 * conn / 20.0 + 0.4 * (10.0 / lat);
      out.adjacency.data[(t * N + u) * N + v] = val;
    }
  }
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t n = 0; n < N; ++n) {
      if (!killed[t * N + n]) continue;
      for (std::size_t c = 0; c < C; ++c)
        out.states.data[(t * N + n) * C + c] = 0.0;
      for (std::size_t v = 0; v < N; ++v) {
        out.adjacency.data[(t * N + n) * N + v] = 0.0;
        out.adjacency.data[(t * N + v) * N + n] = 0.0;
      }
    }
  }
  return out;
}

void GenConfig::validate() const {
  if (samples < 1) throw std::invalid_argument("gen: samples >= 1");
  if (T < 4) throw std::invalid_argument("gen: T >= 4");
  if (N < 2) throw std::invalid_argument("gen: N >= 2");
  if (M < 1) throw std::invalid_argument("gen: M >= 1");
  if (C != kFeatures) {
    throw std::invalid_argument("gen: C must be " + std::to_string(kFeatures));
  }
  if (ratios.size() != 7) {
    throw std::invalid_argument("gen: need 7 ratios (normal + 6 faults)");
  }
  double sum = 0.0;
  for (double r : ratios) {
    if (r < 0.0) throw std::invalid_argument("gen: negative ratio");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw std::invalid_argument("gen: ratios must sum to 1");
  }
  if (!(fault_intensity > 0.0 && fault_intensity <= 1.0)) {
    throw std::invalid_argument("gen: fault intensity must be (0,1]");
  }
}

std::vector<std::size_t> apportion_counts(const std::vector<double>& ratios,
                                          std::size_t total) {
  std::vector<std::size_t> counts(ratios.size());
  std::vector<std::pair<double, std::size_t>> rem(ratios.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    double exact = ratios[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-12));
    assigned += counts[i];
    rem[i] = {exact - static_cast<double>(counts[i]), i};
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
    return a.first > b.first;
  });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) {
    ++counts[rem[k % rem.size()].second];
  }
  return counts;
}

namespace {

void write_f32(std::ofstream& f, const std::vector<double>& data) {
  for (double v : data) {
    float x = static_cast<float>(v);
    f.write(reinterpret_cast<const char*>(&x), sizeof(float));
  }
}

}  // namespace

void generate_dataset(const GenConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);

  SeededRng topo_rng(cfg.seed);
  auto [graph, map] = build_topology(cfg.N, cfg.M, topo_rng);
  FeatureSchema schema = default_schema();
  const std::size_t W = 2 * cfg.T;

  // per-sample fault kinds: apportioned counts, deterministic shuffle
  std::vector<std::size_t> counts = apportion_counts(cfg.ratios, cfg.samples);
  std::vector<int> kinds;  // -1 = normal, else FaultKind index
  for (std::size_t k = 0; k < 7; ++k)
    for (std::size_t i = 0; i < counts[k]; ++i)
      kinds.push_back(static_cast<int>(k) - 1);
  SeededRng shuffle_rng(cfg.seed ^ 0xa5a5a5a5a5a5a5a5ULL);
  for (std::size_t i = kinds.size(); i > 1; --i) {
    std::size_t j = shuffle_rng.randint(i);
    std::swap(kinds[i - 1], kinds[j]);
  }

  std::ofstream states(out_dir + "/states.bin", std::ios::binary);
  std::ofstream adjf(out_dir + "/adjacency.bin", std::ios::binary);
  if (!states || !adjf) {
    throw std::runtime_error("generate_dataset: cannot write to " + out_dir);
  }
  std::ostringstream fault_meta;
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    SeededRng rng = SeededRng::derive(cfg.seed, i);
    std::vector<FaultSpec> faults;
    if (kinds[i] >= 0) {
      FaultSpec f;
      f.kind = static_cast<FaultKind>(kinds[i]);
      f.target = rng.randint(cfg.N);
      f.start = W / 4 + rng.randint(W / 8 + 1);
      f.duration = std::min<std::size_t>(W - f.start, W / 2);
      f.intensity = cfg.fault_intensity * (0.7 + 0.3 * rng.uniform01());
      faults.push_back(f);
      fault_meta << "fault=" << i << "," << fault_kind_name(f.kind) << ","
                 << f.target << "," << f.start << "," << f.duration << ","
                 << f.intensity << "\n";
    }
    WindowData w =
        simulate_window(graph, map, schema, faults, W, rng, cfg.noise_amp);
    write_f32(states, w.states.data);
    write_f32(adjf, w.adjacency.data);
  }
  states.close();
  adjf.close();

  std::ofstream dep(out_dir + "/deployment.bin", std::ios::binary);
  for (auto c : map.host_counts) {
    std::uint32_t x = static_cast<std::uint32_t>(c);
    dep.write(reinterpret_cast<const char*>(&x), sizeof(x));
  }
  dep.close();

  std::ofstream man(out_dir + "/manifest.txt");
  man << "format=stm-dataset v1\n";
  man << "samples=" << cfg.samples << "\n";
  man << "T=" << cfg.T << "\n";
  man << "window_len=" << W << "\n";
  man << "N=" << cfg.N << "\n";
  man << "M=" << cfg.M << "\n";
  man << "C=" << cfg.C << "\n";
  man << "seed=" << cfg.seed << "\n";
  man << "noise_amp=" << cfg.noise_amp << "\n";
  man << "fault_intensity=" << cfg.fault_intensity << "\n";
  man << "ratios=";
  for (std::size_t i = 0; i < cfg.ratios.size(); ++i)
    man << (i ? "," : "") << cfg.ratios[i];
  man << "\nfeatures=";
  for (std::size_t i = 0; i < schema.names.size(); ++i)
    man << (i ? "," : "") << schema.names[i];
  man << "\nnetwork_flags=";
  for (std::size_t i = 0; i < schema.network_flags.size(); ++i)
    man << (i ? "," : "") << schema.network_flags[i];
  man << "\n" << fault_meta.str();
  if (!man) throw std::runtime_error("generate_dataset: manifest write failed");
}

}  // namespace stm
