#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stm/array.hpp"
#include "stm/graph_message.hpp"
#include "stm/rng.hpp"

namespace stm {

/// Directed service call graph. Node order is host-contiguous so the
/// deployment map can address pods as consecutive slices.
struct ServiceGraph {
  std::size_t n = 0;
  std::vector<std::pair<std::size_t, std::size_t>> edges;  // caller -> callee
  std::vector<std::size_t> layer;  // 0 entry, 1 middle, 2 backend
  std::vector<std::size_t> host;   // host id per service
};

enum class FaultKind {
  kCpuStress,
  kMemoryStress,
  kNetworkLoss,
  kNetworkDelay,
  kIoStress,
  kPodKill,
};

const char* fault_kind_name(FaultKind k);
FaultKind fault_kind_from_name(const std::string& name);

struct FaultSpec {
  FaultKind kind = FaultKind::kCpuStress;
  std::size_t target = 0;
  std::size_t start = 0;
  std::size_t duration = 0;
  double intensity = 1.0;  // in (0, 1]
};

struct FeatureSchema {
  std::vector<std::string> names;
  std::vector<std::size_t> network_flags;  // indices given log1p downstream
};

/// The 16 default per-pod metrics and their network-relevant subset.
FeatureSchema default_schema();

/// Layered DAG (entry -> middle -> backend) with rng-chosen extra
/// edges, round-robin host placement perturbed by rng and relabeled
/// host-contiguous. Deterministic per rng state.
std::pair<ServiceGraph, DeploymentMap> build_topology(std::size_t n_services,
                                                      std::size_t n_hosts,
                                                      SeededRng& rng);

struct WindowData {
  DenseArray states;     // T x N x C
  DenseArray adjacency;  // T x N x N, nonzero only on edges
};

/// One telemetry window: per-feature sinusoid baselines, AR(0.8)
/// noise, request-rate coupling along call edges, fault injection with
/// hop-delayed (2 steps/hop) geometrically attenuated (0.5^h) cascades
/// to upstream callers, and a connection-count / inverse-latency
/// adjacency blend. noise_amp = 0 with no faults yields the pure
/// sinusoid baselines.
WindowData simulate_window(const ServiceGraph& graph, const DeploymentMap& map,
                           const FeatureSchema& schema,
                           const std::vector<FaultSpec>& faults, std::size_t T,
                           SeededRng& rng, double noise_amp = 1.0);

/// Ratios order: normal, cpu-stress, memory-stress, network-loss,
/// network-delay, io-stress, pod-kill.
struct GenConfig {
  std::size_t samples = 10;
  std::size_t T = 16;  // model horizon; windows are 2T steps long
  std::size_t N = 8;
  std::size_t M = 3;
  std::size_t C = 16;
  std::vector<double> ratios = {1, 0, 0, 0, 0, 0, 0};
  std::uint64_t seed = 7;
  double noise_amp = 1.0;
  double fault_intensity = 1.0;

  void validate() const;
};

/// Largest-remainder apportionment of `total` across `ratios`
/// (remainder ties resolved toward earlier entries).
std::vector<std::size_t> apportion_counts(const std::vector<double>& ratios,
                                          std::size_t total);

/// Writes manifest.txt, states.bin, adjacency.bin, deployment.bin into
/// out_dir. Byte-identical for identical configs.
void generate_dataset(const GenConfig& cfg, const std::string& out_dir);

}  // namespace stm
