#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stm/array.hpp"
#include "stm/graph_message.hpp"
#include "stm/sim.hpp"

namespace stm {

/// On-disk dataset: manifest.txt (key=value), states.bin
/// (samples x window_len x N x C float32 LE), adjacency.bin
/// (samples x window_len x N x N), deployment.bin (M uint32 LE).
struct DatasetBundle {
  std::size_t samples = 0, T = 0, window_len = 0, N = 0, M = 0, C = 0;
  std::uint64_t seed = 0;
  std::vector<double> ratios;
  FeatureSchema schema;
  DenseArray states;
  DenseArray adjacency;  // empty when loaded with skip_adjacency
  DeploymentMap map;

  struct FaultRow {
    std::size_t sample;
    std::string kind;
    std::size_t target, start, duration;
    double intensity;
  };
  std::vector<FaultRow> faults;
};

/// Loads and validates a bundle; byte lengths must match the manifest
/// extents exactly. skip_adjacency leaves the adjacency array empty
/// and never opens the file (no-adjacency ablation contract).
DatasetBundle load_bundle(const std::string& dir, bool skip_adjacency = false);

/// Contiguous order-preserving 8:1:1 ranges, largest-remainder rounded
/// with leftovers going to train first.
struct SplitSpec {
  std::size_t train_end = 0, val_end = 0, test_end = 0;  // exclusive

  std::size_t train_count() const { return train_end; }
  std::size_t val_count() const { return val_end - train_end; }
  std::size_t test_count() const { return test_end - val_end; }
};

SplitSpec make_split(std::size_t samples);

/// Per-feature min/max fitted on the train split after log1p on the
/// network-flagged features. Degenerate features (max == min) map to
/// constant zero.
struct NormalizerState {
  std::vector<double> fmin, fmax;  // per feature
  std::vector<char> flagged;       // log1p applied before scaling

  double normalize_value(double v, std::size_t c) const;
  double denormalize_value(double v, std::size_t c) const;
};

NormalizerState fit_normalizer(const DatasetBundle& bundle,
                               const SplitSpec& split);

/// Normalized copy of every sample's states (train statistics applied
/// to all splits). Rejects negative values on flagged features.
DenseArray preprocess(const DatasetBundle& bundle, const NormalizerState& ns);

/// One training example: history window, its adjacency, next-T target.
struct WindowPair {
  DenseArray hist;    // T x N x C
  DenseArray adj;     // T x N x N (empty when adjacency skipped)
  DenseArray target;  // T x N x C
};

/// Pairs for the samples in [begin, end): history = first T steps,
/// target = last T, adjacency over the history span.
std::vector<WindowPair> window_pairs(const DatasetBundle& bundle,
                                     const DenseArray& normalized,
                                     std::size_t begin, std::size_t end);

}  // namespace stm
