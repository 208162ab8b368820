#pragma once

#include <vector>

#include "stm/graph_message.hpp"
#include "stm/params.hpp"
#include "stm/tensor.hpp"

namespace stm {

/// Dominant nonzero frequencies of a spectrum with amplitude-softmax
/// weights. DC is excluded; k is clamped to the available bins.
struct PeriodSet {
  std::vector<std::size_t> freqs;    // distinct, nonzero
  std::vector<std::size_t> periods;  // ceil(T / f)
  std::vector<double> weights;       // softmax over amplitudes, sums to 1
};

PeriodSet find_periods(const std::vector<double>& mean_magnitude,
                       std::size_t T, std::size_t k_freq);

/// Positive random feature map for softmax-kernel attention.
struct PRFMap {
  DenseArray w;  // m x d, standard normal, fixed per layer
  double tau = 1.0;
  std::size_t m = 0, d = 0;
};

PRFMap make_prf_map(std::size_t m, std::size_t d, double tau, SeededRng& rng);

/// phi(x) = exp(-|x|^2/2)/sqrt(m) * [exp(w_1.x), ..., exp(w_m.x)] applied
/// to the last axis; every output coordinate is strictly positive.
Tensor prf_map(const Tensor& x, const PRFMap& map);

/// Linear-cost attention: never materializes the L x L map. Throws a
/// degenerate-kernel error when the normalizer collapses below 1e-30.
Tensor kernelized_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const PRFMap& map);

/// Gumbel-perturbed variant: q, k scaled by 1/sqrt(tau), per-key noise
/// factor exp(g_v/tau), averaged over k_s independent draws. A null rng
/// forces g = 0 (used at evaluation; with tau=1 this reduces exactly to
/// kernelized_attention).
Tensor gumbel_kernelized_attention(const Tensor& q, const Tensor& k,
                                   const Tensor& v, const PRFMap& map,
                                   std::size_t k_s, SeededRng* rng);

/// Per-step node weights from summed in- and out-degree, normalized to
/// sum to 1 per step.
DenseArray node_degree_weights(const NormalizedAdjacency& adj);

/// Non-overlapping temporal mean pooling, T -> P = T/s.
Tensor patch_time(const Tensor& x, std::size_t s);

/// Block-tridiagonal (P*N)x(P*N) matrix: diagonal block b is the mean
/// adjacency over patch b, off-diagonal neighbor blocks are identity.
DenseArray build_global_st_adjacency(const NormalizedAdjacency& adj,
                                     std::size_t s);

struct TimesBlockParams {
  Tensor kernel;  // 3 x 3 x D x D
};

TimesBlockParams make_timesblock(ParamStore& store, const std::string& prefix,
                                 std::size_t D, SeededRng& rng);

/// Period-aware temporal convolution: degree-weighted node collapse,
/// top-k period detection, per-period 2D convolution, amplitude-weighted
/// aggregation, weighted redistribution plus residual.
Tensor timesblock_forward(const Tensor& x, const NormalizedAdjacency& adj,
                          const TimesBlockParams& p, std::size_t k_freq);

struct PcaParams {
  Tensor wq, wk, wv, wo;    // D x D
  Tensor ln_gain, ln_bias;  // scalars for the row-standardized refinement
  PRFMap map;
  std::size_t patch_len = 4;  // s
  std::size_t samples = 4;    // k_s
};

PcaParams make_pca(ParamStore& store, const std::string& prefix, std::size_t D,
                   std::size_t m, double tau, std::size_t s, std::size_t k_s,
                   SeededRng& rng);

/// Global spatio-temporal attention over all (patch, node) tokens,
/// refined by the row-standardized global adjacency, then un-patched by
/// piecewise-constant repetition and residual-added.
Tensor pca_forward(const Tensor& x, const NormalizedAdjacency& adj,
                   const PcaParams& p, SeededRng* rng);

struct TmmLayerParams {
  TimesBlockParams tb;
  PcaParams pca;
  std::size_t k_freq = 2;
};

TmmLayerParams make_tmm_layer(ParamStore& store, const std::string& prefix,
                              std::size_t D, std::size_t m, double tau,
                              std::size_t s, std::size_t k_s,
                              std::size_t k_freq, SeededRng& rng);

/// Random-gate mix of the two branches. Training mode samples a fresh
/// per-(t, n) gate from rng; evaluation fixes it at 0.5. The skip_tb /
/// skip_pca switches route the whole layer through the other branch.
Tensor tmm_forward(const Tensor& x, const NormalizedAdjacency& adj,
                   const std::vector<TmmLayerParams>& layers, bool training,
                   SeededRng* rng, bool skip_tb = false, bool skip_pca = false);

}  // namespace stm
