#pragma once

#include <vector>

#include "stm/params.hpp"
#include "stm/tensor.hpp"

namespace stm {

/// Pod counts per host; node ordering is host-grouped and contiguous.
struct DeploymentMap {
  std::vector<std::size_t> host_counts;

  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : host_counts) n += c;
    return n;
  }
};

/// Per-step row-stochastic adjacency with guaranteed self-loops.
struct NormalizedAdjacency {
  DenseArray values;  // T x N x N

  std::size_t steps() const { return values.shape[0]; }
  std::size_t nodes() const { return values.shape[1]; }
};

/// Row-scales A_t + I per step. Rejects negative or non-finite input.
NormalizedAdjacency normalize_adjacency(const DenseArray& raw);

/// Identity adjacency (used by the no-adjacency ablation).
NormalizedAdjacency identity_adjacency(std::size_t T, std::size_t N);

/// Multi-head scaled dot-product attention parameters; heads live in
/// column blocks of D x D projections.
struct MhaParams {
  Tensor wq, wk, wv, wo;  // D x D each
  std::size_t heads = 1;
};

MhaParams make_mha(ParamStore& store, const std::string& prefix, std::size_t D,
                   std::size_t heads, SeededRng& rng);

/// Self-attention over the last-but-one axis with leading axes as batch.
Tensor multihead_self_attention(const Tensor& x, const MhaParams& p);

struct GatParams {
  Tensor w;                   // D x D, heads in column blocks
  Tensor attn_src, attn_dst;  // heads x (D/heads)
  Tensor wo;                  // D x D
  double leaky_slope = 0.2;
  std::size_t heads = 1;
};

GatParams make_gat(ParamStore& store, const std::string& prefix, std::size_t D,
                   std::size_t heads, double slope, SeededRng& rng);

/// Host-contiguous node slices; concat of the result restores the input.
std::vector<Tensor> split_by_host(const Tensor& x, const DeploymentMap& m);

/// Per-host self-attention at each time step, K1 stacked layers with
/// parameters shared across hosts and steps. Never mixes hosts.
Tensor imm_forward(const Tensor& x, const DeploymentMap& m,
                   const std::vector<MhaParams>& layers);

/// Graph attention over the per-step adjacency. Edge weights enter the
/// logits as an additive log bias; non-edges are masked out.
Tensor gat_layer(const Tensor& x, const NormalizedAdjacency& adj,
                 const GatParams& p);

/// Neighbor attention coefficients of one layer, T x heads x N x N
/// (diagnostic surface used by tests).
DenseArray gat_coefficients(const Tensor& x, const NormalizedAdjacency& adj,
                            const GatParams& p);

/// K2 stacked gat_layer applications with per-layer residuals.
Tensor smm_forward(const Tensor& x, const NormalizedAdjacency& adj,
                   const std::vector<GatParams>& layers);

}  // namespace stm
