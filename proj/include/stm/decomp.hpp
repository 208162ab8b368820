#pragma once

#include <utility>
#include <vector>

#include "stm/params.hpp"
#include "stm/tensor.hpp"

namespace stm {

/// Multi-filter decomposition bank: odd kernel lengths plus learnable
/// mixing logits (softmaxed to a convex mixture).
struct KernelBank {
  std::vector<std::size_t> kernel_lengths;
  Tensor mixing_logits;  // one per kernel
};

KernelBank make_kernel_bank(ParamStore& store, const std::string& prefix,
                            const std::vector<std::size_t>& lengths);

/// Windowed mean along time (axis 0) with replicate padding of (k-1)/2
/// at both ends. x: T x N x C (any trailing layout), k odd.
Tensor moving_average(const Tensor& x, std::size_t k);

/// trend = sum_i softmax(logits)_i * moving_average(x, k_i),
/// seasonal = x - trend.
std::pair<Tensor, Tensor> multi_decomp(const Tensor& x, const KernelBank& bank);

struct EmbeddingParams {
  Tensor value_proj;   // C x D
  Tensor patch_proj;   // (p*D) x D
  Tensor pos_enc;      // T x D, fixed sinusoidal table
  std::size_t patch_len = 1;
};

/// Deterministic sinusoidal position table for (T, D).
DenseArray sinusoidal_positions(std::size_t T, std::size_t D);

EmbeddingParams make_embedding(ParamStore& store, const std::string& prefix,
                               std::size_t C, std::size_t D, std::size_t p,
                               std::size_t T, SeededRng& rng);

/// x: T x N x C -> T x N x D; value projection plus positional encoding
/// broadcast over nodes.
Tensor value_embed(const Tensor& x, const EmbeddingParams& params);

/// One-stride patching: step t is re-encoded from its patch_len most
/// recent steps (replicate-padded at the start); time length preserved.
Tensor stride1_patch(const Tensor& x, const EmbeddingParams& params);

}  // namespace stm
