#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stm/decomp.hpp"
#include "stm/graph_message.hpp"
#include "stm/params.hpp"
#include "stm/temporal.hpp"
#include "stm/tensor.hpp"

namespace stm {

struct ModelConfig {
  std::size_t T = 16;   // window length == prediction horizon
  std::size_t N = 8;    // pods
  std::size_t C = 16;   // raw metrics per pod
  std::size_t D = 32;   // model width
  std::size_t heads = 2;
  std::size_t L = 3;    // encoder layers
  std::size_t Lp = 1;   // decoder layers
  std::size_t K1 = 1, K2 = 1, K3 = 1;
  std::vector<std::size_t> kernel_lengths = {3, 7, 15};
  std::size_t patch_len = 3;  // one-stride patch p
  std::size_t pca_s = 4;
  std::size_t pca_m = 32;
  double pca_tau = 0.25;
  std::size_t pca_ks = 4;
  std::size_t k_freq = 2;
  double probsparse_c = 5.0;
  bool no_imm = false, no_smm = false, no_tmm_tb = false, no_tmm_pca = false,
       no_adjacency = false;
  std::uint64_t seed = 1;

  void validate() const;  // throws std::invalid_argument
};

struct FeedForwardParams {
  Tensor w1, b1;  // D x 4D, 4D
  Tensor w2, b2;  // 4D x D, D
};

struct CrossAttnParams {
  Tensor wq, wk, wv, wo;  // D x D, shared across nodes
};

struct EncoderLayerParams {
  std::vector<MhaParams> imm;
  std::vector<GatParams> smm;
  std::vector<TmmLayerParams> tmm;
  KernelBank bank1, bank2, bank3;
  FeedForwardParams ff;
};

struct DecoderLayerParams {
  CrossAttnParams cross;
  std::vector<MhaParams> imm;
  std::vector<GatParams> smm;
  std::vector<TmmLayerParams> tmm;
  KernelBank bank0, bank1, bank2, bank3;
  Tensor w_trend[4];  // D x D projectors for the four retained trends
  FeedForwardParams ff;
};

/// Running sum of projected per-layer trends (pure accumulation).
struct TrendState {
  Tensor accumulated;

  void accumulate(const Tensor& layer_trend) {
    accumulated =
        accumulated.defined() ? add(accumulated, layer_trend) : layer_trend;
  }
};

struct StmModel {
  ModelConfig cfg;
  ParamStore store;
  KernelBank input_bank;
  EmbeddingParams emb;
  std::vector<EncoderLayerParams> enc;
  std::vector<DecoderLayerParams> dec;
  Tensor w_out;  // D x C
};

StmModel make_model(const ModelConfig& cfg);

/// Closed-form learnable value count implied by a config; asserted
/// against the registry after construction.
std::size_t expected_param_count(const ModelConfig& cfg);

/// Query-sparse cross attention, applied per node with shared
/// projections. Selects u = min(T, ceil(c ln T)) queries by the
/// max-minus-mean sparsity score (computed on an evenly spaced key
/// subset of the same size); unselected queries emit the value mean.
/// Covers the dense case exactly when u = T.
Tensor probsparse_cross_attention(const Tensor& q_src, const Tensor& kv_src,
                                  const CrossAttnParams& p, double c);

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p);

Tensor encoder_layer(const Tensor& x, const DeploymentMap& m,
                     const NormalizedAdjacency& adj,
                     const EncoderLayerParams& p, const ModelConfig& cfg,
                     bool training, SeededRng* rng);

Tensor decoder_layer(const Tensor& x_de, const Tensor& x_en_final,
                     const DeploymentMap& m, const NormalizedAdjacency& adj,
                     const DecoderLayerParams& p, const ModelConfig& cfg,
                     TrendState& trend, bool training, SeededRng* rng);

/// Full forecasting pass: history window in, next-T prediction out.
/// Training mode draws gate/noise samples from rng; evaluation is
/// sampling-free and bitwise repeatable.
Tensor model_forward(StmModel& model, const Tensor& x_hist,
                     const DenseArray& adj_raw, const DeploymentMap& m,
                     bool training, SeededRng* rng);

// ---- checkpointing ----
/// Text manifest (config, seed, parameter names and shapes), a "---"
/// separator line, then float32 little-endian values in manifest order.
void save_checkpoint(const StmModel& model, const std::string& path);
StmModel load_checkpoint(const std::string& path);

}  // namespace stm
