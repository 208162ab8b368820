#include "stm/decomp.hpp"

#include <cmath>
#include <stdexcept>

namespace stm {

KernelBank make_kernel_bank(ParamStore& store, const std::string& prefix,
                            const std::vector<std::size_t>& lengths) {
  for (auto k : lengths) {
    if (k % 2 == 0 || k < 1) {
      throw std::invalid_argument("kernel bank lengths must be odd and >= 1");
    }
  }
  KernelBank bank;
  bank.kernel_lengths = lengths;
  bank.mixing_logits = store.zeros(prefix + ".mixing_logits", {lengths.size()});
  return bank;
}

Tensor moving_average(const Tensor& x, std::size_t k) {
  if (k % 2 == 0) {
    throw std::invalid_argument("moving_average: kernel length must be odd, "
                                "got " + std::to_string(k));
  }
  if (k == 1) return x;
  const std::size_t T = x.shape()[0];
  const std::size_t hw = (k - 1) / 2;
  Tensor acc;
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<std::size_t> idx(T);
    for (std::size_t t = 0; t < T; ++t) {
      std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + j) -
                         static_cast<std::ptrdiff_t>(hw);
      if (s < 0) s = 0;
      if (s >= static_cast<std::ptrdiff_t>(T)) s = T - 1;
      idx[t] = static_cast<std::size_t>(s);
    }
    Tensor shifted = index_select(x, 0, idx);
    acc = acc.defined() ? add(acc, shifted) : shifted;
  }
  return scale(acc, 1.0 / static_cast<double>(k));
}

std::pair<Tensor, Tensor> multi_decomp(const Tensor& x,
                                       const KernelBank& bank) {
  Tensor w = softmax_lastaxis(bank.mixing_logits);
  Tensor trend;
  for (std::size_t i = 0; i < bank.kernel_lengths.size(); ++i) {
    Tensor term = mul(moving_average(x, bank.kernel_lengths[i]),
                      slice(w, 0, i, 1));
    trend = trend.defined() ? add(trend, term) : term;
  }
  return {sub(x, trend), trend};
}

DenseArray sinusoidal_positions(std::size_t T, std::size_t D) {
  DenseArray pe({T, D});
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < D; ++i) {
      double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) /
                                          static_cast<double>(D));
      double a = static_cast<double>(t) * rate;
      pe.data[t * D + i] = (i % 2 == 0) ? std::sin(a) : std::cos(a);
    }
  }
  return pe;
}

EmbeddingParams make_embedding(ParamStore& store, const std::string& prefix,
                               std::size_t C, std::size_t D, std::size_t p,
                               std::size_t T, SeededRng& rng) {
  EmbeddingParams e;
  e.value_proj = store.dense_init(prefix + ".value_proj", {C, D}, C, rng);
  e.patch_proj =
      store.dense_init(prefix + ".patch_proj", {p * D, D}, p * D, rng);
  e.pos_enc = Tensor::constant(sinusoidal_positions(T, D));
  e.patch_len = p;
  return e;
}

Tensor value_embed(const Tensor& x, const EmbeddingParams& params) {
  const Shape& s = x.shape();
  const std::size_t T = s[0], N = s[1], C = s[2];
  const std::size_t D = params.value_proj.shape()[1];
  if (params.value_proj.shape()[0] != C) {
    throw std::invalid_argument("value_embed: feature extent " +
                                std::to_string(C) + " does not match "
                                "projection rows " +
                                std::to_string(params.value_proj.shape()[0]));
  }
  Tensor flat = reshape(x, {T * N, C});
  Tensor proj = reshape(matmul(flat, params.value_proj), {T, N, D});
  Tensor pos = reshape(slice(params.pos_enc, 0, 0, T), {T, 1, D});
  return add(proj, pos);
}

Tensor stride1_patch(const Tensor& x, const EmbeddingParams& params) {
  const Shape& s = x.shape();
  const std::size_t T = s[0], N = s[1], D = s[2];
  const std::size_t p = params.patch_len;
  if (p < 1 || p > T) {
    throw std::invalid_argument("stride1_patch: patch length " +
                                std::to_string(p) + " invalid for T=" +
                                std::to_string(T));
  }
  // frames ordered oldest..newest, replicate-padded at the start
  std::vector<Tensor> frames;
  for (std::size_t j = 0; j < p; ++j) {
    std::vector<std::size_t> idx(T);
    for (std::size_t t = 0; t < T; ++t) {
      std::ptrdiff_t s0 = static_cast<std::ptrdiff_t>(t) -
                          static_cast<std::ptrdiff_t>(p - 1 - j);
      idx[t] = s0 < 0 ? 0 : static_cast<std::size_t>(s0);
    }
    frames.push_back(index_select(x, 0, idx));
  }
  Tensor stacked = concat(frames, 2);  // T x N x (p*D)
  Tensor flat = reshape(stacked, {T * N, p * D});
  return reshape(matmul(flat, params.patch_proj), {T, N, D});
}

}  // namespace stm
