#include "stm/graph_message.hpp"

#include <cmath>
#include <stdexcept>

namespace stm {

namespace {
constexpr double kEdgeEps = 1e-9;
constexpr double kMasked = -1e30;
}  // namespace

NormalizedAdjacency normalize_adjacency(const DenseArray& raw) {
  if (raw.ndim() != 3 || raw.shape[1] != raw.shape[2]) {
    throw std::invalid_argument("normalize_adjacency: expected T x N x N, got " +
                                shape_str(raw.shape));
  }
  const std::size_t T = raw.shape[0], N = raw.shape[1];
  for (double v : raw.data) {
    if (!std::isfinite(v)) {
      throw std::domain_error("normalize_adjacency: non-finite entry");
    }
    if (v < 0.0) {
      throw std::domain_error("normalize_adjacency: negative entry");
    }
  }
  NormalizedAdjacency out;
  out.values = DenseArray({T, N, N});
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t u = 0; u < N; ++u) {
      double sum = 1.0;  // self-loop
      const double* row = raw.data.data() + (t * N + u) * N;
      for (std::size_t v = 0; v < N; ++v) sum += row[v];
      double* orow = out.values.data.data() + (t * N + u) * N;
      for (std::size_t v = 0; v < N; ++v)
        orow[v] = (row[v] + (u == v ? 1.0 : 0.0)) / sum;
    }
  }
  return out;
}

NormalizedAdjacency identity_adjacency(std::size_t T, std::size_t N) {
  NormalizedAdjacency out;
  out.values = DenseArray({T, N, N});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u < N; ++u)
      out.values.data[(t * N + u) * N + u] = 1.0;
  return out;
}

MhaParams make_mha(ParamStore& store, const std::string& prefix, std::size_t D,
                   std::size_t heads, SeededRng& rng) {
  if (D % heads != 0) {
    throw std::invalid_argument("attention: D must be divisible by heads");
  }
  MhaParams p;
  p.wq = store.dense_init(prefix + ".wq", {D, D}, D, rng);
  p.wk = store.dense_init(prefix + ".wk", {D, D}, D, rng);
  p.wv = store.dense_init(prefix + ".wv", {D, D}, D, rng);
  p.wo = store.dense_init(prefix + ".wo", {D, D}, D, rng);
  p.heads = heads;
  return p;
}

Tensor multihead_self_attention(const Tensor& x, const MhaParams& p) {
  const Shape& s = x.shape();
  const std::size_t D = s.back();
  const std::size_t L = s[s.size() - 2];
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < s.size(); ++i) batch *= s[i];
  const std::size_t dh = D / p.heads;

  Tensor flat = reshape(x, {batch * L, D});
  Tensor q = reshape(matmul(flat, p.wq), {batch, L, D});
  Tensor k = reshape(matmul(flat, p.wk), {batch, L, D});
  Tensor v = reshape(matmul(flat, p.wv), {batch, L, D});
  std::vector<Tensor> head_outs;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < p.heads; ++h) {
    Tensor qh = slice(q, 2, h * dh, dh);
    Tensor kh = slice(k, 2, h * dh, dh);
    Tensor vh = slice(v, 2, h * dh, dh);
    Tensor logits = scale(matmul(qh, transpose_last2(kh)), inv);
    Tensor attn = softmax_lastaxis(logits);
    head_outs.push_back(matmul(attn, vh));
  }
  Tensor merged = concat(head_outs, 2);
  Tensor out = matmul(reshape(merged, {batch * L, D}), p.wo);
  return reshape(out, s);
}

GatParams make_gat(ParamStore& store, const std::string& prefix, std::size_t D,
                   std::size_t heads, double slope, SeededRng& rng) {
  if (D % heads != 0) {
    throw std::invalid_argument("gat: D must be divisible by heads");
  }
  GatParams p;
  const std::size_t dh = D / heads;
  p.w = store.dense_init(prefix + ".w", {D, D}, D, rng);
  p.attn_src = store.dense_init(prefix + ".attn_src", {heads, dh}, dh, rng);
  p.attn_dst = store.dense_init(prefix + ".attn_dst", {heads, dh}, dh, rng);
  p.wo = store.dense_init(prefix + ".wo", {D, D}, D, rng);
  p.leaky_slope = slope;
  p.heads = heads;
  return p;
}

std::vector<Tensor> split_by_host(const Tensor& x, const DeploymentMap& m) {
  if (m.total() != x.shape()[1]) {
    throw std::invalid_argument("split_by_host: host counts sum to " +
                                std::to_string(m.total()) + " but N=" +
                                std::to_string(x.shape()[1]));
  }
  return split(x, m.host_counts, 1);
}

Tensor imm_forward(const Tensor& x, const DeploymentMap& m,
                   const std::vector<MhaParams>& layers) {
  if (layers.empty()) throw std::invalid_argument("imm_forward: K1 >= 1");
  Tensor cur = x;
  for (const auto& p : layers) {
    auto blocks = split_by_host(cur, m);
    std::vector<Tensor> outs;
    for (auto& b : blocks) {
      if (b.shape()[1] == 0) {
        outs.push_back(b);  // empty host passes through
        continue;
      }
      outs.push_back(multihead_self_attention(b, p));
    }
    cur = concat(outs, 1);
  }
  return cur;
}

namespace {

// Masked per-head logits shared by gat_layer and gat_coefficients.
// Returns attn coefficients (T x N x N) and W-projected features for
// one head.
struct GatHead {
  Tensor coeff;  // T x N x N
  Tensor wxh;    // T x N x dh
};

GatHead gat_head(const Tensor& x, const NormalizedAdjacency& adj,
                 const GatParams& p, std::size_t h, const Tensor& wx) {
  const std::size_t T = x.shape()[0], N = x.shape()[1];
  const std::size_t dh = x.shape()[2] / p.heads;
  Tensor wxh = slice(wx, 2, h * dh, dh);
  Tensor a_src = reshape(slice(p.attn_src, 0, h, 1), {dh, 1});
  Tensor a_dst = reshape(slice(p.attn_dst, 0, h, 1), {dh, 1});
  Tensor s_src = matmul(wxh, a_src);                  // T x N x 1
  Tensor s_dst = transpose_last2(matmul(wxh, a_dst));  // T x 1 x N
  Tensor e = leaky_relu(add(s_src, s_dst), p.leaky_slope);
  // additive log bias on edges, hard mask elsewhere
  DenseArray bias({T, N, N});
  for (std::size_t i = 0; i < bias.size(); ++i) {
    double a = adj.values.data[i];
    bias.data[i] = a > 0.0 ? std::log(a + kEdgeEps) : kMasked;
  }
  e = add(e, Tensor::constant(std::move(bias)));
  return {softmax_lastaxis(e), wxh};
}

}  // namespace

Tensor gat_layer(const Tensor& x, const NormalizedAdjacency& adj,
                 const GatParams& p) {
  const Shape& s = x.shape();
  const std::size_t T = s[0], N = s[1], D = s[2];
  if (adj.steps() != T || adj.nodes() != N) {
    throw std::invalid_argument("gat_layer: adjacency " +
                                shape_str(adj.values.shape) +
                                " does not match input " + shape_str(s));
  }
  Tensor wx = reshape(matmul(reshape(x, {T * N, D}), p.w), {T, N, D});
  std::vector<Tensor> outs;
  for (std::size_t h = 0; h < p.heads; ++h) {
    GatHead head = gat_head(x, adj, p, h, wx);
    outs.push_back(matmul(head.coeff, head.wxh));
  }
  Tensor merged = concat(outs, 2);
  return reshape(matmul(reshape(merged, {T * N, D}), p.wo), s);
}

DenseArray gat_coefficients(const Tensor& x, const NormalizedAdjacency& adj,
                            const GatParams& p) {
  const std::size_t T = x.shape()[0], N = x.shape()[1], D = x.shape()[2];
  NoGradGuard ng;
  Tensor wx = reshape(matmul(reshape(x, {T * N, D}), p.w), {T, N, D});
  DenseArray out({T, p.heads, N, N});
  for (std::size_t h = 0; h < p.heads; ++h) {
    GatHead head = gat_head(x, adj, p, h, wx);
    for (std::size_t t = 0; t < T; ++t)
      std::copy_n(head.coeff.value().data.data() + t * N * N, N * N,
                  out.data.data() + (t * p.heads + h) * N * N);
  }
  return out;
}

Tensor smm_forward(const Tensor& x, const NormalizedAdjacency& adj,
                   const std::vector<GatParams>& layers) {
  if (layers.empty()) throw std::invalid_argument("smm_forward: K2 >= 1");
  Tensor cur = x;
  for (const auto& p : layers) cur = add(gat_layer(cur, adj, p), cur);
  return cur;
}

}  // namespace stm
