#include "stm/temporal.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "stm/fft.hpp"

namespace stm {

PeriodSet find_periods(const std::vector<double>& mean_magnitude,
                       std::size_t T, std::size_t k_freq) {
  if (k_freq < 1) throw std::invalid_argument("find_periods: k_freq >= 1");
  const std::size_t F = mean_magnitude.size();
  if (F < 2) throw std::invalid_argument("find_periods: no nonzero bins");
  std::vector<std::size_t> freqs;
  for (std::size_t f = 1; f < F; ++f) freqs.push_back(f);
  std::stable_sort(freqs.begin(), freqs.end(),
                   [&](std::size_t a, std::size_t b) {
                     return mean_magnitude[a] > mean_magnitude[b];
                   });
  const std::size_t k = std::min(k_freq, freqs.size());
  PeriodSet out;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t f = freqs[i];
    out.freqs.push_back(f);
    out.periods.push_back((T + f - 1) / f);  // ceil(T/f)
  }
  // softmax over the selected amplitudes
  double mx = mean_magnitude[out.freqs[0]];
  for (auto f : out.freqs) mx = std::max(mx, mean_magnitude[f]);
  double z = 0.0;
  for (auto f : out.freqs) z += std::exp(mean_magnitude[f] - mx);
  for (auto f : out.freqs)
    out.weights.push_back(std::exp(mean_magnitude[f] - mx) / z);
  return out;
}

PRFMap make_prf_map(std::size_t m, std::size_t d, double tau, SeededRng& rng) {
  PRFMap map;
  map.w = sample(Dist::kStandardNormal, {m, d}, rng);
  map.tau = tau;
  map.m = m;
  map.d = d;
  return map;
}

Tensor prf_map(const Tensor& x, const PRFMap& map) {
  Shape s = x.shape();
  if (s.back() != map.d) {
    throw std::invalid_argument("prf_map: last extent " +
                                std::to_string(s.back()) + " != map d " +
                                std::to_string(map.d));
  }
  std::size_t rows = x.size() / map.d;
  Tensor flat = reshape(x, {rows, map.d});
  Tensor wt = Tensor::constant(
      DenseArray({map.d, map.m}, [&] {
        std::vector<double> t(map.d * map.m);
        for (std::size_t i = 0; i < map.m; ++i)
          for (std::size_t j = 0; j < map.d; ++j)
            t[j * map.m + i] = map.w.data[i * map.d + j];
        return t;
      }()));
  Tensor half_sq = scale(sum_axis(square(flat), 1, true), 0.5);  // rows x 1
  Tensor expo = sub(matmul(flat, wt), half_sq);
  Tensor phi = scale(exp(expo), 1.0 / std::sqrt(static_cast<double>(map.m)));
  Shape os = s;
  os.back() = map.m;
  return reshape(phi, os);
}

namespace {

// Shared factored attention: optional tau scaling and per-key additive
// log factors (Gumbel noise). Log-scale stabilized; the subtracted
// maxima cancel exactly in the final ratio.
Tensor prf_attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                          const PRFMap& map, double tau,
                          const DenseArray* g /* L x 1 or null */) {
  const std::size_t L = q.shape()[0];
  const std::size_t d = q.shape()[1];
  if (k.shape() != q.shape() || v.shape()[0] != L) {
    throw std::invalid_argument("kernelized_attention: shape mismatch");
  }
  if (d != map.d) {
    throw std::invalid_argument("kernelized_attention: map dimension "
                                "mismatch");
  }
  const double inv_sqrt_tau = 1.0 / std::sqrt(tau);
  Tensor qs = scale(q, inv_sqrt_tau);
  Tensor ks = scale(k, inv_sqrt_tau);
  DenseArray wt({d, map.m});
  for (std::size_t i = 0; i < map.m; ++i)
    for (std::size_t j = 0; j < d; ++j)
      wt.data[j * map.m + i] = map.w.data[i * d + j];
  Tensor wtt = Tensor::constant(std::move(wt));

  Tensor eq = sub(matmul(qs, wtt), scale(sum_axis(square(qs), 1, true), 0.5));
  Tensor ek = sub(matmul(ks, wtt), scale(sum_axis(square(ks), 1, true), 0.5));
  if (g != nullptr) {
    DenseArray gt = *g;
    for (auto& x : gt.data) x /= tau;
    ek = add(ek, Tensor::constant(std::move(gt)));
  }
  // per-row scale on phi(q), global scale on phi(k); both cancel in z
  Tensor phiq = exp(sub(eq, max_lastaxis_detached(eq)));
  Tensor phik = exp(add_const(ek, -max_all_value(ek)));

  Tensor kv = matmul(transpose_last2(phik), v);                    // m x dv
  Tensor num = matmul(phiq, kv);                                   // L x dv
  Tensor den = matmul(phiq, reshape(sum_axis(phik, 0), {map.m, 1}));
  for (double dv : den.value().data) {
    if (!(dv > 1e-30)) {
      throw std::domain_error("kernelized_attention: degenerate kernel "
                              "(normalizer below 1e-30)");
    }
  }
  return div(num, den);
}

}  // namespace

Tensor kernelized_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const PRFMap& map) {
  return prf_attention_core(q, k, v, map, 1.0, nullptr);
}

Tensor gumbel_kernelized_attention(const Tensor& q, const Tensor& k,
                                   const Tensor& v, const PRFMap& map,
                                   std::size_t k_s, SeededRng* rng) {
  if (k_s < 1) throw std::invalid_argument("gumbel attention: k_s >= 1");
  const std::size_t L = q.shape()[0];
  if (rng == nullptr) {
    DenseArray g({L, 1});
    return prf_attention_core(q, k, v, map, map.tau, &g);
  }
  Tensor acc;
  for (std::size_t i = 0; i < k_s; ++i) {
    DenseArray g = sample(Dist::kGumbel, {L, 1}, *rng);
    Tensor z = prf_attention_core(q, k, v, map, map.tau, &g);
    acc = acc.defined() ? add(acc, z) : z;
  }
  return scale(acc, 1.0 / static_cast<double>(k_s));
}

DenseArray node_degree_weights(const NormalizedAdjacency& adj) {
  const std::size_t T = adj.steps(), N = adj.nodes();
  DenseArray out({T, N});
  for (std::size_t t = 0; t < T; ++t) {
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      double deg = 0.0;
      for (std::size_t v = 0; v < N; ++v) {
        deg += adj.values.data[(t * N + n) * N + v];  // out
        deg += adj.values.data[(t * N + v) * N + n];  // in
      }
      out.data[t * N + n] = deg;
      total += deg;
    }
    for (std::size_t n = 0; n < N; ++n) out.data[t * N + n] /= total;
  }
  return out;
}

Tensor patch_time(const Tensor& x, std::size_t s) {
  const Shape& sh = x.shape();
  const std::size_t T = sh[0];
  if (s == 0 || T % s != 0) {
    throw std::invalid_argument("patch_time: s=" + std::to_string(s) +
                                " does not divide T=" + std::to_string(T));
  }
  const std::size_t P = T / s;
  Shape mid = {P, s};
  for (std::size_t i = 1; i < sh.size(); ++i) mid.push_back(sh[i]);
  Shape os = {P};
  for (std::size_t i = 1; i < sh.size(); ++i) os.push_back(sh[i]);
  return reshape(mean_axis(reshape(x, mid), 1), os);
}

DenseArray build_global_st_adjacency(const NormalizedAdjacency& adj,
                                     std::size_t s) {
  const std::size_t T = adj.steps(), N = adj.nodes();
  if (s == 0 || T % s != 0) {
    throw std::invalid_argument("build_global_st_adjacency: s must divide T");
  }
  const std::size_t P = T / s;
  DenseArray out({P * N, P * N});
  for (std::size_t b = 0; b < P; ++b) {
    // diagonal block: mean adjacency over the patch
    for (std::size_t u = 0; u < N; ++u)
      for (std::size_t v = 0; v < N; ++v) {
        double m = 0.0;
        for (std::size_t t = b * s; t < (b + 1) * s; ++t)
          m += adj.values.data[(t * N + u) * N + v];
        out.data[(b * N + u) * P * N + b * N + v] = m / static_cast<double>(s);
      }
    // identity links to temporal neighbors
    for (std::size_t n = 0; n < N; ++n) {
      if (b + 1 < P) {
        out.data[(b * N + n) * P * N + (b + 1) * N + n] = 1.0;
        out.data[((b + 1) * N + n) * P * N + b * N + n] = 1.0;
      }
    }
  }
  return out;
}

TimesBlockParams make_timesblock(ParamStore& store, const std::string& prefix,
                                 std::size_t D, SeededRng& rng) {
  TimesBlockParams p;
  p.kernel = store.dense_init(prefix + ".kernel", {3, 3, D, D}, 9 * D, rng);
  return p;
}

Tensor timesblock_forward(const Tensor& x, const NormalizedAdjacency& adj,
                          const TimesBlockParams& p, std::size_t k_freq) {
  const Shape& sh = x.shape();
  const std::size_t T = sh[0], N = sh[1], D = sh[2];
  if (T < 4) throw std::invalid_argument("timesblock_forward: T >= 4");

  DenseArray wd = node_degree_weights(adj);  // T x N
  Tensor wt = Tensor::constant(DenseArray({T, N, 1}, wd.data));
  Tensor g = sum_axis(mul(x, wt), 1);  // T x D

  // period selection from the mean spectrum (forward-only)
  const std::size_t F = T / 2 + 1;
  std::vector<double> mean_mag(F, 0.0);
  {
    std::vector<double> col(T);
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t t = 0; t < T; ++t) col[t] = g.value().data[t * D + d];
      auto mag = rfft_magnitude(col);
      for (std::size_t f = 0; f < F; ++f) mean_mag[f] += mag[f];
    }
    for (auto& v : mean_mag) v /= static_cast<double>(D);
  }
  PeriodSet ps = find_periods(mean_mag, T, k_freq);
  const std::size_t k = ps.freqs.size();

  // differentiable amplitudes of the selected bins (selection stays
  // fixed; the mixture weights carry gradient)
  DenseArray cos_mat, sin_mat;
  dft_basis(T, cos_mat, sin_mat);
  std::vector<Tensor> amps;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t f = ps.freqs[i];
    DenseArray cvec({1, T}), svec({1, T});
    for (std::size_t t = 0; t < T; ++t) {
      cvec.data[t] = cos_mat.data[t * F + f];
      svec.data[t] = sin_mat.data[t * F + f];
    }
    Tensor re = matmul(Tensor::constant(std::move(cvec)), g);  // 1 x D
    Tensor im = matmul(Tensor::constant(std::move(svec)), g);
    Tensor a = mean_all(sqrt(add_const(add(square(re), square(im)), 1e-12)));
    amps.push_back(reshape(a, {1}));
  }
  Tensor weights = softmax_lastaxis(concat(amps, 0));  // k

  Tensor agg;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t period = ps.periods[i];
    const std::size_t rows = (T + period - 1) / period;
    Tensor padded = g;
    if (rows * period > T) {
      padded = concat({g, Tensor::zeros({rows * period - T, D})}, 0);
    }
    Tensor grid = reshape(padded, {rows, period, D});
    Tensor conv = conv2d(grid, p.kernel);
    Tensor back = slice(reshape(conv, {rows * period, D}), 0, 0, T);
    Tensor term = mul(back, slice(weights, 0, i, 1));
    agg = agg.defined() ? add(agg, term) : term;
  }

  // redistribute to nodes and add residual
  DenseArray wn({T, N, 1});
  for (std::size_t i = 0; i < wn.size(); ++i)
    wn.data[i] = static_cast<double>(N) * wd.data[i];
  Tensor spread = mul(reshape(agg, {T, 1, D}), Tensor::constant(std::move(wn)));
  return add(spread, x);
}

PcaParams make_pca(ParamStore& store, const std::string& prefix, std::size_t D,
                   std::size_t m, double tau, std::size_t s, std::size_t k_s,
                   SeededRng& rng) {
  PcaParams p;
  p.wq = store.dense_init(prefix + ".wq", {D, D}, D, rng);
  p.wk = store.dense_init(prefix + ".wk", {D, D}, D, rng);
  p.wv = store.dense_init(prefix + ".wv", {D, D}, D, rng);
  p.wo = store.dense_init(prefix + ".wo", {D, D}, D, rng);
  p.ln_gain = store.add(prefix + ".ln_gain", DenseArray::full({1}, 1.0));
  p.ln_bias = store.zeros(prefix + ".ln_bias", {1});
  p.map = make_prf_map(m, D, tau, rng);
  p.patch_len = s;
  p.samples = k_s;
  return p;
}

Tensor pca_forward(const Tensor& x, const NormalizedAdjacency& adj,
                   const PcaParams& p, SeededRng* rng) {
  const Shape& sh = x.shape();
  const std::size_t T = sh[0], N = sh[1], D = sh[2];
  const std::size_t s = p.patch_len;
  Tensor patched = patch_time(x, s);  // P x N x D
  const std::size_t P = T / s;
  Tensor tokens = reshape(patched, {P * N, D});
  Tensor q = matmul(tokens, p.wq);
  Tensor k = matmul(tokens, p.wk);
  Tensor v = matmul(tokens, p.wv);
  Tensor z = gumbel_kernelized_attention(q, k, v, p.map, p.samples, rng);

  // refinement by the row-standardized global adjacency
  DenseArray ast = build_global_st_adjacency(adj, s);
  const std::size_t PN = P * N;
  DenseArray stdrows({PN, PN});
  for (std::size_t r = 0; r < PN; ++r) {
    const double* row = ast.data.data() + r * PN;
    double mean = 0.0;
    for (std::size_t c = 0; c < PN; ++c) mean += row[c];
    mean /= static_cast<double>(PN);
    double var = 0.0;
    for (std::size_t c = 0; c < PN; ++c) {
      double d = row[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(PN);
    double inv = 1.0 / std::sqrt(var + 1e-8);
    for (std::size_t c = 0; c < PN; ++c)
      stdrows.data[r * PN + c] = (row[c] - mean) * inv;
  }
  Tensor refine = add(mul(Tensor::constant(std::move(stdrows)), p.ln_gain),
                      p.ln_bias);
  z = matmul(refine, z);
  z = matmul(z, p.wo);

  // un-patch by repeating each patch s times, then residual
  std::vector<std::size_t> idx(T);
  for (std::size_t t = 0; t < T; ++t) idx[t] = t / s;
  Tensor out = index_select(reshape(z, {P, N, D}), 0, idx);
  return add(out, x);
}

TmmLayerParams make_tmm_layer(ParamStore& store, const std::string& prefix,
                              std::size_t D, std::size_t m, double tau,
                              std::size_t s, std::size_t k_s,
                              std::size_t k_freq, SeededRng& rng) {
  TmmLayerParams l;
  l.tb = make_timesblock(store, prefix + ".tb", D, rng);
  l.pca = make_pca(store, prefix + ".pca", D, m, tau, s, k_s, rng);
  l.k_freq = k_freq;
  return l;
}

Tensor tmm_forward(const Tensor& x, const NormalizedAdjacency& adj,
                   const std::vector<TmmLayerParams>& layers, bool training,
                   SeededRng* rng, bool skip_tb, bool skip_pca) {
  if (layers.empty()) throw std::invalid_argument("tmm_forward: K3 >= 1");
  if (skip_tb && skip_pca) {
    throw std::invalid_argument("tmm_forward: cannot skip both branches");
  }
  const std::size_t T = x.shape()[0], N = x.shape()[1];
  Tensor cur = x;
  for (const auto& l : layers) {
    if (skip_tb) {
      cur = pca_forward(cur, adj, l.pca, training ? rng : nullptr);
      continue;
    }
    if (skip_pca) {
      cur = timesblock_forward(cur, adj, l.tb, l.k_freq);
      continue;
    }
    DenseArray alpha = training && rng != nullptr
                           ? sample(Dist::kUniform01, {T, N, 1}, *rng)
                           : DenseArray::full({T, N, 1}, 0.5);
    DenseArray one_minus({T, N, 1});
    for (std::size_t i = 0; i < alpha.size(); ++i)
      one_minus.data[i] = 1.0 - alpha.data[i];
    Tensor tb = timesblock_forward(cur, adj, l.tb, l.k_freq);
    Tensor pca = pca_forward(cur, adj, l.pca, training ? rng : nullptr);
    cur = add(mul(tb, Tensor::constant(std::move(alpha))),
              mul(pca, Tensor::constant(std::move(one_minus))));
  }
  return cur;
}

}  // namespace stm
