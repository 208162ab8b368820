#include "stm/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace stm {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("config: " + msg);
  };
  if (T < 4) fail("T >= 4 required");
  if (N < 1 || C < 1 || D < 1) fail("N, C, D >= 1 required");
  if (heads < 1 || D % heads != 0) fail("D must be divisible by heads");
  if (L < 1) fail("L >= 1 required");
  if (Lp < 1) fail("decoder depth >= 1 required");
  if (K1 < 1 || K2 < 1 || K3 < 1) fail("K1, K2, K3 >= 1 required");
  if (pca_s == 0 || T % pca_s != 0) fail("pca patch s must divide T");
  if (pca_m < 1 || pca_ks < 1) fail("pca m and k_s >= 1 required");
  if (pca_tau <= 0.0) fail("pca tau must be positive");
  if (patch_len < 1 || patch_len > T) fail("patch length must be in [1, T]");
  if (k_freq < 1) fail("k_freq >= 1 required");
  if (probsparse_c <= 0.0) fail("probsparse factor must be positive");
  if (kernel_lengths.empty()) fail("kernel bank must be non-empty");
  for (auto k : kernel_lengths)
    if (k % 2 == 0) fail("kernel lengths must be odd");
}

namespace {

FeedForwardParams make_ff(ParamStore& store, const std::string& prefix,
                          std::size_t D, SeededRng& rng) {
  FeedForwardParams ff;
  ff.w1 = store.dense_init(prefix + ".w1", {D, 4 * D}, D, rng);
  ff.b1 = store.zeros(prefix + ".b1", {4 * D});
  ff.w2 = store.dense_init(prefix + ".w2", {4 * D, D}, 4 * D, rng);
  ff.b2 = store.zeros(prefix + ".b2", {D});
  return ff;
}

CrossAttnParams make_cross(ParamStore& store, const std::string& prefix,
                           std::size_t D, SeededRng& rng) {
  CrossAttnParams p;
  p.wq = store.dense_init(prefix + ".wq", {D, D}, D, rng);
  p.wk = store.dense_init(prefix + ".wk", {D, D}, D, rng);
  p.wv = store.dense_init(prefix + ".wv", {D, D}, D, rng);
  p.wo = store.dense_init(prefix + ".wo", {D, D}, D, rng);
  return p;
}

std::vector<MhaParams> make_imm(ParamStore& store, const std::string& prefix,
                                const ModelConfig& cfg, SeededRng& rng) {
  std::vector<MhaParams> out;
  for (std::size_t i = 0; i < cfg.K1; ++i)
    out.push_back(make_mha(store, prefix + ".imm" + std::to_string(i), cfg.D,
                           cfg.heads, rng));
  return out;
}

std::vector<GatParams> make_smm(ParamStore& store, const std::string& prefix,
                                const ModelConfig& cfg, SeededRng& rng) {
  std::vector<GatParams> out;
  for (std::size_t i = 0; i < cfg.K2; ++i)
    out.push_back(make_gat(store, prefix + ".smm" + std::to_string(i), cfg.D,
                           cfg.heads, 0.2, rng));
  return out;
}

std::vector<TmmLayerParams> make_tmm(ParamStore& store,
                                     const std::string& prefix,
                                     const ModelConfig& cfg, SeededRng& rng) {
  std::vector<TmmLayerParams> out;
  for (std::size_t i = 0; i < cfg.K3; ++i)
    out.push_back(make_tmm_layer(store, prefix + ".tmm" + std::to_string(i),
                                 cfg.D, cfg.pca_m, cfg.pca_tau, cfg.pca_s,
                                 cfg.pca_ks, cfg.k_freq, rng));
  return out;
}

template <typename F>
auto staged(const std::string& label, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw std::runtime_error("model_forward[" + label + "]: " + e.what());
  }
}

}  // namespace

std::size_t expected_param_count(const ModelConfig& cfg) {
  const std::size_t D = cfg.D, nk = cfg.kernel_lengths.size();
  const std::size_t mha = 4 * D * D;
  const std::size_t gat = 2 * D * D + 2 * D;
  const std::size_t tmm = 9 * D * D + 4 * D * D + 2;
  const std::size_t ff = 8 * D * D + 5 * D;
  const std::size_t enc =
      cfg.K1 * mha + cfg.K2 * gat + cfg.K3 * tmm + 3 * nk + ff;
  const std::size_t dec = 4 * D * D + cfg.K1 * mha + cfg.K2 * gat +
                          cfg.K3 * tmm + 4 * nk + 4 * D * D + ff;
  return nk + cfg.C * D + cfg.patch_len * D * D + cfg.L * enc + cfg.Lp * dec +
         D * cfg.C;
}

StmModel make_model(const ModelConfig& cfg) {
  cfg.validate();
  StmModel model;
  model.cfg = cfg;
  SeededRng rng(cfg.seed);
  model.input_bank =
      make_kernel_bank(model.store, "input_bank", cfg.kernel_lengths);
  model.emb = make_embedding(model.store, "embed", cfg.C, cfg.D, cfg.patch_len,
                             cfg.T, rng);
  for (std::size_t l = 0; l < cfg.L; ++l) {
    std::string pre = "enc" + std::to_string(l);
    EncoderLayerParams p;
    p.imm = make_imm(model.store, pre, cfg, rng);
    p.bank1 = make_kernel_bank(model.store, pre + ".bank1", cfg.kernel_lengths);
    p.smm = make_smm(model.store, pre, cfg, rng);
    p.bank2 = make_kernel_bank(model.store, pre + ".bank2", cfg.kernel_lengths);
    p.tmm = make_tmm(model.store, pre, cfg, rng);
    p.bank3 = make_kernel_bank(model.store, pre + ".bank3", cfg.kernel_lengths);
    p.ff = make_ff(model.store, pre + ".ff", cfg.D, rng);
    model.enc.push_back(std::move(p));
  }
  for (std::size_t l = 0; l < cfg.Lp; ++l) {
    std::string pre = "dec" + std::to_string(l);
    DecoderLayerParams p;
    p.cross = make_cross(model.store, pre + ".cross", cfg.D, rng);
    p.bank0 = make_kernel_bank(model.store, pre + ".bank0", cfg.kernel_lengths);
    p.imm = make_imm(model.store, pre, cfg, rng);
    p.bank1 = make_kernel_bank(model.store, pre + ".bank1", cfg.kernel_lengths);
    p.smm = make_smm(model.store, pre, cfg, rng);
    p.bank2 = make_kernel_bank(model.store, pre + ".bank2", cfg.kernel_lengths);
    p.tmm = make_tmm(model.store, pre, cfg, rng);
    p.bank3 = make_kernel_bank(model.store, pre + ".bank3", cfg.kernel_lengths);
    for (std::size_t i = 0; i < 4; ++i)
      p.w_trend[i] = model.store.dense_init(
          pre + ".w_trend" + std::to_string(i + 1), {cfg.D, cfg.D}, cfg.D, rng);
    p.ff = make_ff(model.store, pre + ".ff", cfg.D, rng);
    model.dec.push_back(std::move(p));
  }
  model.w_out = model.store.dense_init("w_out", {cfg.D, cfg.C}, cfg.D, rng);
  if (model.store.count_values() != expected_param_count(cfg)) {
    throw std::logic_error("model: parameter registry does not match the "
                           "closed-form count");
  }
  return model;
}

Tensor probsparse_cross_attention(const Tensor& q_src, const Tensor& kv_src,
                                  const CrossAttnParams& p, double c) {
  const Shape& s = q_src.shape();
  if (kv_src.shape() != s) {
    throw std::invalid_argument("cross attention: stream shapes differ");
  }
  const std::size_t T = s[0], N = s[1], D = s[2];
  const double inv = 1.0 / std::sqrt(static_cast<double>(D));
  const std::size_t u = std::min<std::size_t>(
      T, std::max<std::size_t>(
             1, static_cast<std::size_t>(
                    std::ceil(c * std::log(static_cast<double>(T))))));

  Tensor q_all = reshape(matmul(reshape(q_src, {T * N, D}), p.wq), {T, N, D});
  Tensor k_all = reshape(matmul(reshape(kv_src, {T * N, D}), p.wk), {T, N, D});
  Tensor v_all = reshape(matmul(reshape(kv_src, {T * N, D}), p.wv), {T, N, D});

  std::vector<Tensor> per_node;
  for (std::size_t n = 0; n < N; ++n) {
    Tensor q = reshape(slice(q_all, 1, n, 1), {T, D});
    Tensor k = reshape(slice(k_all, 1, n, 1), {T, D});
    Tensor v = reshape(slice(v_all, 1, n, 1), {T, D});
    if (u == T) {
      Tensor attn = softmax_lastaxis(scale(matmul(q, transpose_last2(k)), inv));
      per_node.push_back(reshape(matmul(attn, v), {T, 1, D}));
      continue;
    }
    // sparsity scores on an evenly spaced key subset (forward-only)
    std::vector<std::size_t> ksub(u);
    for (std::size_t j = 0; j < u; ++j) ksub[j] = j * T / u;
    std::vector<std::size_t> sel;
    {
      NoGradGuard ng;
      Tensor scores =
          scale(matmul(q, transpose_last2(index_select(k, 0, ksub))), inv);
      std::vector<std::pair<double, std::size_t>> m(T);
      for (std::size_t t = 0; t < T; ++t) {
        double mx = -1e300, mean = 0;
        for (std::size_t j = 0; j < u; ++j) {
          double x = scores.value().data[t * u + j];
          mx = std::max(mx, x);
          mean += x;
        }
        m[t] = {mx - mean / static_cast<double>(u), t};
      }
      std::stable_sort(m.begin(), m.end(),
                       [](auto& a, auto& b) { return a.first > b.first; });
      for (std::size_t i = 0; i < u; ++i) sel.push_back(m[i].second);
      std::sort(sel.begin(), sel.end());
    }
    Tensor qs = index_select(q, 0, sel);
    Tensor attn = softmax_lastaxis(scale(matmul(qs, transpose_last2(k)), inv));
    Tensor out_sel = matmul(attn, v);          // u x D
    Tensor v_mean = mean_axis(v, 0, true);     // 1 x D
    DenseArray scatter({T, u});
    DenseArray unsel({T, 1});
    for (auto& x : unsel.data) x = 1.0;
    for (std::size_t i = 0; i < u; ++i) {
      scatter.data[sel[i] * u + i] = 1.0;
      unsel.data[sel[i]] = 0.0;
    }
    Tensor out = add(matmul(Tensor::constant(std::move(scatter)), out_sel),
                     mul(Tensor::constant(std::move(unsel)), v_mean));
    per_node.push_back(reshape(out, {T, 1, D}));
  }
  Tensor merged = concat(per_node, 1);
  return reshape(matmul(reshape(merged, {T * N, D}), p.wo), s);
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  const Shape& s = x.shape();
  const std::size_t D = s.back();
  const std::size_t rows = x.size() / D;
  Tensor flat = reshape(x, {rows, D});
  Tensor h = gelu(add(matmul(flat, p.w1), p.b1));
  return reshape(add(matmul(h, p.w2), p.b2), s);
}

namespace {

// residual module application followed by decomposition; the ablated
// path decomposes the plain input so the output never touches the
// module's parameters
std::pair<Tensor, Tensor> stage(const Tensor& x, bool ablated,
                                const std::function<Tensor()>& module,
                                const KernelBank& bank) {
  Tensor base = ablated ? x : add(module(), x);
  return multi_decomp(base, bank);
}

}  // namespace

Tensor encoder_layer(const Tensor& x, const DeploymentMap& m,
                     const NormalizedAdjacency& adj,
                     const EncoderLayerParams& p, const ModelConfig& cfg,
                     bool training, SeededRng* rng) {
  const bool no_tmm = cfg.no_tmm_tb && cfg.no_tmm_pca;
  Tensor s1 = staged("encoder imm", [&] {
                return stage(x, cfg.no_imm,
                             [&] { return imm_forward(x, m, p.imm); }, p.bank1);
              }).first;
  Tensor s2 = staged("encoder smm", [&] {
                return stage(s1, cfg.no_smm,
                             [&] { return smm_forward(s1, adj, p.smm); },
                             p.bank2);
              }).first;
  Tensor s3 = staged("encoder tmm", [&] {
                return stage(s2, no_tmm,
                             [&] {
                               return tmm_forward(s2, adj, p.tmm, training,
                                                  rng, cfg.no_tmm_tb,
                                                  cfg.no_tmm_pca);
                             },
                             p.bank3);
              }).first;
  return staged("encoder ff", [&] { return add(feed_forward(s3, p.ff), s3); });
}

Tensor decoder_layer(const Tensor& x_de, const Tensor& x_en_final,
                     const DeploymentMap& m, const NormalizedAdjacency& adj,
                     const DecoderLayerParams& p, const ModelConfig& cfg,
                     TrendState& trend, bool training, SeededRng* rng) {
  const bool no_tmm = cfg.no_tmm_tb && cfg.no_tmm_pca;
  auto [s1, t1] = staged("decoder cross", [&] {
    Tensor cr = probsparse_cross_attention(x_de, x_en_final, p.cross,
                                           cfg.probsparse_c);
    return multi_decomp(add(cr, x_de), p.bank0);
  });
  auto [s2, t2] = staged("decoder imm", [&] {
    return stage(s1, cfg.no_imm, [&] { return imm_forward(s1, m, p.imm); },
                 p.bank1);
  });
  auto [s3, t3] = staged("decoder smm", [&] {
    return stage(s2, cfg.no_smm, [&] { return smm_forward(s2, adj, p.smm); },
                 p.bank2);
  });
  auto [s4, t4] = staged("decoder tmm", [&] {
    return stage(s3, no_tmm,
                 [&] {
                   return tmm_forward(s3, adj, p.tmm, training, rng,
                                      cfg.no_tmm_tb, cfg.no_tmm_pca);
                 },
                 p.bank3);
  });
  Tensor s5 = staged("decoder ff", [&] { return add(feed_forward(s4, p.ff), s4); });

  const std::size_t T = x_de.shape()[0], N = x_de.shape()[1], D = cfg.D;
  const Tensor* ts[4] = {&t1, &t2, &t3, &t4};
  Tensor layer_trend;
  for (std::size_t i = 0; i < 4; ++i) {
    Tensor proj = reshape(
        matmul(reshape(*ts[i], {T * N, D}), p.w_trend[i]), {T, N, D});
    layer_trend = layer_trend.defined() ? add(layer_trend, proj) : proj;
  }
  trend.accumulate(layer_trend);
  return add(s5, layer_trend);
}

Tensor model_forward(StmModel& model, const Tensor& x_hist,
                     const DenseArray& adj_raw, const DeploymentMap& m,
                     bool training, SeededRng* rng) {
  const ModelConfig& cfg = model.cfg;
  const Shape want = {cfg.T, cfg.N, cfg.C};
  if (x_hist.shape() != want) {
    throw std::invalid_argument("model_forward: history is " +
                                shape_str(x_hist.shape()) + ", config wants " +
                                shape_str(want));
  }
  if (m.total() != cfg.N) {
    throw std::invalid_argument("model_forward: deployment map covers " +
                                std::to_string(m.total()) + " pods, not " +
                                std::to_string(cfg.N));
  }
  NormalizedAdjacency adj = staged("adjacency", [&] {
    return cfg.no_adjacency ? identity_adjacency(cfg.T, cfg.N)
                            : normalize_adjacency(adj_raw);
  });
  auto [xs, xt] = staged("input decomposition",
                         [&] { return multi_decomp(x_hist, model.input_bank); });
  Tensor x_en = staged("embedding", [&] {
    return stride1_patch(value_embed(xs, model.emb), model.emb);
  });
  Tensor x_it = staged("trend embedding", [&] {
    return stride1_patch(value_embed(xt, model.emb), model.emb);
  });

  Tensor cur = x_en;
  for (std::size_t l = 0; l < cfg.L; ++l) {
    cur = staged("encoder layer " + std::to_string(l), [&] {
      return encoder_layer(cur, m, adj, model.enc[l], cfg, training, rng);
    });
  }
  Tensor enc_out = cur;

  TrendState trend;
  Tensor de = add(x_en, x_it);  // decoder re-reads the seasonal stream
  for (std::size_t l = 0; l < cfg.Lp; ++l) {
    de = staged("decoder layer " + std::to_string(l), [&] {
      return decoder_layer(de, enc_out, m, adj, model.dec[l], cfg, trend,
                           training, rng);
    });
  }
  return staged("output projection", [&] {
    Tensor fin = add(de, x_it);
    return reshape(matmul(reshape(fin, {cfg.T * cfg.N, cfg.D}), model.w_out),
                   {cfg.T, cfg.N, cfg.C});
  });
}

// ---- checkpointing ----

namespace {

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoull(item));
  return out;
}

}  // namespace

void save_checkpoint(const StmModel& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  const ModelConfig& c = model.cfg;
  f << "stm-checkpoint v1\n";
  f << "T=" << c.T << "\nN=" << c.N << "\nC=" << c.C << "\nD=" << c.D
    << "\nheads=" << c.heads << "\nL=" << c.L << "\nLp=" << c.Lp
    << "\nK1=" << c.K1 << "\nK2=" << c.K2 << "\nK3=" << c.K3
    << "\nkernels=" << join_sizes(c.kernel_lengths)
    << "\npatch=" << c.patch_len << "\npca_s=" << c.pca_s
    << "\npca_m=" << c.pca_m << "\npca_tau=" << c.pca_tau
    << "\npca_ks=" << c.pca_ks << "\nk_freq=" << c.k_freq
    << "\nprobsparse_c=" << c.probsparse_c << "\nno_imm=" << c.no_imm
    << "\nno_smm=" << c.no_smm << "\nno_tmm_tb=" << c.no_tmm_tb
    << "\nno_tmm_pca=" << c.no_tmm_pca << "\nno_adjacency=" << c.no_adjacency
    << "\nseed=" << c.seed << "\n";
  for (const auto& [name, t] : model.store.items())
    f << "param " << name << " " << join_sizes(t.shape()) << "\n";
  f << "---\n";
  for (const auto& [name, t] : model.store.items()) {
    for (double v : t.value().data) {
      float x = static_cast<float>(v);
      f.write(reinterpret_cast<const char*>(&x), sizeof(float));
    }
  }
  if (!f) throw std::runtime_error("checkpoint: write failed on " + path);
}

StmModel load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line != "stm-checkpoint v1") {
    throw std::runtime_error("checkpoint: bad header in " + path);
  }
  ModelConfig c;
  std::vector<std::pair<std::string, Shape>> manifest;
  while (std::getline(f, line)) {
    if (line == "---") break;
    if (line.rfind("param ", 0) == 0) {
      std::stringstream ss(line.substr(6));
      std::string name, dims;
      ss >> name >> dims;
      manifest.emplace_back(name, parse_sizes(dims));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("checkpoint: malformed line '" + line + "'");
    }
    std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "T") c.T = std::stoull(v);
    else if (k == "N") c.N = std::stoull(v);
    else if (k == "C") c.C = std::stoull(v);
    else if (k == "D") c.D = std::stoull(v);
    else if (k == "heads") c.heads = std::stoull(v);
    else if (k == "L") c.L = std::stoull(v);
    else if (k == "Lp") c.Lp = std::stoull(v);
    else if (k == "K1") c.K1 = std::stoull(v);
    else if (k == "K2") c.K2 = std::stoull(v);
    else if (k == "K3") c.K3 = std::stoull(v);
    else if (k == "kernels") c.kernel_lengths = parse_sizes(v);
    else if (k == "patch") c.patch_len = std::stoull(v);
    else if (k == "pca_s") c.pca_s = std::stoull(v);
    else if (k == "pca_m") c.pca_m = std::stoull(v);
    else if (k == "pca_tau") c.pca_tau = std::stod(v);
    else if (k == "pca_ks") c.pca_ks = std::stoull(v);
    else if (k == "k_freq") c.k_freq = std::stoull(v);
    else if (k == "probsparse_c") c.probsparse_c = std::stod(v);
    else if (k == "no_imm") c.no_imm = v == "1";
    else if (k == "no_smm") c.no_smm = v == "1";
    else if (k == "no_tmm_tb") c.no_tmm_tb = v == "1";
    else if (k == "no_tmm_pca") c.no_tmm_pca = v == "1";
    else if (k == "no_adjacency") c.no_adjacency = v == "1";
    else if (k == "seed") c.seed = std::stoull(v);
    else throw std::runtime_error("checkpoint: unknown key '" + k + "'");
  }
  StmModel model = make_model(c);
  const auto& items = model.store.items();
  if (items.size() != manifest.size()) {
    throw std::runtime_error("checkpoint: manifest lists " +
                             std::to_string(manifest.size()) +
                             " parameters, model has " +
                             std::to_string(items.size()));
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].first != manifest[i].first ||
        items[i].second.shape() != manifest[i].second) {
      throw std::runtime_error("checkpoint: parameter mismatch at '" +
                               manifest[i].first + "'");
    }
    Tensor t = items[i].second;
    for (auto& v : t.mutable_value().data) {
      float x;
      if (!f.read(reinterpret_cast<char*>(&x), sizeof(float))) {
        throw std::runtime_error("checkpoint: payload truncated in " + path);
      }
      v = static_cast<double>(x);
    }
  }
  return model;
}

}  // namespace stm
