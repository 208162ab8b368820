#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>

#include "doctest.h"
#include "stm/gradcheck.hpp"
#include "stm/model.hpp"

using namespace stm;

namespace {

DenseArray random_arr(const Shape& s, SeededRng& rng, double lo = -1.0,
                      double hi = 1.0) {
  DenseArray a(s);
  for (auto& v : a.data) v = rng.uniform(lo, hi);
  return a;
}

DenseArray random_raw_adjacency(std::size_t T, std::size_t N, SeededRng& rng) {
  DenseArray raw({T, N, N});
  for (auto& v : raw.data)
    v = rng.uniform01() < 0.5 ? rng.uniform(0.0, 2.0) : 0.0;
  return raw;
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.T = 8;
  cfg.N = 4;
  cfg.C = 4;
  cfg.D = 8;
  cfg.heads = 2;
  cfg.L = 1;
  cfg.Lp = 1;
  cfg.K1 = cfg.K2 = cfg.K3 = 1;
  cfg.patch_len = 3;
  cfg.pca_s = 4;
  cfg.pca_m = 8;
  cfg.pca_ks = 2;
  cfg.seed = 3;
  return cfg;
}

DeploymentMap two_hosts(std::size_t N) {
  return DeploymentMap{{N / 2, N - N / 2}};
}

DenseArray dense_cross_oracle(const DenseArray& q_src, const DenseArray& kv,
                              const CrossAttnParams& p) {
  // explicit per-node softmax(q k^T / sqrt(D)) v, then wo
  const std::size_t T = q_src.shape[0], N = q_src.shape[1], D = q_src.shape[2];
  NoGradGuard ng;
  auto proj = [&](const DenseArray& x, const Tensor& w) {
    return matmul(reshape(Tensor::constant(x), {T * N, D}), w);
  };
  Tensor q = reshape(proj(q_src, p.wq), {T, N, D});
  Tensor k = reshape(proj(kv, p.wk), {T, N, D});
  Tensor v = reshape(proj(kv, p.wv), {T, N, D});
  DenseArray out({T, N, D});
  const double inv = 1.0 / std::sqrt(static_cast<double>(D));
  for (std::size_t n = 0; n < N; ++n) {
    Tensor qn = reshape(slice(q, 1, n, 1), {T, D});
    Tensor kn = reshape(slice(k, 1, n, 1), {T, D});
    Tensor vn = reshape(slice(v, 1, n, 1), {T, D});
    Tensor attn = softmax_lastaxis(scale(matmul(qn, transpose_last2(kn)), inv));
    Tensor on = matmul(attn, vn);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < D; ++c)
        out.data[(t * N + n) * D + c] = on.value().data[t * D + c];
  }
  Tensor fin = matmul(reshape(Tensor::constant(out), {T * N, D}), p.wo);
  DenseArray r = fin.value();
  r.shape = {T, N, D};
  return r;
}

double max_abs_diff(const DenseArray& a, const DenseArray& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST_CASE("ModelConfig validation") {
  ModelConfig cfg = small_config();
  CHECK_NOTHROW(cfg.validate());
  SUBCASE("heads must divide D") {
    cfg.heads = 3;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
  SUBCASE("pca patch must divide T") {
    cfg.pca_s = 3;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
  SUBCASE("at least one encoder and decoder layer") {
    cfg.L = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.L = 1;
    cfg.Lp = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
  SUBCASE("even kernels rejected") {
    cfg.kernel_lengths = {3, 4};
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
}

TEST_CASE("parameter registry matches the closed-form count") {
  ModelConfig cfg = small_config();
  StmModel m1 = make_model(cfg);
  CHECK(m1.store.count_values() == expected_param_count(cfg));
  cfg.L = 2;
  cfg.Lp = 2;
  cfg.K1 = 2;
  cfg.K3 = 2;
  cfg.D = 16;
  cfg.C = 6;
  StmModel m2 = make_model(cfg);
  CHECK(m2.store.count_values() == expected_param_count(cfg));
  CHECK(m2.store.count_values() > m1.store.count_values());
}

TEST_CASE("probsparse_cross_attention") {
  SeededRng rng(71);
  const std::size_t T = 8, N = 3, D = 4;
  ParamStore store;
  CrossAttnParams p;
  p.wq = store.dense_init("wq", {D, D}, D, rng);
  p.wk = store.dense_init("wk", {D, D}, D, rng);
  p.wv = store.dense_init("wv", {D, D}, D, rng);
  p.wo = store.dense_init("wo", {D, D}, D, rng);

  SUBCASE("covers dense attention when the budget reaches T") {
    Tensor q = Tensor::constant(random_arr({T, N, D}, rng));
    Tensor kv = Tensor::constant(random_arr({T, N, D}, rng));
    Tensor out = probsparse_cross_attention(q, kv, p, 5.0);  // u = T
    DenseArray ref = dense_cross_oracle(q.value(), kv.value(), p);
    CHECK(max_abs_diff(out.value(), ref) < 1e-9);
  }
  SUBCASE("identical queries collapse every row to one output") {
    DenseArray qa({T, N, D});
    SeededRng r2(5);
    DenseArray one = random_arr({N, D}, r2);
    for (std::size_t t = 0; t < T; ++t)
      std::copy(one.data.begin(), one.data.end(),
                qa.data.begin() + t * N * D);
    Tensor kv = Tensor::constant(random_arr({T, N, D}, r2));
    Tensor out = probsparse_cross_attention(Tensor::constant(qa), kv, p, 5.0);
    DenseArray ref = dense_cross_oracle(qa, kv.value(), p);
    CHECK(max_abs_diff(out.value(), ref) < 1e-9);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t t = 1; t < T; ++t)
        for (std::size_t c2 = 0; c2 < D; ++c2)
          CHECK(out.value().data[(t * N + n) * D + c2] ==
                doctest::Approx(out.value().data[n * D + c2]).epsilon(1e-9));
  }
  SUBCASE("zero values give zero output") {
    Tensor q = Tensor::constant(random_arr({T, N, D}, rng));
    Tensor out =
        probsparse_cross_attention(q, Tensor::zeros({T, N, D}), p, 0.2);
    for (double v : out.value().data) CHECK(v == 0.0);
  }
  SUBCASE("sparse path stays finite and differentiable") {
    Tensor q = Tensor::constant(random_arr({T, N, D}, rng));
    Tensor kv = Tensor::constant(random_arr({T, N, D}, rng));
    Tensor out = probsparse_cross_attention(q, kv, p, 0.2);  // u < T
    CHECK(out.shape() == Shape{T, N, D});
    CHECK(out.value().all_finite());
    std::vector<Tensor> params = store.tensors();
    double err = grad_check(
        [&] {
          return sum_all(square(probsparse_cross_attention(q, kv, p, 0.2)));
        },
        params);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("encoder_layer") {
  ModelConfig cfg = small_config();
  StmModel model = make_model(cfg);
  SeededRng rng(81);
  DeploymentMap m = two_hosts(cfg.N);
  NormalizedAdjacency adj =
      normalize_adjacency(random_raw_adjacency(cfg.T, cfg.N, rng));
  Tensor x = Tensor::constant(random_arr({cfg.T, cfg.N, cfg.D}, rng));

  SUBCASE("shape preserved") {
    Tensor out = encoder_layer(x, m, adj, model.enc[0], cfg, false, nullptr);
    CHECK(out.shape() == Shape{cfg.T, cfg.N, cfg.D});
    CHECK(out.value().all_finite());
  }
  SUBCASE("all modules ablated leaves the pure decomposition cascade") {
    ModelConfig ab = cfg;
    ab.no_imm = ab.no_smm = ab.no_tmm_tb = ab.no_tmm_pca = true;
    StmModel zm = make_model(ab);
    for (auto& v : zm.enc[0].ff.w1.mutable_value().data) v = 0.0;
    for (auto& v : zm.enc[0].ff.w2.mutable_value().data) v = 0.0;
    Tensor out = encoder_layer(x, m, adj, zm.enc[0], ab, false, nullptr);
    Tensor ref = multi_decomp(
                     multi_decomp(multi_decomp(x, zm.enc[0].bank1).first,
                                  zm.enc[0].bank2)
                         .first,
                     zm.enc[0].bank3)
                     .first;
    CHECK(max_abs_diff(out.value(), ref.value()) < 1e-12);
  }
  SUBCASE("zero-weighted module equals its ablation bitwise") {
    StmModel zm = make_model(cfg);
    for (auto& v : zm.enc[0].imm[0].wo.mutable_value().data) v = 0.0;
    Tensor a = encoder_layer(x, m, adj, zm.enc[0], cfg, false, nullptr);
    ModelConfig ab = cfg;
    ab.no_imm = true;
    Tensor b = encoder_layer(x, m, adj, zm.enc[0], ab, false, nullptr);
    CHECK(a.value().data == b.value().data);
  }
}

TEST_CASE("decoder_layer") {
  ModelConfig cfg = small_config();
  StmModel model = make_model(cfg);
  SeededRng rng(91);
  DeploymentMap m = two_hosts(cfg.N);
  NormalizedAdjacency adj =
      normalize_adjacency(random_raw_adjacency(cfg.T, cfg.N, rng));
  Tensor x_de = Tensor::constant(random_arr({cfg.T, cfg.N, cfg.D}, rng));
  Tensor x_en = Tensor::constant(random_arr({cfg.T, cfg.N, cfg.D}, rng));

  SUBCASE("shape preserved and trend accumulated") {
    TrendState trend;
    Tensor out = decoder_layer(x_de, x_en, m, adj, model.dec[0], cfg, trend,
                               false, nullptr);
    CHECK(out.shape() == Shape{cfg.T, cfg.N, cfg.D});
    CHECK(trend.accumulated.defined());
    CHECK(trend.accumulated.shape() == Shape{cfg.T, cfg.N, cfg.D});
  }
  SUBCASE("zero trend projectors remove the trend term") {
    StmModel zm = make_model(cfg);
    for (auto& w : zm.dec[0].w_trend)
      for (auto& v : w.mutable_value().data) v = 0.0;
    TrendState trend;
    Tensor out = decoder_layer(x_de, x_en, m, adj, zm.dec[0], cfg, trend,
                               false, nullptr);
    for (double v : trend.accumulated.value().data) CHECK(v == 0.0);
    CHECK(out.value().all_finite());
  }
  SUBCASE("zero encoder stream and zero value projection keep stage 0 "
          "residual-only") {
    StmModel zm = make_model(cfg);
    for (auto& v : zm.dec[0].cross.wv.mutable_value().data) v = 0.0;
    Tensor cr = probsparse_cross_attention(x_de, Tensor::zeros(x_de.shape()),
                                           zm.dec[0].cross, cfg.probsparse_c);
    for (double v : cr.value().data) CHECK(v == 0.0);
  }
}

TEST_CASE("model_forward") {
  ModelConfig cfg = small_config();
  SeededRng rng(101);
  DeploymentMap m = two_hosts(cfg.N);
  DenseArray adj_raw = random_raw_adjacency(cfg.T, cfg.N, rng);
  Tensor hist = Tensor::constant(random_arr({cfg.T, cfg.N, cfg.C}, rng));

  SUBCASE("output shape and finiteness") {
    StmModel model = make_model(cfg);
    Tensor pred = model_forward(model, hist, adj_raw, m, false, nullptr);
    CHECK(pred.shape() == Shape{cfg.T, cfg.N, cfg.C});
    CHECK(pred.value().all_finite());
  }
  SUBCASE("evaluation is bitwise deterministic") {
    StmModel model = make_model(cfg);
    Tensor a = model_forward(model, hist, adj_raw, m, false, nullptr);
    Tensor b = model_forward(model, hist, adj_raw, m, false, nullptr);
    CHECK(a.value().data == b.value().data);
  }
  SUBCASE("training mode repeats under the same draw stream") {
    StmModel model = make_model(cfg);
    SeededRng r1(9), r2(9);
    Tensor a = model_forward(model, hist, adj_raw, m, true, &r1);
    Tensor b = model_forward(model, hist, adj_raw, m, true, &r2);
    CHECK(a.value().data == b.value().data);
  }
  SUBCASE("ablated module parameters cannot influence the output") {
    ModelConfig ab = cfg;
    ab.no_smm = true;
    StmModel model = make_model(ab);
    Tensor a = model_forward(model, hist, adj_raw, m, false, nullptr);
    for (auto& v : model.enc[0].smm[0].w.mutable_value().data) v += 7.0;
    Tensor b = model_forward(model, hist, adj_raw, m, false, nullptr);
    CHECK(a.value().data == b.value().data);
  }
  SUBCASE("no-adjacency ignores the adjacency argument") {
    ModelConfig ab = cfg;
    ab.no_adjacency = true;
    StmModel model = make_model(ab);
    Tensor a = model_forward(model, hist, adj_raw, m, false, nullptr);
    DenseArray other = random_raw_adjacency(cfg.T, cfg.N, rng);
    Tensor b = model_forward(model, hist, other, m, false, nullptr);
    CHECK(a.value().data == b.value().data);
  }
  SUBCASE("shape mismatch labeled") {
    StmModel model = make_model(cfg);
    CHECK_THROWS_AS(model_forward(model, Tensor::zeros({4, 4, 4}), adj_raw, m,
                                  false, nullptr),
                    std::invalid_argument);
  }
}

TEST_CASE("full-model gradient check") {
  ModelConfig cfg = small_config();
  StmModel model = make_model(cfg);
  SeededRng rng(111);
  DeploymentMap m = two_hosts(cfg.N);
  DenseArray adj_raw = random_raw_adjacency(cfg.T, cfg.N, rng);
  Tensor hist = Tensor::constant(random_arr({cfg.T, cfg.N, cfg.C}, rng));
  std::vector<Tensor> params = model.store.tensors();
  double err = grad_check_norm(
      [&] {
        return mean_all(
            square(model_forward(model, hist, adj_raw, m, false, nullptr)));
      },
      params);
  CHECK(err < 1e-4);
}

TEST_CASE("checkpoint round trip") {
  ModelConfig cfg = small_config();
  StmModel model = make_model(cfg);
  SeededRng rng(121);
  DeploymentMap m = two_hosts(cfg.N);
  DenseArray adj_raw = random_raw_adjacency(cfg.T, cfg.N, rng);
  Tensor hist = Tensor::constant(random_arr({cfg.T, cfg.N, cfg.C}, rng));
  Tensor before = model_forward(model, hist, adj_raw, m, false, nullptr);

  const std::string path = "ckpt_roundtrip.bin";
  save_checkpoint(model, path);
  StmModel loaded = load_checkpoint(path);
  CHECK(loaded.cfg.T == cfg.T);
  CHECK(loaded.cfg.seed == cfg.seed);
  Tensor after = model_forward(loaded, hist, adj_raw, m, false, nullptr);
  CHECK(max_abs_diff(before.value(), after.value()) <= 1e-6);

  SUBCASE("bad header rejected") {
    std::ofstream f("ckpt_bad.bin");
    f << "not a checkpoint\n";
    f.close();
    CHECK_THROWS_AS(load_checkpoint("ckpt_bad.bin"), std::runtime_error);
    std::remove("ckpt_bad.bin");
  }
  SUBCASE("truncated payload rejected") {
    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out("ckpt_trunc.bin", std::ios::binary);
    out.write(all.data(), static_cast<std::streamsize>(all.size() - 64));
    out.close();
    CHECK_THROWS_AS(load_checkpoint("ckpt_trunc.bin"), std::runtime_error);
    std::remove("ckpt_trunc.bin");
  }
  std::remove(path.c_str());
}
