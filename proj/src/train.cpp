#include "stm/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace stm {

Adam::Adam(ParamStore& store, double beta1, double beta2, double eps)
    : store_(store), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [name, t] : store_.items()) {
    m_.emplace_back(t.size(), 0.0);
    v_.emplace_back(t.size(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto& items = store_.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    Tensor p = items[i].second;
    const DenseArray& g = p.grad();
    auto& val = p.mutable_value().data;
    for (std::size_t j = 0; j < val.size(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g.data[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g.data[j] * g.data[j];
      double mhat = m_[i][j] / bc1;
      double vhat = v_[i][j] / bc2;
      val[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

namespace {

Tensor window_loss(StmModel& model, const WindowPair& w,
                   const DeploymentMap& m, bool training, SeededRng* rng) {
  Tensor hist = Tensor::constant(w.hist);
  Tensor pred = model_forward(model, hist, w.adj, m, training, rng);
  Tensor diff = sub(pred, Tensor::constant(w.target));
  return mean_all(square(diff));
}

}  // namespace

TrainResult train_model(StmModel& model, const DeploymentMap& map,
                        const std::vector<WindowPair>& train,
                        const TrainConfig& cfg, const std::string& ckpt_path) {
  if (train.empty()) throw std::invalid_argument("train: no windows");
  if (cfg.micro_batch < 1 || cfg.accum < 1) {
    throw std::invalid_argument("train: micro_batch and accum must be >= 1");
  }
  TrainResult result;
  Adam opt(model.store, 0.9, 0.999, 1e-8);
  SeededRng order_rng(cfg.seed ^ 0x5bf03595u);
  SeededRng draw_rng(cfg.seed ^ 0x243f6a88u);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();  // forces an initial shuffle
  const std::size_t per_update = cfg.micro_batch * cfg.accum;
  const double w = 1.0 / static_cast<double>(per_update);

  auto next_window = [&]() -> const WindowPair& {
    if (cursor >= order.size()) {
      for (std::size_t i = order.size(); i > 1; --i) {
        std::size_t j = order_rng.randint(i);
        std::swap(order[i - 1], order[j]);
      }
      cursor = 0;
    }
    return train[order[cursor++]];
  };

  for (std::size_t u = 0; u < cfg.updates; ++u) {
    model.store.zero_grads();
    double update_loss = 0.0;
    bool bad = false;
    for (std::size_t g = 0; g < cfg.accum && !bad; ++g) {
      Tensor micro;
      for (std::size_t b = 0; b < cfg.micro_batch; ++b) {
        Tensor l = scale(window_loss(model, next_window(), map, true,
                                     &draw_rng),
                         w);
        micro = micro.defined() ? add(micro, l) : l;
      }
      double lv = micro.item();
      if (!std::isfinite(lv)) {
        bad = true;
        break;
      }
      update_loss += lv;
      micro.backward();
    }
    if (bad) {
      result.aborted = true;
      save_checkpoint(model, ckpt_path);  // params predate the bad step
      return result;
    }
    double lr = cfg.lr;
    if (cfg.warmup > 0) {
      lr *= std::min(1.0, static_cast<double>(u + 1) /
                              static_cast<double>(cfg.warmup));
    }
    opt.step(lr);
    result.losses.push_back(update_loss);
    ++result.updates_done;
  }
  save_checkpoint(model, ckpt_path);
  return result;
}

namespace {

MetricsReport metrics_from(const std::vector<DenseArray>& preds,
                           const std::vector<WindowPair>& windows) {
  if (preds.empty()) throw std::invalid_argument("metrics: no windows");
  const Shape& s = preds[0].shape;  // T x N x C
  const std::size_t T = s[0], per_step = s[1] * s[2];
  MetricsReport r;
  std::vector<double> abs_sum(T, 0.0), sq_sum(T, 0.0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < per_step; ++j) {
        double d = preds[i].data[t * per_step + j] -
                   windows[i].target.data[t * per_step + j];
        abs_sum[t] += std::abs(d);
        sq_sum[t] += d * d;
      }
    }
  }
  const double denom_step =
      static_cast<double>(preds.size()) * static_cast<double>(per_step);
  double abs_total = 0, sq_total = 0;
  for (std::size_t t = 0; t < T; ++t) {
    double mae = abs_sum[t] / denom_step;
    double mse = sq_sum[t] / denom_step;
    r.per_horizon.push_back({mae, mse, std::sqrt(mse)});
    abs_total += abs_sum[t];
    sq_total += sq_sum[t];
  }
  r.mae = abs_total / (denom_step * T);
  r.mse = sq_total / (denom_step * T);
  r.rmse = std::sqrt(r.mse);
  return r;
}

}  // namespace

MetricsReport evaluate_model(StmModel& model, const DeploymentMap& map,
                             const std::vector<WindowPair>& windows) {
  std::vector<DenseArray> preds;
  NoGradGuard ng;
  for (const auto& w : windows) {
    Tensor pred = model_forward(model, Tensor::constant(w.hist), w.adj, map,
                                false, nullptr);
    preds.push_back(pred.value());
  }
  return metrics_from(preds, windows);
}

MetricsReport persistence_baseline(const std::vector<WindowPair>& windows) {
  std::vector<DenseArray> preds;
  for (const auto& w : windows) {
    const Shape& s = w.hist.shape;
    const std::size_t T = s[0], per_step = s[1] * s[2];
    DenseArray p(s);
    for (std::size_t t = 0; t < T; ++t) {
      std::copy_n(w.hist.data.begin() + (T - 1) * per_step, per_step,
                  p.data.begin() + t * per_step);
    }
    preds.push_back(std::move(p));
  }
  return metrics_from(preds, windows);
}

namespace {

// Gaussian elimination with partial pivoting; returns false if a pivot
// collapses.
bool solve_inplace(std::vector<double>& a, std::vector<double>& b,
                   std::size_t n, std::size_t rhs) {
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    }
    if (std::abs(a[piv * n + col]) < 1e-12) return false;
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c)
        std::swap(a[piv * n + c], a[col * n + c]);
      for (std::size_t c = 0; c < rhs; ++c)
        std::swap(b[piv * rhs + c], b[col * rhs + c]);
    }
    double d = a[col * n + col];
    for (std::size_t r = col + 1; r < n; ++r) {
      double f = a[r * n + col] / d;
      if (f == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
      for (std::size_t c = 0; c < rhs; ++c)
        b[r * rhs + c] -= f * b[col * rhs + c];
    }
  }
  for (std::size_t col = n; col-- > 0;) {
    double d = a[col * n + col];
    for (std::size_t c = 0; c < rhs; ++c) {
      double acc = b[col * rhs + c];
      for (std::size_t k = col + 1; k < n; ++k)
        acc -= a[col * n + k] * b[k * rhs + c];
      b[col * rhs + c] = acc / d;
    }
  }
  return true;
}

}  // namespace

MetricsReport linear_baseline(const std::vector<WindowPair>& train,
                              const std::vector<WindowPair>& eval) {
  if (train.empty() || eval.empty()) {
    throw std::invalid_argument("linear baseline: empty split");
  }
  const Shape& s = train[0].hist.shape;
  const std::size_t T = s[0], N = s[1], C = s[2];
  const std::size_t dim = T + 1;  // history plus bias
  bool ridge = false;

  // per-feature weights mapping (history, 1) -> target, examples are
  // (window, node) pairs
  std::vector<std::vector<double>> weights(C);
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> xtx(dim * dim, 0.0), xty(dim * T, 0.0);
    for (const auto& w : train) {
      for (std::size_t n = 0; n < N; ++n) {
        std::vector<double> x(dim, 1.0);
        for (std::size_t t = 0; t < T; ++t)
          x[t] = w.hist.data[(t * N + n) * C + c];
        for (std::size_t i = 0; i < dim; ++i) {
          for (std::size_t j = 0; j < dim; ++j) xtx[i * dim + j] += x[i] * x[j];
          for (std::size_t t = 0; t < T; ++t)
            xty[i * T + t] += x[i] * w.target.data[(t * N + n) * C + c];
        }
      }
    }
    std::vector<double> a = xtx, b = xty;
    if (!solve_inplace(a, b, dim, T)) {
      ridge = true;
      a = xtx;
      b = xty;
      for (std::size_t i = 0; i < dim; ++i) a[i * dim + i] += 1e-6;
      if (!solve_inplace(a, b, dim, T)) {
        throw std::runtime_error("linear baseline: singular even with ridge");
      }
    }
    weights[c] = std::move(b);  // dim x T
  }

  std::vector<DenseArray> preds;
  for (const auto& w : eval) {
    DenseArray p({T, N, C});
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        std::vector<double> x(dim, 1.0);
        for (std::size_t t = 0; t < T; ++t)
          x[t] = w.hist.data[(t * N + n) * C + c];
        for (std::size_t t = 0; t < T; ++t) {
          double acc = 0.0;
          for (std::size_t i = 0; i < dim; ++i)
            acc += x[i] * weights[c][i * T + t];
          p.data[(t * N + n) * C + c] = acc;
        }
      }
    }
    preds.push_back(std::move(p));
  }
  MetricsReport r = metrics_from(preds, eval);
  r.ridge_fallback = ridge;
  return r;
}

const std::vector<std::string> kAblationVariants = {
    "full", "no-imm", "no-smm", "no-tmm-tb", "no-tmm-pca", "no-adjacency"};

ModelConfig apply_variant(ModelConfig cfg, const std::string& variant) {
  cfg.no_imm = cfg.no_smm = cfg.no_tmm_tb = cfg.no_tmm_pca = cfg.no_adjacency =
      false;
  if (variant == "full") return cfg;
  if (variant == "no-imm") cfg.no_imm = true;
  else if (variant == "no-smm") cfg.no_smm = true;
  else if (variant == "no-tmm-tb") cfg.no_tmm_tb = true;
  else if (variant == "no-tmm-pca") cfg.no_tmm_pca = true;
  else if (variant == "no-adjacency") cfg.no_adjacency = true;
  else throw std::invalid_argument("unknown ablation variant '" + variant + "'");
  return cfg;
}

}  // namespace stm
