#include "stm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace stm {

namespace detail {

bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

void Node::ensure_grad() {
  if (!grad_live) {
    grad = DenseArray::zeros(value.shape);
    grad_live = true;
  }
}

void Node::accumulate(const DenseArray& g) {
  ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) grad.data[i] += g.data[i];
}

}  // namespace detail

using detail::Node;

Tensor::Tensor(DenseArray v, bool requires_grad) {
  node_ = std::make_shared<Node>();
  node_->value = std::move(v);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::wrap(std::shared_ptr<Node> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

double Tensor::item() const {
  if (size() != 1) {
    throw std::logic_error("item() on non-scalar tensor of shape " +
                           shape_str(shape()));
  }
  return node_->value.data[0];
}

const DenseArray& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad_live = false; }

Tensor Tensor::make_op(DenseArray value, std::vector<Tensor> parents,
                       std::function<void(Node&)> bw) {
  bool need = false;
  if (detail::grad_mode()) {
    for (const auto& p : parents) need = need || p.requires_grad();
  }
  if (!need) return Tensor(std::move(value), false);
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->parents.reserve(parents.size());
  for (auto& p : parents) n->parents.push_back(p.node());
  n->backward_fn = std::move(bw);
  return wrap(n);
}

void Tensor::backward() {
  if (size() != 1) {
    throw std::logic_error("backward() requires a scalar output");
  }
  // Topological order via iterative post-order DFS over the grad path.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (!node_->requires_grad) return;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad.data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// broadcast helpers

namespace {

// Index map from a broadcast result onto one operand.
std::vector<std::size_t> bcast_index(const Shape& rshape, const Shape& oshape) {
  const std::size_t n = rshape.size();
  const std::size_t rsize = shape_numel(rshape);
  std::vector<std::size_t> ostride(n, 0);
  auto os = row_strides(oshape);
  for (std::size_t i = 0; i < oshape.size(); ++i) {
    std::size_t ri = n - oshape.size() + i;
    ostride[ri] = (oshape[i] == 1 && rshape[ri] != 1) ? 0 : os[i];
  }
  std::vector<std::size_t> map(rsize);
  std::vector<std::size_t> idx(n, 0);
  std::size_t oi = 0;
  for (std::size_t r = 0; r < rsize; ++r) {
    map[r] = oi;
    for (std::size_t d = n; d-- > 0;) {
      idx[d]++;
      oi += ostride[d];
      if (idx[d] < rshape[d]) break;
      oi -= ostride[d] * rshape[d];
      idx[d] = 0;
    }
  }
  return map;
}

// Sum a gradient over broadcast axes back to the operand shape.
DenseArray reduce_to_shape(const DenseArray& g, const Shape& target) {
  if (g.shape == target) return g;
  DenseArray out(target);
  auto map = bcast_index(g.shape, target);
  for (std::size_t i = 0; i < g.size(); ++i) out.data[map[i]] += g.data[i];
  return out;
}

struct BinPlan {
  Shape rshape;
  bool same;
  std::vector<std::size_t> ai, bi;
};

BinPlan plan_binary(const DenseArray& a, const DenseArray& b) {
  BinPlan p;
  p.rshape = broadcast_shape(a.shape, b.shape);
  p.same = (a.shape == b.shape);
  if (!p.same) {
    p.ai = bcast_index(p.rshape, a.shape);
    p.bi = bcast_index(p.rshape, b.shape);
  }
  return p;
}

template <class F>
DenseArray binary_eval(const DenseArray& a, const DenseArray& b,
                       const BinPlan& p, F f) {
  DenseArray out(p.rshape);
  const std::size_t n = out.size();
  if (p.same) {
    for (std::size_t i = 0; i < n; ++i) out.data[i] = f(a.data[i], b.data[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i)
      out.data[i] = f(a.data[p.ai[i]], b.data[p.bi[i]]);
  }
  return out;
}

// df: given (a, b, gout) write (da_contrib, db_contrib)
template <class FA, class FB>
Tensor binary_op(const Tensor& ta, const Tensor& tb,
                 DenseArray value, BinPlan plan, FA dfa, FB dfb) {
  DenseArray av = ta.value(), bv = tb.value();
  return Tensor::make_op(
      std::move(value), {ta, tb},
      [av = std::move(av), bv = std::move(bv), plan = std::move(plan), dfa,
       dfb](Node& self) {
        const DenseArray& g = self.grad;
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        if (pa->requires_grad) {
          DenseArray ga(g.shape);
          if (plan.same) {
            for (std::size_t i = 0; i < g.size(); ++i)
              ga.data[i] = dfa(av.data[i], bv.data[i]) * g.data[i];
          } else {
            for (std::size_t i = 0; i < g.size(); ++i)
              ga.data[i] =
                  dfa(av.data[plan.ai[i]], bv.data[plan.bi[i]]) * g.data[i];
          }
          pa->accumulate(reduce_to_shape(ga, av.shape));
        }
        if (pb->requires_grad) {
          DenseArray gb(g.shape);
          if (plan.same) {
            for (std::size_t i = 0; i < g.size(); ++i)
              gb.data[i] = dfb(av.data[i], bv.data[i]) * g.data[i];
          } else {
            for (std::size_t i = 0; i < g.size(); ++i)
              gb.data[i] =
                  dfb(av.data[plan.ai[i]], bv.data[plan.bi[i]]) * g.data[i];
          }
          pb->accumulate(reduce_to_shape(gb, bv.shape));
        }
      });
}

template <class F, class DF>
Tensor unary_op(const Tensor& ta, F f, DF df) {
  const DenseArray& a = ta.value();
  DenseArray out(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i]);
  DenseArray av = a;
  return Tensor::make_op(std::move(out), {ta},
                         [av = std::move(av), df](Node& self) {
                           Node* p = self.parents[0].get();
                           if (!p->requires_grad) return;
                           DenseArray ga(av.shape);
                           for (std::size_t i = 0; i < av.size(); ++i)
                             ga.data[i] = df(av.data[i]) * self.grad.data[i];
                           p->accumulate(ga);
                         });
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  auto plan = plan_binary(a.value(), b.value());
  auto v = binary_eval(a.value(), b.value(), plan,
                       [](double x, double y) { return x + y; });
  return binary_op(a, b, std::move(v), std::move(plan),
                   [](double, double) { return 1.0; },
                   [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto plan = plan_binary(a.value(), b.value());
  auto v = binary_eval(a.value(), b.value(), plan,
                       [](double x, double y) { return x - y; });
  return binary_op(a, b, std::move(v), std::move(plan),
                   [](double, double) { return 1.0; },
                   [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto plan = plan_binary(a.value(), b.value());
  auto v = binary_eval(a.value(), b.value(), plan,
                       [](double x, double y) { return x * y; });
  return binary_op(a, b, std::move(v), std::move(plan),
                   [](double, double y) { return y; },
                   [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  auto plan = plan_binary(a.value(), b.value());
  auto v = binary_eval(a.value(), b.value(), plan,
                       [](double x, double y) { return x / y; });
  if (!v.all_finite() && a.value().all_finite() && b.value().all_finite()) {
    throw std::domain_error("div: non-finite result (division by zero)");
  }
  return binary_op(a, b, std::move(v), std::move(plan),
                   [](double, double y) { return 1.0 / y; },
                   [](double x, double y) { return -x / (y * y); });
}

Tensor exp(const Tensor& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x) { return 1.0 / x; });
}

Tensor log1p(const Tensor& a) {
  return unary_op(a, [](double x) { return std::log1p(x); },
                  [](double x) { return 1.0 / (1.0 + x); });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(a, [](double x) { return std::sqrt(x); },
                  [](double x) { return 0.5 / std::sqrt(x); });
}

Tensor neg(const Tensor& a) {
  return unary_op(a, [](double x) { return -x; },
                  [](double) { return -1.0; });
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(a, [c](double x) { return c * x; },
                  [c](double) { return c; });
}

Tensor add_const(const Tensor& a, double c) {
  return unary_op(a, [c](double x) { return x + c; },
                  [](double) { return 1.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a,
                  [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                  [](double x) {
                    double s = 1.0 / (1.0 + std::exp(-x));
                    return s * (1.0 - s);
                  });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary_op(a,
                  [slope](double x) { return x >= 0.0 ? x : slope * x; },
                  [slope](double x) { return x >= 0.0 ? 1.0 : slope; });
}

Tensor gelu(const Tensor& a) {
  const double k = 1.702;
  return unary_op(a,
                  [k](double x) { return x / (1.0 + std::exp(-k * x)); },
                  [k](double x) {
                    double s = 1.0 / (1.0 + std::exp(-k * x));
                    return s + x * k * s * (1.0 - s);
                  });
}

Tensor square(const Tensor& a) {
  return unary_op(a, [](double x) { return x * x; },
                  [](double x) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// matmul

namespace {

void mm_nn(const double* A, const double* B, double* C, std::size_t r,
           std::size_t k, std::size_t c) {
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double a = A[i * k + p];
      if (a == 0.0) continue;
      const double* brow = B + p * c;
      double* crow = C + i * c;
      for (std::size_t j = 0; j < c; ++j) crow[j] += a * brow[j];
    }
  }
}

// C[r][k] += G[r][c] * B[k][c]^T
void mm_nt(const double* G, const double* B, double* C, std::size_t r,
           std::size_t k, std::size_t c) {
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* grow = G + i * c;
      const double* brow = B + p * c;
      double acc = 0.0;
      for (std::size_t j = 0; j < c; ++j) acc += grow[j] * brow[j];
      C[i * k + p] += acc;
    }
  }
}

// C[k][c] += A[r][k]^T * G[r][c]
void mm_tn(const double* A, const double* G, double* C, std::size_t r,
           std::size_t k, std::size_t c) {
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double a = A[i * k + p];
      if (a == 0.0) continue;
      const double* grow = G + i * c;
      double* crow = C + p * c;
      for (std::size_t j = 0; j < c; ++j) crow[j] += a * grow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& ta, const Tensor& tb) {
  const DenseArray& a = ta.value();
  const DenseArray& b = tb.value();
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw std::invalid_argument("matmul: operands must have >= 2 dims, got " +
                                shape_str(a.shape) + " and " +
                                shape_str(b.shape));
  }
  const std::size_t r = a.shape[a.ndim() - 2];
  const std::size_t k = a.shape[a.ndim() - 1];
  const std::size_t kb = b.shape[b.ndim() - 2];
  const std::size_t c = b.shape[b.ndim() - 1];
  if (k != kb) {
    throw std::invalid_argument("matmul: inner extents differ: " +
                                shape_str(a.shape) + " x " +
                                shape_str(b.shape));
  }
  Shape abatch(a.shape.begin(), a.shape.end() - 2);
  Shape bbatch(b.shape.begin(), b.shape.end() - 2);
  bool a_shared = abatch.empty() && !bbatch.empty();
  bool b_shared = bbatch.empty() && !abatch.empty();
  if (!a_shared && !b_shared && abatch != bbatch) {
    throw std::invalid_argument("matmul: batch extents differ: " +
                                shape_str(a.shape) + " x " +
                                shape_str(b.shape));
  }
  Shape batch = a_shared ? bbatch : abatch;
  const std::size_t nb = shape_numel(batch);
  Shape oshape = batch;
  oshape.push_back(r);
  oshape.push_back(c);
  DenseArray out(oshape);
  for (std::size_t bi = 0; bi < nb; ++bi) {
    const double* pa = a.data.data() + (a_shared ? 0 : bi * r * k);
    const double* pb = b.data.data() + (b_shared ? 0 : bi * k * c);
    mm_nn(pa, pb, out.data.data() + bi * r * c, r, k, c);
  }
  DenseArray av = a, bv = b;
  return Tensor::make_op(
      std::move(out), {ta, tb},
      [av = std::move(av), bv = std::move(bv), r, k, c, nb, a_shared,
       b_shared](Node& self) {
        const DenseArray& g = self.grad;
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        if (pa->requires_grad) {
          DenseArray ga(av.shape);
          for (std::size_t bi = 0; bi < nb; ++bi) {
            mm_nt(g.data.data() + bi * r * c,
                  bv.data.data() + (b_shared ? 0 : bi * k * c),
                  ga.data.data() + (a_shared ? 0 : bi * r * k), r, k, c);
          }
          pa->accumulate(ga);
        }
        if (pb->requires_grad) {
          DenseArray gb(bv.shape);
          for (std::size_t bi = 0; bi < nb; ++bi) {
            mm_tn(av.data.data() + (a_shared ? 0 : bi * r * k),
                  g.data.data() + bi * r * c,
                  gb.data.data() + (b_shared ? 0 : bi * k * c), r, k, c);
          }
          pb->accumulate(gb);
        }
      });
}

// ---------------------------------------------------------------------------
// softmax

Tensor softmax_lastaxis(const Tensor& ta) {
  const DenseArray& a = ta.value();
  if (a.ndim() == 0 || a.shape.back() < 1) {
    throw std::invalid_argument("softmax: empty last axis");
  }
  if (!a.all_finite()) {
    throw std::domain_error("softmax: non-finite input");
  }
  const std::size_t w = a.shape.back();
  const std::size_t rows = a.size() / w;
  DenseArray out(a.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data.data() + r * w;
    double* y = out.data.data() + r * w;
    double m = x[0];
    for (std::size_t j = 1; j < w; ++j) m = std::max(m, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < w; ++j) {
      y[j] = std::exp(x[j] - m);
      s += y[j];
    }
    for (std::size_t j = 0; j < w; ++j) y[j] /= s;
  }
  DenseArray yv = out;
  return Tensor::make_op(
      std::move(out), {ta}, [yv = std::move(yv), w, rows](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        DenseArray ga(yv.shape);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = yv.data.data() + r * w;
          const double* g = self.grad.data.data() + r * w;
          double dot = 0.0;
          for (std::size_t j = 0; j < w; ++j) dot += y[j] * g[j];
          double* d = ga.data.data() + r * w;
          for (std::size_t j = 0; j < w; ++j) d[j] = y[j] * (g[j] - dot);
        }
        p->accumulate(ga);
      });
}

// ---------------------------------------------------------------------------
// reductions and shape ops

Tensor sum_all(const Tensor& ta) {
  const DenseArray& a = ta.value();
  double s = 0.0;
  for (double v : a.data) s += v;
  Shape ashape = a.shape;
  return Tensor::make_op(DenseArray::scalar(s), {ta},
                         [ashape](Node& self) {
                           Node* p = self.parents[0].get();
                           if (!p->requires_grad) return;
                           p->accumulate(
                               DenseArray::full(ashape, self.grad.data[0]));
                         });
}

Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

namespace {

// Split a shape around one axis into [outer, len, inner].
void axis_split(const Shape& s, std::size_t axis, std::size_t& outer,
                std::size_t& len, std::size_t& inner) {
  if (axis >= s.size()) {
    throw std::invalid_argument("axis " + std::to_string(axis) +
                                " out of range for " + shape_str(s));
  }
  outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace

Tensor sum_axis(const Tensor& ta, std::size_t axis, bool keepdim) {
  const DenseArray& a = ta.value();
  std::size_t outer, len, inner;
  axis_split(a.shape, axis, outer, len, inner);
  Shape oshape;
  for (std::size_t i = 0; i < a.ndim(); ++i) {
    if (i == axis) {
      if (keepdim) oshape.push_back(1);
    } else {
      oshape.push_back(a.shape[i]);
    }
  }
  DenseArray out(oshape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i)
        out.data[o * inner + i] += a.data[(o * len + l) * inner + i];
  Shape ashape = a.shape;
  return Tensor::make_op(
      std::move(out), {ta}, [ashape, outer, len, inner](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        DenseArray ga(ashape);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t l = 0; l < len; ++l)
            for (std::size_t i = 0; i < inner; ++i)
              ga.data[(o * len + l) * inner + i] =
                  self.grad.data[o * inner + i];
        p->accumulate(ga);
      });
}

Tensor mean_axis(const Tensor& a, std::size_t axis, bool keepdim) {
  double n = static_cast<double>(a.shape()[axis]);
  return scale(sum_axis(a, axis, keepdim), 1.0 / n);
}

Tensor max_lastaxis_detached(const Tensor& ta, bool keepdim) {
  const DenseArray& a = ta.value();
  const std::size_t w = a.shape.back();
  const std::size_t rows = a.size() / w;
  Shape oshape(a.shape.begin(), a.shape.end() - 1);
  if (keepdim) oshape.push_back(1);
  DenseArray out(oshape);
  for (std::size_t r = 0; r < rows; ++r) {
    double m = a.data[r * w];
    for (std::size_t j = 1; j < w; ++j) m = std::max(m, a.data[r * w + j]);
    out.data[r] = m;
  }
  return Tensor::constant(std::move(out));
}

double max_all_value(const Tensor& a) {
  double m = a.value().data[0];
  for (double v : a.value().data) m = std::max(m, v);
  return m;
}

Tensor reshape(const Tensor& ta, const Shape& s) {
  if (shape_numel(s) != ta.size()) {
    throw std::invalid_argument("reshape: cannot view " +
                                shape_str(ta.shape()) + " as " + shape_str(s));
  }
  DenseArray out(s, ta.value().data);
  Shape ashape = ta.shape();
  return Tensor::make_op(std::move(out), {ta}, [ashape](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->accumulate(DenseArray(ashape, self.grad.data));
  });
}

Tensor transpose(const Tensor& ta, const std::vector<std::size_t>& perm) {
  const DenseArray& a = ta.value();
  if (perm.size() != a.ndim()) {
    throw std::invalid_argument("transpose: perm rank mismatch");
  }
  Shape oshape(a.ndim());
  for (std::size_t i = 0; i < perm.size(); ++i) oshape[i] = a.shape[perm[i]];
  auto astr = row_strides(a.shape);
  auto ostr = row_strides(oshape);
  DenseArray out(oshape);
  std::vector<std::size_t> idx(a.ndim(), 0);
  // out[i0,i1,..] = a[i_perm]
  for (std::size_t oi = 0; oi < out.size(); ++oi) {
    std::size_t ai = 0;
    for (std::size_t d = 0; d < a.ndim(); ++d) ai += idx[d] * astr[perm[d]];
    out.data[oi] = a.data[ai];
    for (std::size_t d = a.ndim(); d-- > 0;) {
      if (++idx[d] < oshape[d]) break;
      idx[d] = 0;
    }
  }
  // inverse permutation for the gradient
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  Shape ashape = a.shape;
  return Tensor::make_op(
      std::move(out), {ta}, [ashape, oshape, inv](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        auto gstr = row_strides(oshape);
        DenseArray ga(ashape);
        std::vector<std::size_t> idx(ashape.size(), 0);
        for (std::size_t ai = 0; ai < ga.size(); ++ai) {
          std::size_t gi = 0;
          for (std::size_t d = 0; d < ashape.size(); ++d)
            gi += idx[d] * gstr[inv[d]];
          ga.data[ai] = self.grad.data[gi];
          for (std::size_t d = ashape.size(); d-- > 0;) {
            if (++idx[d] < ashape[d]) break;
            idx[d] = 0;
          }
        }
        p->accumulate(ga);
      });
}

Tensor transpose_last2(const Tensor& a) {
  std::vector<std::size_t> perm(a.shape().size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return transpose(a, perm);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape base = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != base.size()) {
      throw std::invalid_argument("concat: rank mismatch");
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != base[i]) {
        throw std::invalid_argument("concat: ragged shapes " + shape_str(base) +
                                    " vs " + shape_str(s));
      }
    }
    total += s[axis];
  }
  Shape oshape = base;
  oshape[axis] = total;
  std::size_t outer, olen, inner;
  axis_split(oshape, axis, outer, olen, inner);
  DenseArray out(oshape);
  std::vector<std::size_t> sizes;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const DenseArray& a = p.value();
    std::size_t len = a.shape[axis];
    sizes.push_back(len);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(a.data.data() + o * len * inner, len * inner,
                  out.data.data() + (o * olen + off) * inner);
    }
    off += len;
  }
  return Tensor::make_op(
      std::move(out), parts, [sizes, outer, olen, inner](Node& self) {
        std::size_t off = 0;
        for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
          Node* p = self.parents[pi].get();
          std::size_t len = sizes[pi];
          if (p->requires_grad) {
            DenseArray ga(p->value.shape);
            for (std::size_t o = 0; o < outer; ++o) {
              std::copy_n(self.grad.data.data() + (o * olen + off) * inner,
                          len * inner, ga.data.data() + o * len * inner);
            }
            p->accumulate(ga);
          }
          off += len;
        }
      });
}

Tensor slice(const Tensor& ta, std::size_t axis, std::size_t start,
             std::size_t len) {
  const DenseArray& a = ta.value();
  std::size_t outer, alen, inner;
  axis_split(a.shape, axis, outer, alen, inner);
  if (start + len > alen) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) +
                                "," + std::to_string(start + len) +
                                ") exceeds axis extent " +
                                std::to_string(alen));
  }
  Shape oshape = a.shape;
  oshape[axis] = len;
  DenseArray out(oshape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.data.data() + (o * alen + start) * inner, len * inner,
                out.data.data() + o * len * inner);
  }
  Shape ashape = a.shape;
  return Tensor::make_op(
      std::move(out), {ta},
      [ashape, outer, alen, inner, start, len](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        DenseArray ga(ashape);
        for (std::size_t o = 0; o < outer; ++o) {
          std::copy_n(self.grad.data.data() + o * len * inner, len * inner,
                      ga.data.data() + (o * alen + start) * inner);
        }
        p->accumulate(ga);
      });
}

std::vector<Tensor> split(const Tensor& a,
                          const std::vector<std::size_t>& sizes,
                          std::size_t axis) {
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  if (total != a.shape()[axis]) {
    throw std::invalid_argument("split: sizes sum " + std::to_string(total) +
                                " != axis extent " +
                                std::to_string(a.shape()[axis]));
  }
  std::vector<Tensor> out;
  std::size_t off = 0;
  for (auto s : sizes) {
    out.push_back(slice(a, axis, off, s));
    off += s;
  }
  return out;
}

Tensor index_select(const Tensor& ta, std::size_t axis,
                    const std::vector<std::size_t>& idx) {
  const DenseArray& a = ta.value();
  std::size_t outer, alen, inner;
  axis_split(a.shape, axis, outer, alen, inner);
  for (auto i : idx) {
    if (i >= alen) throw std::invalid_argument("index_select: index oob");
  }
  Shape oshape = a.shape;
  oshape[axis] = idx.size();
  const std::size_t olen = idx.size();
  DenseArray out(oshape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < olen; ++l)
      std::copy_n(a.data.data() + (o * alen + idx[l]) * inner, inner,
                  out.data.data() + (o * olen + l) * inner);
  Shape ashape = a.shape;
  return Tensor::make_op(
      std::move(out), {ta},
      [ashape, outer, alen, inner, idx, olen](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        DenseArray ga(ashape);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t l = 0; l < olen; ++l) {
            const double* g = self.grad.data.data() + (o * olen + l) * inner;
            double* d = ga.data.data() + (o * alen + idx[l]) * inner;
            for (std::size_t i = 0; i < inner; ++i) d[i] += g[i];
          }
        p->accumulate(ga);
      });
}

Tensor detach(const Tensor& a) { return Tensor::constant(a.value()); }

// ---------------------------------------------------------------------------
// conv2d

Tensor conv2d(const Tensor& tx, const Tensor& tk) {
  const DenseArray& x = tx.value();
  const DenseArray& k = tk.value();
  if (x.ndim() != 3 || k.ndim() != 4) {
    throw std::invalid_argument("conv2d: expected x HxWxCin, kernel "
                                "khxkwxCinxCout");
  }
  const std::size_t H = x.shape[0], W = x.shape[1], Cin = x.shape[2];
  const std::size_t kh = k.shape[0], kw = k.shape[1];
  const std::size_t Cout = k.shape[3];
  if (k.shape[2] != Cin) {
    throw std::invalid_argument("conv2d: channel mismatch");
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw std::invalid_argument("conv2d: kernel extents must be odd, got " +
                                std::to_string(kh) + "x" + std::to_string(kw));
  }
  const std::ptrdiff_t ph = kh / 2, pw = kw / 2;
  DenseArray out({H, W, Cout});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t di = 0; di < kh; ++di) {
        std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + di - ph;
        if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t dj = 0; dj < kw; ++dj) {
          std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + dj - pw;
          if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(W)) continue;
          const double* xp = x.data.data() + (si * W + sj) * Cin;
          const double* kp = k.data.data() + (di * kw + dj) * Cin * Cout;
          double* op = out.data.data() + (i * W + j) * Cout;
          for (std::size_t ci = 0; ci < Cin; ++ci) {
            const double xv = xp[ci];
            if (xv == 0.0) continue;
            const double* kc = kp + ci * Cout;
            for (std::size_t co = 0; co < Cout; ++co) op[co] += xv * kc[co];
          }
        }
      }
  DenseArray xv = x, kv = k;
  return Tensor::make_op(
      std::move(out), {tx, tk},
      [xv = std::move(xv), kv = std::move(kv), H, W, Cin, Cout, kh, kw, ph,
       pw](Node& self) {
        Node* px = self.parents[0].get();
        Node* pk = self.parents[1].get();
        const DenseArray& g = self.grad;
        DenseArray gx(xv.shape);
        DenseArray gk(kv.shape);
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j)
            for (std::size_t di = 0; di < kh; ++di) {
              std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + di - ph;
              if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t dj = 0; dj < kw; ++dj) {
                std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + dj - pw;
                if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(W)) continue;
                const double* xp = xv.data.data() + (si * W + sj) * Cin;
                const double* kp =
                    kv.data.data() + (di * kw + dj) * Cin * Cout;
                const double* gp = g.data.data() + (i * W + j) * Cout;
                double* gxp = gx.data.data() + (si * W + sj) * Cin;
                double* gkp = gk.data.data() + (di * kw + dj) * Cin * Cout;
                for (std::size_t ci = 0; ci < Cin; ++ci) {
                  const double* kc = kp + ci * Cout;
                  double* gkc = gkp + ci * Cout;
                  double acc = 0.0;
                  for (std::size_t co = 0; co < Cout; ++co) {
                    acc += kc[co] * gp[co];
                    gkc[co] += xp[ci] * gp[co];
                  }
                  gxp[ci] += acc;
                }
              }
            }
        if (px->requires_grad) px->accumulate(gx);
        if (pk->requires_grad) pk->accumulate(gk);
      });
}

// ---------------------------------------------------------------------------
// sampling

DenseArray sample(Dist kind, const Shape& shape, SeededRng& rng) {
  DenseArray out(shape);
  switch (kind) {
    case Dist::kUniform01:
      for (auto& v : out.data) v = rng.uniform01();
      break;
    case Dist::kStandardNormal:
      for (auto& v : out.data) v = rng.normal();
      break;
    case Dist::kGumbel:
      for (auto& v : out.data) v = rng.gumbel();
      break;
  }
  return out;
}

}  // namespace stm
