#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "stm/array.hpp"
#include "stm/rng.hpp"

namespace stm {

namespace detail {

struct Node {
  DenseArray value;
  DenseArray grad;  // lazily allocated, same shape as value
  bool requires_grad = false;
  bool grad_live = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const DenseArray& g);
  void ensure_grad();
};

bool& grad_mode();

}  // namespace detail

/// Value handle into the gradient tape. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(DenseArray v, bool requires_grad = false);

  static Tensor constant(DenseArray v) { return Tensor(std::move(v), false); }
  static Tensor param(DenseArray v) { return Tensor(std::move(v), true); }
  static Tensor zeros(const Shape& s) { return constant(DenseArray::zeros(s)); }
  static Tensor full(const Shape& s, double v) {
    return constant(DenseArray::full(s, v));
  }
  static Tensor scalar(double v) { return constant(DenseArray::scalar(v)); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t size() const { return node_->value.size(); }
  const DenseArray& value() const { return node_->value; }
  DenseArray& mutable_value() { return node_->value; }
  double item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  const DenseArray& grad() const;
  void zero_grad();
  /// Reverse pass from this scalar; each recorded op visited once.
  void backward();

  std::shared_ptr<detail::Node> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n);

  /// Builds an op node; drops the tape when grad mode is off or no
  /// parent needs gradients.
  static Tensor make_op(DenseArray value, std::vector<Tensor> parents,
                        std::function<void(detail::Node&)> bw);

 private:
  std::shared_ptr<detail::Node> node_;
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
};

// ---- elementwise (trailing-axis broadcasting on binary ops) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor log1p(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor sigmoid(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
/// Smooth gelu-style activation x * sigmoid(1.702 x).
Tensor gelu(const Tensor& a);
Tensor square(const Tensor& a);

// ---- linear algebra ----
/// a: [..., r, k] x b: [..., k, c]; leading dims must match, or either
/// operand may be a plain matrix shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Stable softmax over the last axis (max-subtraction).
Tensor softmax_lastaxis(const Tensor& a);

// ---- reductions / shape ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean_axis(const Tensor& a, std::size_t axis, bool keepdim = false);
/// Forward-only max over the last axis (constant on the tape).
Tensor max_lastaxis_detached(const Tensor& a, bool keepdim = true);
double max_all_value(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& s);
Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm);
/// Swap the last two axes.
Tensor transpose_last2(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
std::vector<Tensor> split(const Tensor& a, const std::vector<std::size_t>& sizes,
                          std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t len);
Tensor index_select(const Tensor& a, std::size_t axis,
                    const std::vector<std::size_t>& idx);
Tensor detach(const Tensor& a);

/// Zero-padded same-size 2D convolution. x: H x W x Cin, kernel:
/// kh x kw x Cin x Cout with odd kh, kw.
Tensor conv2d(const Tensor& x, const Tensor& kernel);

// ---- sampling (constants on the tape) ----
enum class Dist { kUniform01, kStandardNormal, kGumbel };
DenseArray sample(Dist kind, const Shape& shape, SeededRng& rng);

}  // namespace stm
