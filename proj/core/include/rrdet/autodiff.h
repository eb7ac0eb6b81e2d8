#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rrdet/tensor.h"

namespace rrdet::ad {

struct Node;

/// Handle to a node of the reverse-mode computation graph. Cheap to copy.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  bool defined() const { return n_ != nullptr; }
  const Tensor& value() const;
  const Tensor& grad() const;  // valid after backward(); undefined tensor if untouched
  bool requires_grad() const;
  const Shape& shape() const { return value().shape(); }
  Dtype dtype() const { return value().dtype(); }
  int64_t numel() const { return value().numel(); }

  std::shared_ptr<Node> node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;
  uint64_t seq = 0;
};

/// Names of the differentiable primitives the substrate guarantees.
std::vector<std::string> required_op_suite();

Var leaf(Tensor value, bool requires_grad);
Var constant(Tensor value);

/// Factory for custom ops defined outside this translation unit (conv, RoI
/// sampling). `backprop` reads node.grad and accumulates into the parents.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop);

/// Adds g into the node's grad buffer, allocating zeros on first touch.
/// No-op when the node does not require gradients.
void accumulate_grad(Node& n, const Tensor& g);
void accumulate_grad(const Var& v, const Tensor& g);
Tensor& ensure_grad(Node& n);

/// Reverse pass from a scalar root. Clears stale gradients of every node
/// reachable through requires-grad edges, then runs the tape in reverse
/// creation order.
void backward(const Var& root);

// ---- elementwise (binary ops broadcast right-aligned, numpy-style) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// a / (b + eps); intended for positive denominators.
Var div_eps(const Var& a, const Var& b, double eps = 1e-6);
Var minimum(const Var& a, const Var& b);  // ties route gradient to a
Var maximum(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var neg(const Var& a);

// ---- elementwise unary ----
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var tanh_op(const Var& x);
Var softplus(const Var& x);
Var exp_op(const Var& x);
Var log_eps(const Var& x, double eps = 1e-12);  // log(x + eps)
Var sqrt_eps(const Var& x, double eps = 1e-12);  // sqrt(x + eps)
Var sin_op(const Var& x);
Var cos_op(const Var& x);
Var abs_op(const Var& x);  // subgradient 0 at 0
Var clamp(const Var& x, double lo, double hi);  // pass-through gradient inside [lo, hi]

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var bmm(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
/// x:(..., in) * w:(in, out) + b:(out)
Var affine(const Var& x, const Var& w, const Var& b);

// ---- shape ----
Var reshape(const Var& x, Shape new_shape);
Var permute(const Var& x, const std::vector<int>& axes);
Var concat(const std::vector<Var>& xs, int axis);
Var slice(const Var& x, int axis, int64_t start, int64_t len);
Var gather_rows(const Var& x, std::vector<int64_t> indices);

// ---- reductions / normalization ----
Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var sum_axis(const Var& x, int axis, bool keepdim = false);
Var mean_axis(const Var& x, int axis, bool keepdim = false);
Var softmax(const Var& x, int axis = -1);
/// Normalizes over the last axis; the variance guard is added under the root.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);

Var detach(const Var& x);

// ---- spatial ops (NCHW) ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample2x(const Var& x);  // nearest neighbour

}  // namespace rrdet::ad
