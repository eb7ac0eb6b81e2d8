#include "rrdet/autodiff.h"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <unordered_set>

namespace rrdet::ad {

namespace {

std::atomic<uint64_t> g_seq{0};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const RowMat<T>>;

// C (M,N) = op(A) * op(B), with op controlled by the transpose flags.
// All matrices are dense row-major and contiguous.
template <typename T>
void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c,
          bool accumulate) {
  CMapM<T> ma(a, ta ? k : m, ta ? m : k);
  CMapM<T> mb(b, tb ? n : k, tb ? k : n);
  MapM<T> mc(c, m, n);
  if (!ta && !tb) {
    if (accumulate) mc.noalias() += ma * mb;
    else mc.noalias() = ma * mb;
  } else if (ta && !tb) {
    if (accumulate) mc.noalias() += ma.transpose() * mb;
    else mc.noalias() = ma.transpose() * mb;
  } else if (!ta && tb) {
    if (accumulate) mc.noalias() += ma * mb.transpose();
    else mc.noalias() = ma * mb.transpose();
  } else {
    if (accumulate) mc.noalias() += ma.transpose() * mb.transpose();
    else mc.noalias() = ma.transpose() * mb.transpose();
  }
}

bool any_requires_grad(const std::vector<Var>& vs) {
  for (const auto& v : vs)
    if (v.requires_grad()) return true;
  return false;
}

Var finish_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  if (!any_requires_grad(parents)) return constant(std::move(value));
  return make_op(std::move(value), std::move(parents), std::move(backprop));
}

std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

// Right-aligned broadcast plan: per-output-axis strides into each operand,
// zero on broadcast axes.
struct Bcast {
  Shape out;
  std::vector<int64_t> sa, sb;
  bool same = false;  // shapes identical -> linear fast path

  static Bcast make(const Shape& a, const Shape& b) {
    Bcast p;
    if (a == b) {
      p.out = a;
      p.same = true;
      return p;
    }
    const size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    p.out.resize(r);
    p.sa.assign(r, 0);
    p.sb.assign(r, 0);
    auto st_a = contiguous_strides(a);
    auto st_b = contiguous_strides(b);
    for (size_t i = 0; i < r; ++i) {
      const int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
      const int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
      if (da != db && da != 1 && db != 1)
        throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) + " vs " +
                                    shape_str(b));
      p.out[i] = std::max(da, db);
      if (da != 1) p.sa[i] = st_a[i - (r - ra)];
      if (db != 1) p.sb[i] = st_b[i - (r - rb)];
    }
    return p;
  }
};

// Calls fn(ia, ib, iout) for every output element of the broadcast plan.
template <typename F>
void bcast_for_each(const Bcast& p, F&& fn) {
  const size_t r = p.out.size();
  const int64_t n = shape_numel(p.out);
  if (r == 0) {
    fn(int64_t{0}, int64_t{0}, int64_t{0});
    return;
  }
  std::vector<int64_t> idx(r, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    fn(oa, ob, i);
    for (int ax = static_cast<int>(r) - 1; ax >= 0; --ax) {
      const auto u = static_cast<size_t>(ax);
      ++idx[u];
      oa += p.sa[u];
      ob += p.sb[u];
      if (idx[u] < p.out[u]) break;
      idx[u] = 0;
      oa -= p.sa[u] * p.out[u];
      ob -= p.sb[u] * p.out[u];
    }
  }
}

void check_same_dtype(const Var& a, const Var& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw std::invalid_argument(std::string(op) + ": operands must share a dtype");
}

// Elementwise binary op with broadcasting. fwd(a,b)->y; dfa/dfb(a,b,y,g)
// return the gradient contribution for the respective operand.
template <typename FWD, typename DFA, typename DFB>
Var binary_op(const Var& a, const Var& b, const char* name, FWD fwd, DFA dfa, DFB dfb) {
  check_same_dtype(a, b, name);
  const Bcast plan = Bcast::make(a.shape(), b.shape());
  Tensor out = Tensor::uninitialized(plan.out, a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.value().data<T>();
    const T* pb = b.value().data<T>();
    T* po = out.data<T>();
    if (plan.same) {
      const int64_t n = out.numel();
      for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    } else {
      bcast_for_each(plan, [&](int64_t ia, int64_t ib, int64_t io) { po[io] = fwd(pa[ia], pb[ib]); });
    }
  });
  return finish_op(std::move(out), {a, b}, [plan, dfa, dfb](Node& n) {
    const Var& pa = n.parents[0];
    const Var& pb = n.parents[1];
    dispatch_dtype(n.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* av = pa.value().data<T>();
      const T* bv = pb.value().data<T>();
      const T* yv = n.value.data<T>();
      const T* gv = n.grad.data<T>();
      T* ga = pa.requires_grad() ? ensure_grad(*pa.node()).data<T>() : nullptr;
      T* gb = pb.requires_grad() ? ensure_grad(*pb.node()).data<T>() : nullptr;
      if (plan.same) {
        const int64_t m = n.value.numel();
        if (ga)
          for (int64_t i = 0; i < m; ++i) ga[i] += dfa(av[i], bv[i], yv[i], gv[i]);
        if (gb)
          for (int64_t i = 0; i < m; ++i) gb[i] += dfb(av[i], bv[i], yv[i], gv[i]);
      } else {
        bcast_for_each(plan, [&](int64_t ia, int64_t ib, int64_t io) {
          if (ga) ga[ia] += dfa(av[ia], bv[ib], yv[io], gv[io]);
          if (gb) gb[ib] += dfb(av[ia], bv[ib], yv[io], gv[io]);
        });
      }
    });
  });
}

// Elementwise unary op. fwd(x)->y; df(x,y) -> dy/dx.
template <typename FWD, typename DF>
Var unary_op(const Var& x, FWD fwd, DF df) {
  Tensor out = Tensor::uninitialized(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.value().data<T>();
    T* po = out.data<T>();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
  });
  return finish_op(std::move(out), {x}, [df](Node& n) {
    const Var& px = n.parents[0];
    if (!px.requires_grad()) return;
    dispatch_dtype(n.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* xv = px.value().data<T>();
      const T* yv = n.value.data<T>();
      const T* gv = n.grad.data<T>();
      T* gx = ensure_grad(*px.node()).data<T>();
      const int64_t m = n.value.numel();
      for (int64_t i = 0; i < m; ++i) gx[i] += gv[i] * df(xv[i], yv[i]);
    });
  });
}

int normalize_axis(int axis, size_t rank, const char* op) {
  int a = axis;
  if (a < 0) a += static_cast<int>(rank);
  if (a < 0 || a >= static_cast<int>(rank))
    throw std::invalid_argument(std::string(op) + ": axis out of range");
  return a;
}

// Splits a shape around `axis` into (outer, n, inner) extents.
void split_axis(const Shape& s, int axis, int64_t& outer, int64_t& n, int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  n = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

Tensor copy_permuted(const Tensor& x, const std::vector<int>& axes) {
  const Shape& xs = x.shape();
  const size_t r = xs.size();
  Shape os(r);
  for (size_t i = 0; i < r; ++i) os[i] = xs[static_cast<size_t>(axes[i])];
  Tensor out = Tensor::uninitialized(os, x.dtype());
  const auto xst = contiguous_strides(xs);
  // stride of output axis i within the input layout
  std::vector<int64_t> map_st(r);
  for (size_t i = 0; i < r; ++i) map_st[i] = xst[static_cast<size_t>(axes[i])];
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>();
    T* po = out.data<T>();
    std::vector<int64_t> idx(r, 0);
    int64_t xoff = 0;
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
      po[i] = px[xoff];
      for (int ax = static_cast<int>(r) - 1; ax >= 0; --ax) {
        const auto u = static_cast<size_t>(ax);
        ++idx[u];
        xoff += map_st[u];
        if (idx[u] < os[u]) break;
        idx[u] = 0;
        xoff -= map_st[u] * os[u];
      }
    }
  });
  return out;
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T x) {
  if (x > T(0)) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Node plumbing
// ---------------------------------------------------------------------------

const Tensor& Var::value() const {
  if (!n_) throw std::logic_error("Var: value() on empty handle");
  return n_->value;
}

const Tensor& Var::grad() const {
  if (!n_) throw std::logic_error("Var: grad() on empty handle");
  return n_->grad;
}

bool Var::requires_grad() const { return n_ && n_->requires_grad; }

Var leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->seq = g_seq.fetch_add(1);
  return Var(std::move(n));
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->requires_grad = any_requires_grad(n->parents);
  if (n->requires_grad) n->backprop = std::move(backprop);
  n->seq = g_seq.fetch_add(1);
  return Var(std::move(n));
}

Tensor& ensure_grad(Node& n) {
  if (!n.grad.defined()) n.grad = Tensor::zeros(n.value.shape(), n.value.dtype());
  return n.grad;
}

void accumulate_grad(Node& n, const Tensor& g) {
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape() || g.dtype() != n.value.dtype())
    throw std::invalid_argument("accumulate_grad: gradient must match value shape and dtype");
  Tensor& dst = ensure_grad(n);
  dispatch_dtype(g.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* pd = dst.data<T>();
    const T* pg = g.data<T>();
    const int64_t m = g.numel();
    for (int64_t i = 0; i < m; ++i) pd[i] += pg[i];
  });
}

void accumulate_grad(const Var& v, const Tensor& g) {
  if (v.node()) accumulate_grad(*v.node(), g);
}

void backward(const Var& root) {
  if (!root.defined()) throw std::logic_error("backward: empty root");
  if (root.numel() != 1) throw std::invalid_argument("backward: root must be a scalar");
  if (!root.requires_grad())
    throw std::logic_error("backward: root does not depend on any trainable input");

  // Collect every node reachable through requires-grad edges.
  std::vector<Node*> nodes;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (const auto& p : n->parents) {
      Node* pn = p.node().get();
      if (pn && pn->requires_grad && seen.insert(pn).second) stack.push_back(pn);
    }
  }

  for (Node* n : nodes) n->grad = Tensor();
  // Creation order is a topological order: parents are created before their
  // consumers, so descending sequence runs children before parents.
  std::sort(nodes.begin(), nodes.end(), [](Node* a, Node* b) { return a->seq > b->seq; });

  root.node()->grad = Tensor::full(root.shape(), 1.0, root.dtype());
  for (Node* n : nodes) {
    if (n->grad.defined() && n->backprop) n->backprop(*n);
  }
}

std::vector<std::string> required_op_suite() {
  return {"add",     "sub",       "mul",     "div_eps", "minimum",    "maximum",  "relu",
          "sigmoid", "tanh",      "softplus", "exp",    "log",        "sqrt",     "sin",
          "cos",     "abs",       "clamp",   "matmul",  "bmm",        "affine",   "reshape",
          "permute", "concat",    "slice",   "gather_rows", "sum",    "mean",     "softmax",
          "layer_norm", "detach", "conv2d",  "upsample2x"};
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  return binary_op(
      a, b, "add", [](auto x, auto y) { return x + y; },
      [](auto, auto, auto, auto g) { return g; }, [](auto, auto, auto, auto g) { return g; });
}

Var sub(const Var& a, const Var& b) {
  return binary_op(
      a, b, "sub", [](auto x, auto y) { return x - y; },
      [](auto, auto, auto, auto g) { return g; }, [](auto, auto, auto, auto g) { return -g; });
}

Var mul(const Var& a, const Var& b) {
  return binary_op(
      a, b, "mul", [](auto x, auto y) { return x * y; },
      [](auto, auto y, auto, auto g) { return g * y; },
      [](auto x, auto, auto, auto g) { return g * x; });
}

Var div_eps(const Var& a, const Var& b, double eps) {
  return binary_op(
      a, b, "div_eps",
      [eps](auto x, auto y) {
        using T = decltype(x);
        return x / (y + T(eps));
      },
      [eps](auto, auto y, auto, auto g) {
        using T = decltype(y);
        return g / (y + T(eps));
      },
      [eps](auto x, auto y, auto, auto g) {
        using T = decltype(y);
        const T d = y + T(eps);
        return -g * x / (d * d);
      });
}

Var minimum(const Var& a, const Var& b) {
  return binary_op(
      a, b, "minimum", [](auto x, auto y) { return x <= y ? x : y; },
      [](auto x, auto y, auto, auto g) { return x <= y ? g : decltype(g)(0); },
      [](auto x, auto y, auto, auto g) { return x <= y ? decltype(g)(0) : g; });
}

Var maximum(const Var& a, const Var& b) {
  return binary_op(
      a, b, "maximum", [](auto x, auto y) { return x >= y ? x : y; },
      [](auto x, auto y, auto, auto g) { return x >= y ? g : decltype(g)(0); },
      [](auto x, auto y, auto, auto g) { return x >= y ? decltype(g)(0) : g; });
}

Var add_scalar(const Var& a, double s) {
  return unary_op(
      a,
      [s](auto x) {
        using T = decltype(x);
        return x + T(s);
      },
      [](auto, auto) { return 1.0; });
}

Var mul_scalar(const Var& a, double s) {
  return unary_op(
      a,
      [s](auto x) {
        using T = decltype(x);
        return x * T(s);
      },
      [s](auto, auto) { return s; });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var relu(const Var& x) {
  return unary_op(
      x, [](auto v) { return v > decltype(v)(0) ? v : decltype(v)(0); },
      [](auto v, auto) { return v > decltype(v)(0) ? 1.0 : 0.0; });
}

Var sigmoid(const Var& x) {
  return unary_op(
      x, [](auto v) { return stable_sigmoid(v); },
      [](auto, auto y) { return double(y) * (1.0 - double(y)); });
}

Var tanh_op(const Var& x) {
  return unary_op(
      x, [](auto v) { return std::tanh(v); },
      [](auto, auto y) { return 1.0 - double(y) * double(y); });
}

Var softplus(const Var& x) {
  return unary_op(
      x, [](auto v) { return stable_softplus(v); },
      [](auto v, auto) { return double(stable_sigmoid(v)); });
}

Var exp_op(const Var& x) {
  return unary_op(
      x, [](auto v) { return std::exp(v); }, [](auto, auto y) { return double(y); });
}

Var log_eps(const Var& x, double eps) {
  return unary_op(
      x,
      [eps](auto v) {
        using T = decltype(v);
        return std::log(v + T(eps));
      },
      [eps](auto v, auto) { return 1.0 / (double(v) + eps); });
}

Var sqrt_eps(const Var& x, double eps) {
  return unary_op(
      x,
      [eps](auto v) {
        using T = decltype(v);
        return std::sqrt(v + T(eps));
      },
      [](auto, auto y) { return 0.5 / double(y); });
}

Var sin_op(const Var& x) {
  return unary_op(
      x, [](auto v) { return std::sin(v); }, [](auto v, auto) { return std::cos(double(v)); });
}

Var cos_op(const Var& x) {
  return unary_op(
      x, [](auto v) { return std::cos(v); }, [](auto v, auto) { return -std::sin(double(v)); });
}

Var abs_op(const Var& x) {
  return unary_op(
      x, [](auto v) { return v < decltype(v)(0) ? -v : v; },
      [](auto v, auto) { return v > decltype(v)(0) ? 1.0 : (v < decltype(v)(0) ? -1.0 : 0.0); });
}

Var clamp(const Var& x, double lo, double hi) {
  return unary_op(
      x,
      [lo, hi](auto v) {
        using T = decltype(v);
        return v < T(lo) ? T(lo) : (v > T(hi) ? T(hi) : v);
      },
      [lo, hi](auto v, auto) { return (double(v) >= lo && double(v) <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  check_same_dtype(a, b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw std::invalid_argument("matmul: expects rank-2 operands");
  const int64_t m = trans_a ? a.shape()[1] : a.shape()[0];
  const int64_t k = trans_a ? a.shape()[0] : a.shape()[1];
  const int64_t kb = trans_b ? b.shape()[1] : b.shape()[0];
  const int64_t n = trans_b ? b.shape()[0] : b.shape()[1];
  if (k != kb)
    throw std::invalid_argument("matmul: inner dimensions disagree (" + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()) + ")");
  Tensor out = Tensor::uninitialized({m, n}, a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    gemm<T>(trans_a, trans_b, m, n, k, a.value().data<T>(), b.value().data<T>(), out.data<T>(),
            false);
  });
  return finish_op(std::move(out), {a, b}, [trans_a, trans_b, m, n, k](Node& nd) {
    const Var& a_ = nd.parents[0];
    const Var& b_ = nd.parents[1];
    dispatch_dtype(nd.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* g = nd.grad.data<T>();
      if (a_.requires_grad()) {
        T* ga = ensure_grad(*a_.node()).data<T>();
        if (!trans_a)  // dA = G * op(B)^T
          gemm<T>(false, !trans_b, m, k, n, g, b_.value().data<T>(), ga, true);
        else  // dA = op(B) * G^T
          gemm<T>(trans_b, true, k, m, n, b_.value().data<T>(), g, ga, true);
      }
      if (b_.requires_grad()) {
        T* gb = ensure_grad(*b_.node()).data<T>();
        if (!trans_b)  // dB = op(A)^T * G
          gemm<T>(!trans_a, false, k, n, m, a_.value().data<T>(), g, gb, true);
        else  // dB = G^T * op(A)
          gemm<T>(true, trans_a, n, k, m, g, a_.value().data<T>(), gb, true);
      }
    });
  });
}

Var bmm(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  check_same_dtype(a, b, "bmm");
  if (a.shape().size() != 3 || b.shape().size() != 3)
    throw std::invalid_argument("bmm: expects rank-3 operands");
  if (a.shape()[0] != b.shape()[0]) throw std::invalid_argument("bmm: batch dims disagree");
  const int64_t bs = a.shape()[0];
  const int64_t m = trans_a ? a.shape()[2] : a.shape()[1];
  const int64_t k = trans_a ? a.shape()[1] : a.shape()[2];
  const int64_t kb = trans_b ? b.shape()[2] : b.shape()[1];
  const int64_t n = trans_b ? b.shape()[1] : b.shape()[2];
  if (k != kb)
    throw std::invalid_argument("bmm: inner dimensions disagree (" + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()) + ")");
  Tensor out = Tensor::uninitialized({bs, m, n}, a.dtype());
  const int64_t stride_a = a.shape()[1] * a.shape()[2];
  const int64_t stride_b = b.shape()[1] * b.shape()[2];
  const int64_t stride_o = m * n;
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.value().data<T>();
    const T* pb = b.value().data<T>();
    T* po = out.data<T>();
    for (int64_t i = 0; i < bs; ++i)
      gemm<T>(trans_a, trans_b, m, n, k, pa + i * stride_a, pb + i * stride_b, po + i * stride_o,
              false);
  });
  return finish_op(
      std::move(out), {a, b},
      [trans_a, trans_b, bs, m, n, k, stride_a, stride_b, stride_o](Node& nd) {
        const Var& a_ = nd.parents[0];
        const Var& b_ = nd.parents[1];
        dispatch_dtype(nd.value.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* g = nd.grad.data<T>();
          const T* pa = a_.value().data<T>();
          const T* pb = b_.value().data<T>();
          T* ga = a_.requires_grad() ? ensure_grad(*a_.node()).data<T>() : nullptr;
          T* gb = b_.requires_grad() ? ensure_grad(*b_.node()).data<T>() : nullptr;
          for (int64_t i = 0; i < bs; ++i) {
            const T* gi = g + i * stride_o;
            if (ga) {
              if (!trans_a)
                gemm<T>(false, !trans_b, m, k, n, gi, pb + i * stride_b, ga + i * stride_a, true);
              else
                gemm<T>(trans_b, true, k, m, n, pb + i * stride_b, gi, ga + i * stride_a, true);
            }
            if (gb) {
              if (!trans_b)
                gemm<T>(!trans_a, false, k, n, m, pa + i * stride_a, gi, gb + i * stride_b, true);
              else
                gemm<T>(true, trans_a, n, k, m, gi, pa + i * stride_a, gb + i * stride_b, true);
            }
          }
        });
      });
}

Var affine(const Var& x, const Var& w, const Var& b) {
  if (w.shape().size() != 2) throw std::invalid_argument("affine: weight must be (in, out)");
  const int64_t in = w.shape()[0];
  const Shape xs = x.shape();
  if (xs.empty() || xs.back() != in)
    throw std::invalid_argument("affine: trailing input dim must equal weight rows");
  Shape out_shape = xs;
  out_shape.back() = w.shape()[1];
  Var x2 = xs.size() == 2 ? x : reshape(x, {-1, in});
  Var y = add(matmul(x2, w), b);
  return xs.size() == 2 ? y : reshape(y, out_shape);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Var reshape(const Var& x, Shape new_shape) {
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (infer >= 0) throw std::invalid_argument("reshape: at most one -1 extent");
      infer = static_cast<int>(i);
    } else {
      known *= new_shape[i];
    }
  }
  if (infer >= 0) {
    if (known <= 0 || x.numel() % known != 0)
      throw std::invalid_argument("reshape: cannot infer extent");
    new_shape[static_cast<size_t>(infer)] = x.numel() / known;
  }
  Tensor out = x.value().reshaped(new_shape);  // shares storage
  return finish_op(std::move(out), {x}, [](Node& n) {
    const Var& px = n.parents[0];
    if (!px.requires_grad()) return;
    accumulate_grad(*px.node(), n.grad.reshaped(px.shape()));
  });
}

Var permute(const Var& x, const std::vector<int>& axes) {
  const size_t r = x.shape().size();
  if (axes.size() != r) throw std::invalid_argument("permute: axes must cover every dim");
  std::vector<bool> used(r, false);
  for (int a : axes) {
    if (a < 0 || a >= static_cast<int>(r) || used[static_cast<size_t>(a)])
      throw std::invalid_argument("permute: invalid axis list");
    used[static_cast<size_t>(a)] = true;
  }
  Tensor out = copy_permuted(x.value(), axes);
  std::vector<int> inverse(r);
  for (size_t i = 0; i < r; ++i) inverse[static_cast<size_t>(axes[i])] = static_cast<int>(i);
  return finish_op(std::move(out), {x}, [inverse](Node& n) {
    const Var& px = n.parents[0];
    if (!px.requires_grad()) return;
    accumulate_grad(*px.node(), copy_permuted(n.grad, inverse));
  });
}

Var concat(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: needs at least one input");
  const int ax = normalize_axis(axis, xs[0].shape().size(), "concat");
  Shape os = xs[0].shape();
  int64_t total = 0;
  for (const auto& v : xs) {
    if (v.dtype() != xs[0].dtype()) throw std::invalid_argument("concat: mixed dtypes");
    if (v.shape().size() != os.size())
      throw std::invalid_argument("concat: rank mismatch");
    for (size_t i = 0; i < os.size(); ++i)
      if (static_cast<int>(i) != ax && v.shape()[i] != os[i])
        throw std::invalid_argument("concat: non-axis extents must match");
    total += v.shape()[static_cast<size_t>(ax)];
  }
  os[static_cast<size_t>(ax)] = total;
  int64_t outer, n_unused, inner;
  split_axis(os, ax, outer, n_unused, inner);
  Tensor out = Tensor::uninitialized(os, xs[0].dtype());
  dispatch_dtype(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* po = out.data<T>();
    const int64_t row = total * inner;
    int64_t off = 0;
    for (const auto& v : xs) {
      const int64_t len = v.shape()[static_cast<size_t>(ax)] * inner;
      const T* pv = v.value().data<T>();
      for (int64_t o = 0; o < outer; ++o)
        std::copy(pv + o * len, pv + (o + 1) * len, po + o * row + off);
      off += len;
    }
  });
  return finish_op(std::move(out), xs, [ax, outer, inner, total](Node& nd) {
    dispatch_dtype(nd.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* g = nd.grad.data<T>();
      const int64_t row = total * inner;
      int64_t off = 0;
      for (auto& p : nd.parents) {
        const int64_t len = p.shape()[static_cast<size_t>(ax)] * inner;
        if (p.requires_grad()) {
          T* gp = ensure_grad(*p.node()).data<T>();
          for (int64_t o = 0; o < outer; ++o) {
            const T* src = g + o * row + off;
            T* dst = gp + o * len;
            for (int64_t i = 0; i < len; ++i) dst[i] += src[i];
          }
        }
        off += len;
      }
    });
  });
}

Var slice(const Var& x, int axis, int64_t start, int64_t len) {
  const int ax = normalize_axis(axis, x.shape().size(), "slice");
  const int64_t extent = x.shape()[static_cast<size_t>(ax)];
  if (start < 0 || len <= 0 || start + len > extent)
    throw std::invalid_argument("slice: range out of bounds");
  Shape os = x.shape();
  os[static_cast<size_t>(ax)] = len;
  int64_t outer, n_unused, inner;
  split_axis(x.shape(), ax, outer, n_unused, inner);
  Tensor out = Tensor::uninitialized(os, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.value().data<T>();
    T* po = out.data<T>();
    const int64_t in_row = extent * inner, out_row = len * inner, off = start * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy(px + o * in_row + off, px + o * in_row + off + out_row, po + o * out_row);
  });
  return finish_op(std::move(out), {x}, [outer, inner, extent, len, start](Node& n) {
    const Var& px = n.parents[0];
    if (!px.requires_grad()) return;
    dispatch_dtype(n.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* g = n.grad.data<T>();
      T* gx = ensure_grad(*px.node()).data<T>();
      const int64_t in_row = extent * inner, out_row = len * inner, off = start * inner;
      for (int64_t o = 0; o < outer; ++o) {
        const T* src = g + o * out_row;
        T* dst = gx + o * in_row + off;
        for (int64_t i = 0; i < out_row; ++i) dst[i] += src[i];
      }
    });
  });
}

Var gather_rows(const Var& x, std::vector<int64_t> indices) {
  if (x.shape().empty()) throw std::invalid_argument("gather_rows: scalar input");
  const int64_t rows = x.shape()[0];
  int64_t inner = 1;
  for (size_t i = 1; i < x.shape().size(); ++i) inner *= x.shape()[i];
  for (int64_t idx : indices)
    if (idx < 0 || idx >= rows) throw std::invalid_argument("gather_rows: index out of range");
  Shape os = x.shape();
  os[0] = static_cast<int64_t>(indices.size());
  Tensor out = Tensor::uninitialized(os, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.value().data<T>();
    T* po = out.data<T>();
    for (size_t i = 0; i < indices.size(); ++i)
      std::copy(px + indices[i] * inner, px + (indices[i] + 1) * inner,
                po + static_cast<int64_t>(i) * inner);
  });
  return finish_op(std::move(out), {x}, [indices = std::move(indices), inner](Node& n) {
    const Var& px = n.parents[0];
    if (!px.requires_grad()) return;
    dispatch_dtype(n.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* g = n.grad.data<T>();
      T* gx = ensure_grad(*px.node()).data<T>();
      for (size_t i = 0; i < indices.size(); ++i) {
        const T* src = g + static_cast<int64_t>(i) * inner;
        T* dst = gx + indices[i] * inner;
        for (int64_t j = 0; j < inner; ++j) dst[j] += src[j];
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Reductions / normalization
// ---------------------------------------------------------------------------

Var sum_all(const Var& x) {
  double acc = 0.0;
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.value().data<T>();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += double(px[i]);
  });
  Tensor out = Tensor::full({1}, acc, x.dtype());
  return finish_op(std::move(out), {x}, [](Node& n) {
    const Var& px = n.parents[0];
    if (!px.requires_grad()) return;
    dispatch_dtype(n.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T g = n.grad.data<T>()[0];
      T* gx = ensure_grad(*px.node()).data<T>();
      const int64_t m = px.numel();
      for (int64_t i = 0; i < m; ++i) gx[i] += g;
    });
  });
}

Var mean_all(const Var& x) { return mul_scalar(sum_all(x), 1.0 / double(x.numel())); }

Var sum_axis(const Var& x, int axis, bool keepdim) {
  const int ax = normalize_axis(axis, x.shape().size(), "sum_axis");
  int64_t outer, n, inner;
  split_axis(x.shape(), ax, outer, n, inner);
  Shape os;
  for (size_t i = 0; i < x.shape().size(); ++i) {
    if (static_cast<int>(i) == ax) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(x.shape()[i]);
    }
  }
  if (os.empty()) os.push_back(1);
  Tensor out = Tensor::uninitialized(os, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.value().data<T>();
    T* po = out.data<T>();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < n; ++j) acc += double(px[(o * n + j) * inner + i]);
        po[o * inner + i] = T(acc);
      }
  });
  return finish_op(std::move(out), {x}, [outer, n, inner](Node& nd) {
    const Var& px = nd.parents[0];
    if (!px.requires_grad()) return;
    dispatch_dtype(nd.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* g = nd.grad.data<T>();
      T* gx = ensure_grad(*px.node()).data<T>();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < n; ++j)
          for (int64_t i = 0; i < inner; ++i) gx[(o * n + j) * inner + i] += g[o * inner + i];
    });
  });
}

Var mean_axis(const Var& x, int axis, bool keepdim) {
  const int ax = normalize_axis(axis, x.shape().size(), "mean_axis");
  return mul_scalar(sum_axis(x, ax, keepdim), 1.0 / double(x.shape()[static_cast<size_t>(ax)]));
}

Var softmax(const Var& x, int axis) {
  const int ax = normalize_axis(axis, x.shape().size(), "softmax");
  const int last = static_cast<int>(x.shape().size()) - 1;
  if (ax != last) {
    // Route through a permutation so the kernel only handles the last axis.
    std::vector<int> fwd;
    for (int i = 0; i < static_cast<int>(x.shape().size()); ++i)
      if (i != ax) fwd.push_back(i);
    fwd.push_back(ax);
    return permute(softmax(permute(x, fwd), -1), [&] {
      std::vector<int> inv(fwd.size());
      for (size_t i = 0; i < fwd.size(); ++i) inv[static_cast<size_t>(fwd[i])] = static_cast<int>(i);
      return inv;
    }());
  }
  const int64_t n = x.shape().back();
  const int64_t rows = x.numel() / n;
  Tensor out = Tensor::uninitialized(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.value().data<T>();
    T* po = out.data<T>();
    for (int64_t r = 0; r < rows; ++r) {
      const T* row = px + r * n;
      T* orow = po + r * n;
      double m = double(row[0]);
      for (int64_t i = 1; i < n; ++i) m = std::max(m, double(row[i]));
      double s = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double e = std::exp(double(row[i]) - m);
        orow[i] = T(e);
        s += e;
      }
      const double inv = 1.0 / s;
      for (int64_t i = 0; i < n; ++i) orow[i] = T(double(orow[i]) * inv);
    }
  });
  return finish_op(std::move(out), {x}, [rows, n](Node& nd) {
    const Var& px = nd.parents[0];
    if (!px.requires_grad()) return;
    dispatch_dtype(nd.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* y = nd.value.data<T>();
      const T* g = nd.grad.data<T>();
      T* gx = ensure_grad(*px.node()).data<T>();
      for (int64_t r = 0; r < rows; ++r) {
        const T* yr = y + r * n;
        const T* gr = g + r * n;
        T* xr = gx + r * n;
        double dot = 0.0;
        for (int64_t i = 0; i < n; ++i) dot += double(gr[i]) * double(yr[i]);
        for (int64_t i = 0; i < n; ++i) xr[i] += T(double(yr[i]) * (double(gr[i]) - dot));
      }
    });
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  check_same_dtype(x, gamma, "layer_norm");
  check_same_dtype(x, beta, "layer_norm");
  const int64_t n = x.shape().back();
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n})
    throw std::invalid_argument("layer_norm: affine params must be rank-1 of the last extent");
  const int64_t rows = x.numel() / n;
  Tensor out = Tensor::uninitialized(x.shape(), x.dtype());
  auto mu = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  auto inv = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.value().data<T>();
    const T* pg = gamma.value().data<T>();
    const T* pb = beta.value().data<T>();
    T* po = out.data<T>();
    for (int64_t r = 0; r < rows; ++r) {
      const T* row = px + r * n;
      double m = 0.0;
      for (int64_t i = 0; i < n; ++i) m += double(row[i]);
      m /= double(n);
      double v = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double d = double(row[i]) - m;
        v += d * d;
      }
      v /= double(n);
      const double is = 1.0 / std::sqrt(v + eps);
      (*mu)[static_cast<size_t>(r)] = m;
      (*inv)[static_cast<size_t>(r)] = is;
      T* orow = po + r * n;
      for (int64_t i = 0; i < n; ++i)
        orow[i] = T((double(row[i]) - m) * is * double(pg[i]) + double(pb[i]));
    }
  });
  return finish_op(std::move(out), {x, gamma, beta}, [rows, n, mu, inv](Node& nd) {
    const Var& x_ = nd.parents[0];
    const Var& gm = nd.parents[1];
    const Var& bt = nd.parents[2];
    dispatch_dtype(nd.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* px = x_.value().data<T>();
      const T* pg = gm.value().data<T>();
      const T* g = nd.grad.data<T>();
      T* gx = x_.requires_grad() ? ensure_grad(*x_.node()).data<T>() : nullptr;
      T* gg = gm.requires_grad() ? ensure_grad(*gm.node()).data<T>() : nullptr;
      T* gb = bt.requires_grad() ? ensure_grad(*bt.node()).data<T>() : nullptr;
      std::vector<double> xhat(static_cast<size_t>(n));
      for (int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * n;
        const T* gr = g + r * n;
        const double m = (*mu)[static_cast<size_t>(r)];
        const double is = (*inv)[static_cast<size_t>(r)];
        double mean_gd = 0.0, mean_gdx = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          xhat[static_cast<size_t>(i)] = (double(xr[i]) - m) * is;
          const double gd = double(gr[i]) * double(pg[i]);
          mean_gd += gd;
          mean_gdx += gd * xhat[static_cast<size_t>(i)];
        }
        mean_gd /= double(n);
        mean_gdx /= double(n);
        for (int64_t i = 0; i < n; ++i) {
          const double xh = xhat[static_cast<size_t>(i)];
          if (gx) {
            const double gd = double(gr[i]) * double(pg[i]);
            gx[r * n + i] += T(is * (gd - mean_gd - xh * mean_gdx));
          }
          if (gg) gg[i] += T(double(gr[i]) * xh);
          if (gb) gb[i] += T(double(gr[i]));
        }
      }
    });
  });
}

Var detach(const Var& x) { return constant(x.value()); }

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

namespace {

// Expands one image (Ci,H,W) into (Ci*kh*kw, Ho*Wo) patch columns.
template <typename T>
void im2col(const T* x, int64_t ci, int64_t h, int64_t w, int kh, int kw, int stride, int pad,
            int64_t ho, int64_t wo, T* col) {
  for (int64_t c = 0; c < ci; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        T* dst = col + ((c * kh + ky) * kw + kx) * (ho * wo);
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            dst[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                    ? x[(c * h + iy) * w + ix]
                                    : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, int64_t ci, int64_t h, int64_t w, int kh, int kw, int stride,
                int pad, int64_t ho, int64_t wo, T* x) {
  for (int64_t c = 0; c < ci; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const T* src = col + ((c * kh + ky) * kw + kx) * (ho * wo);
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) x[(c * h + iy) * w + ix] += src[oy * wo + ox];
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  check_same_dtype(x, w, "conv2d");
  check_same_dtype(x, b, "conv2d");
  if (x.shape().size() != 4 || w.shape().size() != 4)
    throw std::invalid_argument("conv2d: x must be NCHW and w must be (Co,Ci,kh,kw)");
  const int64_t bs = x.shape()[0], ci = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const int64_t co = w.shape()[0];
  const int kh = static_cast<int>(w.shape()[2]), kw = static_cast<int>(w.shape()[3]);
  if (w.shape()[1] != ci) throw std::invalid_argument("conv2d: channel mismatch");
  if (b.shape() != Shape{co}) throw std::invalid_argument("conv2d: bias must be (Co)");
  const int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: empty output");
  const int64_t ckk = ci * kh * kw;
  Tensor out = Tensor::uninitialized({bs, co, ho, wo}, x.dtype());
  // Patch matrices are kept for the backward pass; regenerating them would
  // roughly double the convolution cost.
  auto cols = std::make_shared<std::vector<Tensor>>();
  cols->reserve(static_cast<size_t>(bs));
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.value().data<T>();
    const T* pw = w.value().data<T>();
    const T* pb = b.value().data<T>();
    T* po = out.data<T>();
    for (int64_t i = 0; i < bs; ++i) {
      Tensor col = Tensor::zeros({ckk, ho * wo}, x.dtype());
      T* pc = col.data<T>();
      im2col<T>(px + i * ci * h * wd, ci, h, wd, kh, kw, stride, pad, ho, wo, pc);
      T* oy = po + i * co * ho * wo;
      gemm<T>(false, false, co, ho * wo, ckk, pw, pc, oy, false);
      for (int64_t c = 0; c < co; ++c) {
        const T bias = pb[c];
        T* orow = oy + c * ho * wo;
        for (int64_t j = 0; j < ho * wo; ++j) orow[j] += bias;
      }
      cols->push_back(std::move(col));
    }
  });
  return finish_op(
      std::move(out), {x, w, b},
      [bs, ci, h, wd, co, kh, kw, stride, pad, ho, wo, ckk, cols](Node& nd) {
        const Var& x_ = nd.parents[0];
        const Var& w_ = nd.parents[1];
        const Var& b_ = nd.parents[2];
        dispatch_dtype(nd.value.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* g = nd.grad.data<T>();
          const T* pw = w_.value().data<T>();
          T* gw = w_.requires_grad() ? ensure_grad(*w_.node()).data<T>() : nullptr;
          T* gb = b_.requires_grad() ? ensure_grad(*b_.node()).data<T>() : nullptr;
          T* gx = x_.requires_grad() ? ensure_grad(*x_.node()).data<T>() : nullptr;
          Tensor dcol = Tensor::uninitialized({ckk, ho * wo}, nd.value.dtype());
          T* pdc = dcol.data<T>();
          for (int64_t i = 0; i < bs; ++i) {
            const T* gi = g + i * co * ho * wo;
            const T* pc = (*cols)[static_cast<size_t>(i)].template data<T>();
            if (gw) gemm<T>(false, true, co, ckk, ho * wo, gi, pc, gw, true);
            if (gb)
              for (int64_t c = 0; c < co; ++c) {
                double acc = 0.0;
                for (int64_t j = 0; j < ho * wo; ++j) acc += double(gi[c * ho * wo + j]);
                gb[c] += T(acc);
              }
            if (gx) {
              gemm<T>(true, false, ckk, ho * wo, co, pw, gi, pdc, false);
              col2im_add<T>(pdc, ci, h, wd, kh, kw, stride, pad, ho, wo,
                            gx + i * ci * h * wd);
            }
          }
        });
      });
}

Var upsample2x(const Var& x) {
  if (x.shape().size() != 4) throw std::invalid_argument("upsample2x: expects NCHW");
  const int64_t bs = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  Tensor out = Tensor::uninitialized({bs, c, 2 * h, 2 * w}, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.value().data<T>();
    T* po = out.data<T>();
    for (int64_t n = 0; n < bs * c; ++n)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xx = 0; xx < w; ++xx) {
          const T v = px[(n * h + y) * w + xx];
          T* o = po + (n * 2 * h + 2 * y) * 2 * w + 2 * xx;
          o[0] = v;
          o[1] = v;
          o[2 * w] = v;
          o[2 * w + 1] = v;
        }
  });
  return finish_op(std::move(out), {x}, [bs, c, h, w](Node& nd) {
    const Var& px = nd.parents[0];
    if (!px.requires_grad()) return;
    dispatch_dtype(nd.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* g = nd.grad.data<T>();
      T* gx = ensure_grad(*px.node()).data<T>();
      for (int64_t n = 0; n < bs * c; ++n)
        for (int64_t y = 0; y < h; ++y)
          for (int64_t xx = 0; xx < w; ++xx) {
            const T* o = g + (n * 2 * h + 2 * y) * 2 * w + 2 * xx;
            gx[(n * h + y) * w + xx] += o[0] + o[1] + o[2 * w] + o[2 * w + 1];
          }
    });
  });
}

}  // namespace rrdet::ad
