#include "rrdet/gradcheck.h"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "rrdet/rng.h"

namespace rrdet::ad {

GradCheckResult check_gradient(const std::function<Var(const std::vector<Var>&)>& fn,
                               const std::vector<Tensor>& inits, double eps, double tol,
                               int64_t max_coords_per_param, uint64_t subsample_seed) {
  if (inits.empty()) throw std::invalid_argument("check_gradient: no parameters");

  std::vector<Var> leaves;
  leaves.reserve(inits.size());
  for (const auto& t : inits) leaves.push_back(leaf(t.clone(), true));

  Var loss = fn(leaves);
  if (loss.numel() != 1) throw std::invalid_argument("check_gradient: fn must return a scalar");
  backward(loss);

  std::vector<Tensor> analytic;
  analytic.reserve(leaves.size());
  for (const auto& l : leaves)
    analytic.push_back(l.grad().defined() ? l.grad().clone()
                                          : Tensor::zeros(l.shape(), l.dtype()));

  GradCheckResult res;
  res.tol = tol;
  Rng pick(subsample_seed);

  for (size_t p = 0; p < leaves.size(); ++p) {
    const int64_t n = leaves[p].numel();
    std::vector<int64_t> coords;
    if (max_coords_per_param >= 0 && n > max_coords_per_param) {
      Rng r = pick.fork(static_cast<uint64_t>(p));
      std::vector<int64_t> all(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      for (int64_t i = 0; i < max_coords_per_param; ++i) {
        const int64_t j = r.uniform_int(i, n - 1);
        std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
        coords.push_back(all[static_cast<size_t>(i)]);
      }
    } else {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    }

    Tensor& val = leaves[p].node()->value;
    for (int64_t i : coords) {
      const double x0 = val.get(i);
      val.set(i, x0 + eps);
      const double fp = fn(leaves).value().get(0);
      val.set(i, x0 - eps);
      const double fm = fn(leaves).value().get(0);
      val.set(i, x0);

      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[p].get(i);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++res.coords_checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        std::ostringstream os;
        os << "param " << p << " flat index " << i << ": analytic " << a << ", numeric "
           << numeric;
        res.worst = os.str();
      }
    }
  }

  res.pass = res.max_rel_err <= tol;
  return res;
}

GradCheckResult check_gradient(const std::function<Var(const Var&)>& fn, const Tensor& init,
                               double eps, double tol) {
  return check_gradient(
      [&fn](const std::vector<Var>& vs) { return fn(vs[0]); }, std::vector<Tensor>{init}, eps,
      tol);
}

namespace {

Tensor rand_t(Rng& r, Shape shape, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(shape), Dtype::f64);
  double* p = t.data<double>();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = r.uniform(lo, hi);
  return t;
}

// Values bounded away from zero, mixed signs: safe for relu/abs kinks.
Tensor rand_signed(Rng& r, Shape shape, double lo = 0.2, double hi = 1.5) {
  Tensor t = rand_t(r, std::move(shape), lo, hi);
  double* p = t.data<double>();
  for (int64_t i = 0; i < t.numel(); ++i)
    if (r.uniform() < 0.5) p[i] = -p[i];
  return t;
}

using Fn = std::function<Var(const std::vector<Var>&)>;

GradCheckResult fd(const Fn& fn, std::vector<Tensor> inits) {
  return check_gradient(fn, inits, 1e-5, 1e-4);
}

// detach must pass values through unchanged while blocking the gradient.
GradCheckResult detach_check() {
  Rng r(77);
  Tensor x0 = rand_signed(r, {3, 4});
  Var x = leaf(x0.clone(), true);
  Var loss = sum_all(mul(x, detach(x)));
  backward(loss);
  GradCheckResult res;
  res.tol = 1e-12;
  const double* g = x.grad().data<double>();
  const double* v = x0.data<double>();
  for (int64_t i = 0; i < x0.numel(); ++i) {
    // d/dx of x * stop_grad(x) is stop_grad(x), not 2x.
    const double rel = std::abs(g[i] - v[i]) / std::max(std::abs(v[i]), 1e-8);
    res.max_rel_err = std::max(res.max_rel_err, rel);
    ++res.coords_checked;
  }
  res.pass = res.max_rel_err <= res.tol;
  return res;
}

}  // namespace

std::vector<OpCheck> run_op_suite_checks() {
  std::vector<OpCheck> out;
  auto push = [&out](const std::string& name, GradCheckResult r) {
    out.push_back({name, std::move(r)});
  };
  Rng r(1234);

  push("add", fd([](const std::vector<Var>& v) { return sum_all(mul(add(v[0], v[1]), v[2])); },
                 {rand_signed(r, {2, 3}), rand_signed(r, {3}), rand_signed(r, {2, 3})}));
  push("sub", fd([](const std::vector<Var>& v) { return sum_all(mul(sub(v[0], v[1]), v[2])); },
                 {rand_signed(r, {2, 3}), rand_signed(r, {2, 1}), rand_signed(r, {2, 3})}));
  push("mul", fd([](const std::vector<Var>& v) { return sum_all(mul(mul(v[0], v[1]), v[2])); },
                 {rand_signed(r, {2, 3, 2}), rand_signed(r, {3, 1}), rand_signed(r, {2})}));
  push("div_eps",
       fd([](const std::vector<Var>& v) { return sum_all(div_eps(v[0], v[1])); },
          {rand_signed(r, {2, 3}), rand_t(r, {2, 3}, 0.5, 2.0)}));
  push("minimum", fd(
                      [](const std::vector<Var>& v) {
                        // keep operands >= 0.1 apart so the kink stays away
                        Var b = add_scalar(v[0], 0.3);
                        return sum_all(mul(minimum(v[0], b), v[1]));
                      },
                      {rand_signed(r, {3, 3}), rand_signed(r, {3, 3})}));
  push("maximum", fd(
                      [](const std::vector<Var>& v) {
                        Var b = add_scalar(v[0], -0.3);
                        return sum_all(mul(maximum(v[0], b), v[1]));
                      },
                      {rand_signed(r, {3, 3}), rand_signed(r, {3, 3})}));
  push("relu", fd([](const std::vector<Var>& v) { return sum_all(mul(relu(v[0]), v[1])); },
                  {rand_signed(r, {4, 4}), rand_signed(r, {4, 4})}));
  push("sigmoid", fd([](const std::vector<Var>& v) { return sum_all(sigmoid(v[0])); },
                     {rand_signed(r, {3, 4})}));
  push("tanh", fd([](const std::vector<Var>& v) { return sum_all(tanh_op(v[0])); },
                  {rand_signed(r, {3, 4})}));
  push("softplus", fd([](const std::vector<Var>& v) { return sum_all(softplus(v[0])); },
                      {rand_signed(r, {3, 4})}));
  push("exp", fd([](const std::vector<Var>& v) { return sum_all(exp_op(v[0])); },
                 {rand_signed(r, {3, 4})}));
  push("log", fd([](const std::vector<Var>& v) { return sum_all(log_eps(v[0])); },
                 {rand_t(r, {3, 4}, 0.3, 2.0)}));
  push("sqrt", fd([](const std::vector<Var>& v) { return sum_all(sqrt_eps(v[0])); },
                  {rand_t(r, {3, 4}, 0.3, 2.0)}));
  push("sin", fd([](const std::vector<Var>& v) { return sum_all(mul(sin_op(v[0]), v[1])); },
                 {rand_signed(r, {3, 4}), rand_signed(r, {3, 4})}));
  push("cos", fd([](const std::vector<Var>& v) { return sum_all(mul(cos_op(v[0]), v[1])); },
                 {rand_signed(r, {3, 4}), rand_signed(r, {3, 4})}));
  push("abs", fd([](const std::vector<Var>& v) { return sum_all(abs_op(v[0])); },
                 {rand_signed(r, {3, 4})}));
  push("clamp", fd([](const std::vector<Var>& v) { return sum_all(clamp(v[0], -1.0, 1.0)); },
                   {rand_signed(r, {4, 4})}));  // values in +-[0.2,1.5], none near +-1 +- 1e-5

  push("matmul", fd(
                     [](const std::vector<Var>& v) {
                       Var s = sum_all(matmul(v[0], v[1]));
                       s = add(s, sum_all(matmul(v[2], v[1], true, false)));
                       s = add(s, sum_all(matmul(v[0], v[3], false, true)));
                       s = add(s, sum_all(matmul(v[2], v[3], true, true)));
                       return s;
                     },
                     {rand_signed(r, {3, 4}), rand_signed(r, {4, 5}), rand_signed(r, {4, 3}),
                      rand_signed(r, {5, 4})}));
  push("bmm", fd(
                  [](const std::vector<Var>& v) {
                    Var s = sum_all(bmm(v[0], v[1]));
                    s = add(s, sum_all(bmm(v[2], v[1], true, false)));
                    s = add(s, sum_all(bmm(v[0], v[3], false, true)));
                    s = add(s, sum_all(bmm(v[2], v[3], true, true)));
                    return s;
                  },
                  {rand_signed(r, {2, 3, 4}), rand_signed(r, {2, 4, 5}),
                   rand_signed(r, {2, 4, 3}), rand_signed(r, {2, 5, 4})}));
  push("affine",
       fd([](const std::vector<Var>& v) { return sum_all(sigmoid(affine(v[0], v[1], v[2]))); },
          {rand_signed(r, {2, 3, 4}), rand_signed(r, {4, 5}), rand_signed(r, {5})}));

  push("reshape",
       fd([](const std::vector<Var>& v) { return sum_all(mul(reshape(v[0], {3, 8}), v[1])); },
          {rand_signed(r, {2, 3, 4}), rand_signed(r, {3, 8})}));
  push("permute",
       fd([](const std::vector<Var>& v) {
         return sum_all(mul(permute(v[0], {2, 0, 1}), v[1]));
       },
          {rand_signed(r, {2, 3, 4}), rand_signed(r, {4, 2, 3})}));
  push("concat", fd(
                     [](const std::vector<Var>& v) {
                       return sum_all(mul(concat({v[0], v[1]}, 1), v[2]));
                     },
                     {rand_signed(r, {2, 3}), rand_signed(r, {2, 2}), rand_signed(r, {2, 5})}));
  push("slice",
       fd([](const std::vector<Var>& v) { return sum_all(mul(slice(v[0], 1, 1, 2), v[1])); },
          {rand_signed(r, {3, 4}), rand_signed(r, {3, 2})}));
  push("gather_rows", fd(
                          [](const std::vector<Var>& v) {
                            // repeated index exercises scatter-add accumulation
                            return sum_all(mul(gather_rows(v[0], {0, 2, 2, 1}), v[1]));
                          },
                          {rand_signed(r, {3, 4}), rand_signed(r, {4, 4})}));

  push("sum", fd(
                  [](const std::vector<Var>& v) {
                    Var s = sum_all(mul(sum_axis(v[0], 1), v[1]));
                    return add(s, sum_all(mul(sum_axis(v[0], 0, true), v[2])));
                  },
                  {rand_signed(r, {2, 3, 4}), rand_signed(r, {2, 4}),
                   rand_signed(r, {1, 3, 4})}));
  push("mean", fd(
                   [](const std::vector<Var>& v) {
                     Var s = sum_all(mul(mean_axis(v[0], -1), v[1]));
                     return add(s, mean_all(v[0]));
                   },
                   {rand_signed(r, {2, 3, 4}), rand_signed(r, {2, 3})}));
  push("softmax", fd(
                      [](const std::vector<Var>& v) {
                        Var s = sum_all(mul(softmax(v[0], -1), v[1]));
                        return add(s, sum_all(mul(softmax(v[0], 1), v[1])));
                      },
                      {rand_signed(r, {2, 3, 4}), rand_signed(r, {2, 3, 4})}));
  push("layer_norm",
       fd(
           [](const std::vector<Var>& v) {
             return sum_all(mul(layer_norm(v[0], v[1], v[2]), v[3]));
           },
           {rand_signed(r, {3, 5}), rand_t(r, {5}, 0.5, 1.5), rand_signed(r, {5}),
            rand_signed(r, {3, 5})}));
  push("detach", detach_check());

  push("conv2d", fd(
                     [](const std::vector<Var>& v) {
                       Var y1 = conv2d(v[0], v[1], v[2], 1, 1);
                       Var y2 = conv2d(v[0], v[1], v[2], 2, 1);
                       return add(sum_all(mul(y1, v[3])), sum_all(tanh_op(y2)));
                     },
                     {rand_signed(r, {1, 2, 5, 5}), rand_signed(r, {3, 2, 3, 3}),
                      rand_signed(r, {3}), rand_signed(r, {1, 3, 5, 5})}));
  push("upsample2x",
       fd([](const std::vector<Var>& v) { return sum_all(mul(upsample2x(v[0]), v[1])); },
          {rand_signed(r, {1, 2, 3, 3}), rand_signed(r, {1, 2, 6, 6})}));

  return out;
}

}  // namespace rrdet::ad
