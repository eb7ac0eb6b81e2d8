#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <set>
#include <vector>

#include "rrdet/autodiff.h"
#include "rrdet/gradcheck.h"
#include "rrdet/rng.h"
#include "rrdet/tensor.h"

using namespace rrdet;
using namespace rrdet::ad;

namespace {

Tensor t64(Shape s, std::vector<double> v) { return Tensor::from_values(std::move(s), v, Dtype::f64); }

Tensor random64(Rng& r, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(s), Dtype::f64);
  double* p = t.data<double>();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = r.uniform(lo, hi);
  return t;
}

void check_close(const Tensor& a, const std::vector<double>& want, double tol = 1e-12) {
  REQUIRE(a.numel() == static_cast<int64_t>(want.size()));
  for (int64_t i = 0; i < a.numel(); ++i)
    CHECK(a.get(i) == doctest::Approx(want[static_cast<size_t>(i)]).epsilon(tol).scale(1.0));
}

}  // namespace

TEST_CASE("splitmix stream matches the reference vector") {
  Rng r(0);
  CHECK(r.next_u64() == 0xE220A8397B1DCDAFull);
  CHECK(r.next_u64() == 0x6E789E6AA1B965F4ull);
  CHECK(r.next_u64() == 0x06C45D188009454Full);
  CHECK(r.next_u64() == 0xF88BB8A8724C81ECull);
  Rng r42(42);
  CHECK(r42.next_u64() == 0xBDD732262FEB6E95ull);
  CHECK(r42.next_u64() == 0x28EFE333B266F103ull);
}

TEST_CASE("uniform draws stay in range and uniform_int hits inclusive bounds") {
  Rng r(7);
  std::set<int64_t> seen;
  for (int i = 0; i < 400; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    const int64_t k = r.uniform_int(-2, 1);
    CHECK(k >= -2);
    CHECK(k <= 1);
    seen.insert(k);
  }
  CHECK(seen.size() == 4);
}

TEST_CASE("normal samples have standard moments") {
  Rng r(123);
  const int n = 20000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(var - 1.0) < 0.1);
}

TEST_CASE("fork leaves the parent untouched and separates streams") {
  Rng parent(99);
  const uint64_t before = parent.state();
  Rng a = parent.fork(1);
  Rng b = parent.fork(2);
  CHECK(parent.state() == before);
  CHECK(a.next_u64() != b.next_u64());
  // same (state, stream) pair must reproduce the same child
  Rng a2 = parent.fork(1);
  CHECK(a2.next_u64() == Rng(Rng::mix(99, 1)).next_u64());
}

TEST_CASE("reshaped tensors alias storage while clones do not") {
  Tensor x = t64({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor v = x.reshaped({3, 2});
  v.set(0, 42.0);
  CHECK(x.get(0) == 42.0);
  Tensor c = x.clone();
  c.set(1, -1.0);
  CHECK(x.get(1) == 2.0);
  CHECK_THROWS_AS(x.reshaped({4, 2}), std::invalid_argument);
}

TEST_CASE("dtype conversion round-trips through f32") {
  Tensor x = t64({3}, {0.5, -2.0, 1024.0});  // exactly representable in f32
  Tensor f = x.to(Dtype::f32);
  CHECK(f.dtype() == Dtype::f32);
  Tensor back = f.to(Dtype::f64);
  check_close(back, {0.5, -2.0, 1024.0});
}

TEST_CASE("softmax of equal logits is uniform") {
  Var x = constant(t64({1, 2}, {0.0, 0.0}));
  check_close(softmax(x, -1).value(), {0.5, 0.5});
  Var y = constant(t64({1, 4}, {3.0, 3.0, 3.0, 3.0}));
  check_close(softmax(y, -1).value(), {0.25, 0.25, 0.25, 0.25});
}

TEST_CASE("softmax rows sum to one and a constant logit shift is a no-op") {
  Rng r(5);
  Var x = constant(random64(r, {4, 7}, -3.0, 3.0));
  Tensor y = softmax(x, -1).value();
  for (int64_t row = 0; row < 4; ++row) {
    double s = 0.0;
    for (int64_t i = 0; i < 7; ++i) s += y.get(row * 7 + i);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  Var shifted = add_scalar(x, 4.0);
  Tensor y2 = softmax(shifted, -1).value();
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y2.get(i) == doctest::Approx(y.get(i)).epsilon(1e-12));
}

TEST_CASE("matmul against a hand-rolled triple loop") {
  Rng r(11);
  const int64_t m = 4, k = 5, n = 3;
  Tensor a = random64(r, {m, k});
  Tensor b = random64(r, {k, n});

  // identity passthrough is exact
  Tensor eye = Tensor::zeros({m, m}, Dtype::f64);
  for (int64_t i = 0; i < m; ++i) eye.set(i * m + i, 1.0);
  Tensor prod = matmul(constant(eye), constant(a)).value();
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(prod.get(i) == a.get(i));

  auto naive = [&](bool ta, bool tb) {
    std::vector<double> c(static_cast<size_t>(m * n), 0.0);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int64_t l = 0; l < k; ++l) {
          const double av = ta ? a.get(l * m + i) : a.get(i * k + l);
          const double bv = tb ? b.get(j * k + l) : b.get(l * n + j);
          acc += av * bv;
        }
        c[static_cast<size_t>(i * n + j)] = acc;
      }
    return c;
  };

  check_close(matmul(constant(a), constant(b)).value(), naive(false, false), 1e-12);
  Tensor at = permute(constant(a), {1, 0}).value();
  Tensor bt = permute(constant(b), {1, 0}).value();
  // reuse the same logical operands through every transpose flag
  {
    Tensor got = matmul(constant(at), constant(b), true, false).value();
    check_close(got, naive(false, false), 1e-12);
  }
  {
    Tensor got = matmul(constant(a), constant(bt), false, true).value();
    check_close(got, naive(false, false), 1e-12);
  }
  {
    Tensor got = matmul(constant(at), constant(bt), true, true).value();
    check_close(got, naive(false, false), 1e-12);
  }
  CHECK_THROWS_AS(matmul(constant(a), constant(a)), std::invalid_argument);
}

TEST_CASE("bmm against per-batch naive products") {
  Rng r(13);
  Tensor a = random64(r, {3, 2, 4});
  Tensor b = random64(r, {3, 4, 5});
  Tensor c = bmm(constant(a), constant(b)).value();
  for (int64_t bi = 0; bi < 3; ++bi)
    for (int64_t i = 0; i < 2; ++i)
      for (int64_t j = 0; j < 5; ++j) {
        double acc = 0.0;
        for (int64_t l = 0; l < 4; ++l)
          acc += a.get((bi * 2 + i) * 4 + l) * b.get((bi * 4 + l) * 5 + j);
        CHECK(c.get((bi * 2 + i) * 5 + j) == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("broadcasting matches explicit expansion in value and gradient") {
  Var a = leaf(t64({2, 3}, {1, 2, 3, 4, 5, 6}), true);
  Var b = leaf(t64({3}, {10, 20, 30}), true);
  Var y = add(a, b);
  check_close(y.value(), {11, 22, 33, 14, 25, 36});
  backward(sum_all(y));
  check_close(a.grad(), {1, 1, 1, 1, 1, 1});
  check_close(b.grad(), {2, 2, 2});  // each entry feeds both rows

  Var c = leaf(t64({2, 1}, {2, 3}), true);
  Var d = leaf(t64({1, 3}, {1, 2, 4}), true);
  Var p = mul(c, d);
  check_close(p.value(), {2, 4, 8, 3, 6, 12});
  backward(sum_all(p));
  check_close(c.grad(), {7, 7});
  check_close(d.grad(), {5, 5, 5});

  CHECK_THROWS_AS(add(constant(t64({2, 3}, {1, 2, 3, 4, 5, 6})), constant(t64({2}, {1, 2}))),
                  std::invalid_argument);
}

TEST_CASE("layer_norm of a constant row is zero before affine") {
  Var x = constant(Tensor::full({2, 5}, 3.7, Dtype::f64));
  Var gamma = constant(Tensor::full({5}, 1.0, Dtype::f64));
  Var beta = constant(Tensor::zeros({5}, Dtype::f64));
  Tensor y = layer_norm(x, gamma, beta).value();
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.get(i) == 0.0);
}

TEST_CASE("layer_norm matches a hand evaluation") {
  const double eps = 1e-6;
  Var x = constant(t64({1, 4}, {1, 2, 3, 4}));
  Var gamma = constant(t64({4}, {2, 2, 2, 2}));
  Var beta = constant(t64({4}, {1, 1, 1, 1}));
  Tensor y = layer_norm(x, gamma, beta, eps).value();
  const double mu = 2.5, var = 1.25;
  const double is = 1.0 / std::sqrt(var + eps);
  for (int64_t i = 0; i < 4; ++i) {
    const double want = (static_cast<double>(i + 1) - mu) * is * 2.0 + 1.0;
    CHECK(y.get(i) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("square function gradient agrees with finite differences to 1e-6") {
  auto res = check_gradient([](const Var& v) { return sum_all(mul(v, v)); },
                            Tensor::scalar(3.0, Dtype::f64), 1e-5, 1e-6);
  CHECK(res.pass);
  CHECK(res.max_rel_err < 1e-6);

  Var x = leaf(Tensor::scalar(3.0, Dtype::f64), true);
  backward(sum_all(mul(x, x)));
  CHECK(x.grad().get(0) == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("a value used twice accumulates both gradient paths") {
  Var x = leaf(t64({3}, {1, 2, 3}), true);
  backward(sum_all(mul(x, x)));
  check_close(x.grad(), {2, 4, 6});
}

TEST_CASE("detach blocks the gradient") {
  Var x = leaf(t64({3}, {1, 2, 3}), true);
  backward(sum_all(mul(x, detach(x))));
  check_close(x.grad(), {1, 2, 3});  // not 2x
}

TEST_CASE("backward clears stale gradients instead of accumulating across calls") {
  Var x = leaf(t64({2}, {1, 2}), true);
  backward(sum_all(mul(x, x)));
  check_close(x.grad(), {2, 4});
  backward(sum_all(mul(x, x)));
  check_close(x.grad(), {2, 4});
}

TEST_CASE("backward requires a scalar root that depends on a trainable leaf") {
  Var x = leaf(t64({2}, {1, 2}), true);
  CHECK_THROWS_AS(backward(mul(x, x)), std::invalid_argument);
  Var c = constant(t64({2}, {1, 2}));
  CHECK_THROWS_AS(backward(sum_all(mul(c, c))), std::logic_error);
}

TEST_CASE("conv2d against direct convolution") {
  Rng r(17);
  const int64_t ci = 2, co = 3, h = 5, w = 6;
  Tensor x = random64(r, {1, ci, h, w});
  Tensor wt = random64(r, {co, ci, 3, 3});
  Tensor bias = random64(r, {co});
  for (int stride : {1, 2}) {
    const int pad = 1;
    Tensor y = conv2d(constant(x), constant(wt), constant(bias), stride, pad).value();
    const int64_t ho = (h + 2 * pad - 3) / stride + 1;
    const int64_t wo = (w + 2 * pad - 3) / stride + 1;
    REQUIRE(y.shape() == Shape({1, co, ho, wo}));
    for (int64_t oc = 0; oc < co; ++oc)
      for (int64_t oy = 0; oy < ho; ++oy)
        for (int64_t ox = 0; ox < wo; ++ox) {
          double acc = bias.get(oc);
          for (int64_t ic = 0; ic < ci; ++ic)
            for (int64_t ky = 0; ky < 3; ++ky)
              for (int64_t kx = 0; kx < 3; ++kx) {
                const int64_t iy = oy * stride - pad + ky;
                const int64_t ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += x.get((ic * h + iy) * w + ix) *
                       wt.get(((oc * ci + ic) * 3 + ky) * 3 + kx);
              }
          CHECK(y.get((oc * ho + oy) * wo + ox) == doctest::Approx(acc).epsilon(1e-12));
        }
  }
}

TEST_CASE("upsample2x repeats pixels and sums gradients over each block") {
  Var x = leaf(t64({1, 1, 2, 2}, {1, 2, 3, 4}), true);
  Var y = upsample2x(x);
  check_close(y.value(), {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
  backward(sum_all(y));
  check_close(x.grad(), {4, 4, 4, 4});
}

TEST_CASE("concat, slice and gather_rows round-trip") {
  Var a = constant(t64({2, 2}, {1, 2, 3, 4}));
  Var b = constant(t64({2, 3}, {5, 6, 7, 8, 9, 10}));
  Var cat = concat({a, b}, 1);
  check_close(cat.value(), {1, 2, 5, 6, 7, 3, 4, 8, 9, 10});
  check_close(slice(cat, 1, 0, 2).value(), {1, 2, 3, 4});
  check_close(slice(cat, 1, 2, 3).value(), {5, 6, 7, 8, 9, 10});
  check_close(gather_rows(cat, {1, 1, 0}).value(),
              {3, 4, 8, 9, 10, 3, 4, 8, 9, 10, 1, 2, 5, 6, 7});
  Var axis0 = concat({a, a}, 0);
  check_close(axis0.value(), {1, 2, 3, 4, 1, 2, 3, 4});
}

TEST_CASE("permute and reshape move data as expected") {
  Var x = constant(t64({2, 3}, {1, 2, 3, 4, 5, 6}));
  check_close(permute(x, {1, 0}).value(), {1, 4, 2, 5, 3, 6});
  Var y = constant(t64({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
  // out[a,b,c] = y[b,c,a]: output axis i reads input axis axes[i]
  check_close(permute(y, {2, 0, 1}).value(), {1, 3, 5, 7, 2, 4, 6, 8});
  check_close(reshape(x, {3, 2}).value(), {1, 2, 3, 4, 5, 6});
  check_close(reshape(x, {-1}).value(), {1, 2, 3, 4, 5, 6});
}

TEST_CASE("reductions against hand oracles") {
  Var x = constant(t64({2, 3}, {1, 2, 3, 4, 5, 6}));
  CHECK(sum_all(x).value().get(0) == 21.0);
  CHECK(mean_all(x).value().get(0) == doctest::Approx(3.5));
  check_close(sum_axis(x, 0).value(), {5, 7, 9});
  check_close(sum_axis(x, 1).value(), {6, 15});
  check_close(mean_axis(x, 1).value(), {2, 5});
  CHECK(sum_axis(x, 0, true).value().shape() == Shape({1, 3}));
}

TEST_CASE("elementwise math matches the standard library") {
  Var x = constant(t64({4}, {-1.5, -0.25, 0.5, 2.0}));
  check_close(relu(x).value(), {0, 0, 0.5, 2.0});
  check_close(abs_op(x).value(), {1.5, 0.25, 0.5, 2.0});
  check_close(clamp(x, -1.0, 1.0).value(), {-1.0, -0.25, 0.5, 1.0});
  for (int64_t i = 0; i < 4; ++i) {
    const double v = x.value().get(i);
    CHECK(sigmoid(x).value().get(i) == doctest::Approx(1.0 / (1.0 + std::exp(-v))));
    CHECK(tanh_op(x).value().get(i) == doctest::Approx(std::tanh(v)));
    CHECK(softplus(x).value().get(i) == doctest::Approx(std::log1p(std::exp(v))));
    CHECK(exp_op(x).value().get(i) == doctest::Approx(std::exp(v)));
    CHECK(sin_op(x).value().get(i) == doctest::Approx(std::sin(v)));
    CHECK(cos_op(x).value().get(i) == doctest::Approx(std::cos(v)));
  }
  // the guarded denominator keeps division by zero finite
  Var num = constant(t64({1}, {3.0}));
  Var den = constant(t64({1}, {0.0}));
  CHECK(div_eps(num, den, 1e-6).value().get(0) == doctest::Approx(3.0e6));
}

TEST_CASE("finite differences pass for the whole primitive suite") {
  const auto checks = run_op_suite_checks();
  // every declared primitive must be covered by exactly one check
  std::set<std::string> declared;
  for (const auto& name : required_op_suite()) declared.insert(name);
  std::set<std::string> covered;
  for (const auto& c : checks) covered.insert(c.op);
  CHECK(declared == covered);
  for (const auto& c : checks) {
    INFO(c.op << ": max rel err " << c.result.max_rel_err << " at " << c.result.worst);
    CHECK(c.result.pass);
    CHECK(c.result.coords_checked > 0);
  }
}

namespace {

// Small pipeline exercising GEMM, normalization, softmax and reductions;
// returns every byte the run produced (values and gradients).
std::vector<float> run_small_graph(uint64_t seed) {
  Rng r(seed);
  auto mk = [&](Shape s) {
    Tensor t = Tensor::zeros(std::move(s), Dtype::f32);
    float* p = t.data<float>();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<float>(r.normal() * 0.1);
    return t;
  };
  Var x = leaf(mk({4, 8}), true);
  Var w1 = leaf(mk({8, 8}), true);
  Var b1 = leaf(mk({8}), true);
  Var gamma = leaf(Tensor::full({8}, 1.0, Dtype::f32), true);
  Var beta = leaf(Tensor::zeros({8}, Dtype::f32), true);
  Var h = relu(affine(x, w1, b1));
  Var n = layer_norm(h, gamma, beta);
  Var sm = softmax(matmul(n, n, false, true), -1);
  Var loss = mean_all(mul(sm, sm));
  backward(loss);
  std::vector<float> bytes;
  auto grab = [&bytes](const Tensor& t) {
    const float* p = t.data<float>();
    bytes.insert(bytes.end(), p, p + t.numel());
  };
  grab(loss.value());
  grab(x.grad());
  grab(w1.grad());
  grab(gamma.grad());
  return bytes;
}

}  // namespace

TEST_CASE("graph evaluation is bit-deterministic for a fixed seed") {
  const auto a = run_small_graph(2024);
  const auto b = run_small_graph(2024);
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  const auto c = run_small_graph(2025);
  CHECK(std::memcmp(a.data(), c.data(), a.size() * sizeof(float)) != 0);
}
