#include "rrdet/posenc.h"

#include <cmath>
#include <stdexcept>

namespace rrdet::pe {

using ad::Var;

Var sinusoidal_embed(const Var& values, const SinusoidalConfig& cfg) {
  if (cfg.embed_dim <= 0 || cfg.embed_dim % 2 != 0)
    throw std::invalid_argument("sinusoidal_embed: embed_dim must be positive and even");
  if (cfg.temperature <= 0) throw std::invalid_argument("sinusoidal_embed: temperature <= 0");
  if (values.shape().size() != 1)
    throw std::invalid_argument("sinusoidal_embed: expected a rank-1 value tensor");
  const int64_t m = values.shape()[0];
  const int64_t half = cfg.embed_dim / 2;
  Tensor freqs = Tensor::zeros({half}, values.dtype());
  for (int64_t i = 0; i < half; ++i) {
    const double denom =
        std::pow(cfg.temperature, 2.0 * static_cast<double>(i) / static_cast<double>(cfg.embed_dim));
    freqs.set(i, 2.0 * M_PI / denom);
  }
  Var args = ad::mul(ad::reshape(values, {m, 1}), ad::constant(freqs));  // (M, half)
  Var s = ad::reshape(ad::sin_op(args), {m, half, 1});
  Var c = ad::reshape(ad::cos_op(args), {m, half, 1});
  return ad::reshape(ad::concat({s, c}, 2), {m, cfg.embed_dim});  // interleaved
}

BoxPE::BoxPE(ParamRegistry& reg, const std::string& prefix, int64_t c, Rng& rng) : c_(c) {
  if (c % 4 != 0) throw std::invalid_argument("BoxPE: channels must be divisible by 4");
  Rng r1 = rng.fork(1), r2 = rng.fork(2);
  fc1_ = Linear(reg, prefix + ".fc1", 2 * c, c, r1);
  fc2_ = Linear(reg, prefix + ".fc2", c, c, r2);
}

Var BoxPE::forward(const Var& boxes) const {
  if (boxes.shape().size() != 2 || boxes.shape()[1] != 4)
    throw std::invalid_argument("BoxPE: expected (N,4) boxes");
  const int64_t n = boxes.shape()[0];
  const SinusoidalConfig cfg{c_ / 2, 10000.0};
  std::vector<Var> embeds;
  embeds.reserve(4);
  for (int64_t i = 0; i < 4; ++i)
    embeds.push_back(sinusoidal_embed(ad::reshape(ad::slice(boxes, 1, i, 1), {n}), cfg));
  Var x = ad::concat(embeds, 1);  // (N, 2c)
  return fc2_(ad::relu(fc1_(x)));
}

GeometryHeads::GeometryHeads(ParamRegistry& reg, const std::string& prefix, int64_t c, Rng& rng) {
  if (c % 4 != 0) throw std::invalid_argument("GeometryHeads: channels must be divisible by 4");
  Rng r1 = rng.fork(1), r2 = rng.fork(2), r3 = rng.fork(3), r4 = rng.fork(4);
  c1_ = Linear(reg, prefix + ".center.fc1", c, c, r1);
  c2_ = Linear(reg, prefix + ".center.fc2", c, c, r2);
  s1_ = Linear(reg, prefix + ".size.fc1", c, c / 4, r3);
  s2_ = Linear(reg, prefix + ".size.fc2", c / 4, 2, r4);
}

std::pair<Var, Var> GeometryHeads::forward(const Var& q) const {
  Var q_c = c2_(ad::relu(c1_(q)));
  Var q_s = ad::softplus(s2_(ad::relu(s1_(q))));
  return {q_c, q_s};
}

Var kernel_pe(const Var& q_c, const Var& q_s, const Var& boxes) {
  if (q_c.shape().size() != 2) throw std::invalid_argument("kernel_pe: q_c must be (N,c)");
  const int64_t n = q_c.shape()[0];
  const int64_t c = q_c.shape()[1];
  if (c % 2 != 0) throw std::invalid_argument("kernel_pe: channels must be even");
  if (q_s.shape() != Shape{n, 2}) throw std::invalid_argument("kernel_pe: q_s must be (N,2)");
  if (boxes.shape() != Shape{n, 4})
    throw std::invalid_argument("kernel_pe: boxes must be (N,4)");
  const SinusoidalConfig cfg{c / 2, 10000.0};
  Var guard = ad::constant(Tensor::full({1}, 1e-6, boxes.dtype()));

  auto branch = [&](int64_t coord_col, int64_t size_col, int64_t ref_col, const Var& half_q) {
    Var coord = ad::reshape(ad::slice(boxes, 1, coord_col, 1), {n});
    Var side = ad::maximum(ad::slice(boxes, 1, size_col, 1), guard);      // (N,1)
    Var ref = ad::slice(q_s, 1, ref_col, 1);                              // (N,1)
    Var scale = ad::div_eps(ref, side, 0.0);
    return ad::mul(ad::mul(sinusoidal_embed(coord, cfg), half_q), scale);  // (N, c/2)
  };

  Var qx = ad::slice(q_c, 1, 0, c / 2);
  Var qy = ad::slice(q_c, 1, c / 2, c / 2);
  return ad::concat({branch(0, 2, 0, qx), branch(1, 3, 1, qy)}, 1);
}

Var roi_element_pe(const Var& coords, int64_t c) {
  if (coords.shape().size() != 3 || coords.shape()[2] != 2)
    throw std::invalid_argument("roi_element_pe: expected (N,G,2) sample centers");
  if (c % 2 != 0) throw std::invalid_argument("roi_element_pe: channels must be even");
  const int64_t n = coords.shape()[0];
  const int64_t g = coords.shape()[1];
  const SinusoidalConfig cfg{c / 2, 10000.0};
  Var x = ad::reshape(ad::slice(coords, 2, 0, 1), {n * g});
  Var y = ad::reshape(ad::slice(coords, 2, 1, 1), {n * g});
  Var ex = ad::reshape(sinusoidal_embed(x, cfg), {n, g, c / 2});
  Var ey = ad::reshape(sinusoidal_embed(y, cfg), {n, g, c / 2});
  return ad::concat({ex, ey}, 2);
}

Tensor static_centerness_values() {
  Tensor t = Tensor::zeros({7, 7}, Dtype::f64);
  for (int64_t y = 0; y < 7; ++y)
    for (int64_t x = 0; x < 7; ++x) {
      const double rx = static_cast<double>(std::min(x, 6 - x)) /
                        static_cast<double>(std::max(x, 6 - x));
      const double ry = static_cast<double>(std::min(y, 6 - y)) /
                        static_cast<double>(std::max(y, 6 - y));
      t.set(y * 7 + x, std::sqrt(rx * ry));
    }
  return t;
}

CenternessMask::CenternessMask(ParamRegistry& reg, const std::string& prefix, MaskVariant variant,
                               int64_t c, Rng& rng)
    : variant_(variant), dt_(reg.dtype()) {
  switch (variant_) {
    case MaskVariant::kStatic:
      values_ = ad::constant(static_centerness_values().reshaped({1, 49}).to(dt_));
      break;
    case MaskVariant::kLearnable:
      values_ = reg.create(prefix + ".grid", static_centerness_values().reshaped({1, 49}));
      break;
    case MaskVariant::kAdjust: {
      Rng r = rng.fork(1);
      offset_ = Linear(reg, prefix + ".offset", c, 2, r);
      break;
    }
  }
}

Var CenternessMask::forward(const Var* q) const {
  if (variant_ == MaskVariant::kStatic) return values_;
  if (variant_ == MaskVariant::kLearnable) return ad::clamp(values_, 0.0, 1.0);

  if (q == nullptr) throw std::invalid_argument("centerness adjust variant needs q");
  Var delta = ad::mul_scalar(ad::tanh_op(offset_(*q)), 3.0);  // (N,2) in (-3,3)
  Var dx = ad::slice(delta, 1, 0, 1);                         // (N,1)
  Var dy = ad::slice(delta, 1, 1, 1);
  Tensor gx = Tensor::zeros({1, 49}, dt_), gy = Tensor::zeros({1, 49}, dt_);
  for (int64_t i = 0; i < 49; ++i) {
    gx.set(i, static_cast<double>(i % 7));
    gy.set(i, static_cast<double>(i / 7));
  }
  auto axis_ratio = [&](const Var& grid, const Var& d) {
    // peak moves to 3 + d: evaluate the prior at u = coordinate - d
    Var u = ad::sub(grid, d);                                  // (N,49)
    Var mirrored = ad::sub(ad::constant(Tensor::full({1}, 6.0, dt_)), u);
    Var ratio = ad::div_eps(ad::minimum(u, mirrored), ad::maximum(u, mirrored), 0.0);
    return ad::clamp(ratio, 0.0, 1.0);
  };
  Var prod = ad::mul(axis_ratio(ad::constant(gx), dx), axis_ratio(ad::constant(gy), dy));
  return ad::clamp(ad::sqrt_eps(prod, 1e-12), 0.0, 1.0);
}

std::pair<Var, Var> modulate_with_centerness(const Var& f, const Var& k, const Var& m) {
  if (f.shape().size() != 3) throw std::invalid_argument("modulate: f must be (N,G,c)");
  if (k.shape().size() != 3) throw std::invalid_argument("modulate: k must be (N,c,d)");
  if (m.shape().size() != 2) throw std::invalid_argument("modulate: m must be (1|N,G)");
  const int64_t n = f.shape()[0], g = f.shape()[1];
  const int64_t c = k.shape()[1], d = k.shape()[2];
  if (f.shape()[2] != c) throw std::invalid_argument("modulate: channel mismatch");
  if (m.shape()[1] != g || (m.shape()[0] != 1 && m.shape()[0] != n))
    throw std::invalid_argument("modulate: mask rows must broadcast over proposals");
  const int64_t b = m.shape()[0];
  Var f_m = ad::mul(f, ad::reshape(m, {b, g, 1}));
  Var k_e = ad::mul(ad::reshape(k, {n, 1, c, d}), ad::reshape(m, {b, g, 1, 1}));
  return {f_m, k_e};
}

}  // namespace rrdet::pe
