#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "rrdet/decoder.h"
#include "rrdet/gradcheck.h"

using namespace rrdet;
using ad::Var;

namespace {

Tensor rand64(Rng& r, Shape s, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(s), Dtype::f64);
  for (int64_t i = 0; i < t.numel(); ++i) t.set(i, r.uniform(lo, hi));
  return t;
}

DecoderConfig tiny_cfg() {
  DecoderConfig cfg;
  cfg.c = 16;
  cfg.d = 8;
  cfg.n_heads = 2;
  cfg.ffn_dim = 32;
  cfg.n_proposals = 4;
  cfg.n_classes = 3;
  return cfg;
}

FeaturePyramid rand_pyramid(Rng& r, int64_t c, bool as_leaves) {
  FeaturePyramid pyr;
  pyr.image_h = pyr.image_w = 128;
  pyr.channels = c;
  pyr.strides = {4, 8, 16, 32};
  const int64_t sides[4] = {32, 16, 8, 4};
  for (int i = 0; i < 4; ++i) {
    Tensor t = rand64(r, {1, c, sides[i], sides[i]}, -1.0, 1.0);
    pyr.levels.push_back(as_leaves ? ad::leaf(t, true) : ad::constant(t));
  }
  return pyr;
}

ProposalState rand_state(Rng& r, int64_t n, int64_t c) {
  Tensor boxes = Tensor::zeros({n, 4}, Dtype::f64);
  for (int64_t i = 0; i < n; ++i) {
    boxes.set(i * 4 + 0, r.uniform(0.3, 0.7));
    boxes.set(i * 4 + 1, r.uniform(0.3, 0.7));
    boxes.set(i * 4 + 2, r.uniform(0.2, 0.5));
    boxes.set(i * 4 + 3, r.uniform(0.2, 0.5));
  }
  return {ad::leaf(rand64(r, {n, c}, -1.0, 1.0), true), ad::constant(boxes)};
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.numel() == b.numel());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.get(i) - b.get(i)));
  return m;
}

}  // namespace

TEST_CASE("config validation rejects inconsistent widths") {
  DecoderConfig cfg = tiny_cfg();
  cfg.d = 12;  // c < 2d
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_cfg();
  cfg.n_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_cfg();
  cfg.in_stage_depth = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_cfg();
  cfg.c = 18;  // box PE needs c % 4 == 0
  cfg.d = 8;
  cfg.n_heads = 2;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.use_box_pe = false;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("kernel generator at the origin returns its bias, identically per proposal") {
  const int64_t c = 6, d = 3;
  ParamRegistry reg(Dtype::f64);
  Rng rng(41);
  Linear fc(reg, "dyn", c, 2 * c * d, rng);
  Rng rb(42);
  for (int64_t i = 0; i < 2 * c * d; ++i) fc.b.node()->value.set(i, rb.uniform(-1.0, 1.0));

  auto [k, v] = dyn_kernels(ad::constant(Tensor::zeros({2, c}, Dtype::f64)), fc, c, d);
  REQUIRE(k.shape() == Shape({2, c, d}));
  REQUIRE(v.shape() == Shape({2, d, c}));
  const Tensor& b = fc.b.node()->value;
  for (int64_t n = 0; n < 2; ++n) {
    for (int64_t i = 0; i < c * d; ++i) CHECK(k.value().get(n * c * d + i) == b.get(i));
    for (int64_t i = 0; i < d * c; ++i) CHECK(v.value().get(n * d * c + i) == b.get(c * d + i));
  }
}

TEST_CASE("bare bottleneck with all-ones kernels broadcasts row sums") {
  Var f = ad::constant(Tensor::from_values({1, 4, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, Dtype::f64));
  Var k = ad::constant(Tensor::full({1, 2, 1}, 1.0, Dtype::f64));
  Var v = ad::constant(Tensor::full({1, 1, 2}, 1.0, Dtype::f64));
  Var out = dynamic_conv(f, k, v, nullptr, nullptr, nullptr, nullptr, nullptr);
  REQUIRE(out.shape() == Shape({1, 4, 2}));
  const double expect[4] = {3, 7, 11, 15};
  for (int64_t g = 0; g < 4; ++g)
    for (int64_t ch = 0; ch < 2; ++ch) CHECK(out.value().get(g * 2 + ch) == expect[g]);
}

TEST_CASE("an all-zero mask makes the conv output independent of the RoI content") {
  const int64_t n = 2, g = 49, c = 8, d = 4;
  ParamRegistry reg(Dtype::f64);
  LayerNorm ln_h(reg, "ln_h", d), ln_f(reg, "ln_f", c);
  Rng r(43);
  Var k = ad::constant(rand64(r, {n, c, d}, -1.0, 1.0));
  Var v = ad::constant(rand64(r, {n, d, c}, -1.0, 1.0));
  Var m = ad::constant(Tensor::zeros({1, g}, Dtype::f64));
  Var f1 = ad::constant(rand64(r, {n, g, c}, -1.0, 1.0));
  Var f2 = ad::constant(rand64(r, {n, g, c}, -1.0, 1.0));
  Var o1 = dynamic_conv(f1, k, v, nullptr, nullptr, &m, &ln_h, &ln_f);
  Var o2 = dynamic_conv(f2, k, v, nullptr, nullptr, &m, &ln_h, &ln_f);
  REQUIRE(o1.shape() == Shape({n, g, c}));
  for (int64_t i = 0; i < o1.numel(); ++i) CHECK(o1.value().get(i) == o2.value().get(i));
}

TEST_CASE("fused conv equals the materialized modulation oracle") {
  const int64_t n = 2, g = 49, c = 6, d = 4;
  Rng r(44);
  Var f = ad::constant(rand64(r, {n, g, c}, -1.0, 1.0));
  Var k = ad::constant(rand64(r, {n, c, d}, -1.0, 1.0));
  Var v = ad::constant(rand64(r, {n, d, c}, -1.0, 1.0));
  Var p_f = ad::constant(rand64(r, {n, g, c}, -1.0, 1.0));
  Var p_k = ad::constant(rand64(r, {n, c}, -1.0, 1.0));
  Var m = ad::constant(rand64(r, {n, g}, 0.0, 1.0));

  ParamRegistry reg(Dtype::f64);
  LayerNorm ln_h(reg, "ln_h", d), ln_f(reg, "ln_f", c);
  Rng rg(45);
  for (int64_t i = 0; i < d; ++i) ln_h.gamma.node()->value.set(i, rg.uniform(0.5, 1.5));
  for (int64_t i = 0; i < c; ++i) ln_f.beta.node()->value.set(i, rg.uniform(-0.3, 0.3));

  auto naive = [&](const LayerNorm* lh, const LayerNorm* lf) {
    auto [f_m, k_e] = pe::modulate_with_centerness(f, k, m);
    Var h_cells = ad::reshape(ad::bmm(ad::reshape(f_m, {n * g, 1, c}), ad::reshape(k_e, {n * g, c, d})),
                              {n, g, d});
    Var h = ad::add(h_cells, ad::bmm(p_f, ad::reshape(p_k, {n, c, 1})));
    h = ad::relu(lh ? (*lh)(h) : h);
    Var o = ad::bmm(h, v);
    return ad::relu(lf ? (*lf)(o) : o);
  };

  Var fused_plain = dynamic_conv(f, k, v, &p_f, &p_k, &m, nullptr, nullptr);
  CHECK(max_abs_diff(fused_plain.value(), naive(nullptr, nullptr).value()) < 1e-9);
  Var fused_ln = dynamic_conv(f, k, v, &p_f, &p_k, &m, &ln_h, &ln_f);
  CHECK(max_abs_diff(fused_ln.value(), naive(&ln_h, &ln_f).value()) < 1e-9);
}

TEST_CASE("single-token attention reduces to the value path") {
  DecoderConfig cfg = tiny_cfg();
  cfg.use_box_pe = false;
  cfg.use_centerness = false;
  ParamRegistry reg(Dtype::f64);
  Rng rng(46);
  StageWeights w(reg, "s", cfg, rng);
  Rng r(47);
  Var q = ad::constant(rand64(r, {1, cfg.c}, -1.0, 1.0));
  Var got = self_attention_with_pe(q, nullptr, w, cfg.n_heads);
  Var expect = w.attn_ln(ad::add(q, w.attn_o(w.attn_v(q))));
  for (int64_t i = 0; i < got.numel(); ++i) CHECK(got.value().get(i) == expect.value().get(i));
}

TEST_CASE("attention is permutation-equivariant and ignores key-wide shifts") {
  DecoderConfig cfg = tiny_cfg();
  cfg.use_box_pe = false;
  cfg.use_centerness = false;
  ParamRegistry reg(Dtype::f64);
  Rng rng(48);
  StageWeights w(reg, "s", cfg, rng);
  const int64_t n = 5, c = cfg.c, heads = cfg.n_heads, ch = c / heads;
  Rng r(49);
  Var q = ad::constant(rand64(r, {n, c}, -1.0, 1.0));
  Var p = ad::constant(rand64(r, {n, c}, -0.5, 0.5));

  const std::vector<int64_t> sigma{3, 0, 4, 2, 1};
  Var out = self_attention_with_pe(q, &p, w, heads);
  Var q_perm = ad::gather_rows(q, sigma);
  Var p_perm = ad::gather_rows(p, sigma);
  Var out_of_perm = self_attention_with_pe(q_perm, &p_perm, w, heads);
  CHECK(max_abs_diff(ad::gather_rows(out, sigma).value(), out_of_perm.value()) < 1e-9);

  // shifting every key token by one constant vector adds a per-query constant
  // to each logit row, which the row softmax cancels
  Var x = ad::add(q, p);
  Var delta = ad::constant(rand64(r, {1, c}, -1.0, 1.0));
  auto split = [&](const Var& t) {
    return ad::permute(ad::reshape(t, {n, heads, ch}), {1, 0, 2});
  };
  Var qh = split(w.attn_q(x));
  Var k1 = split(w.attn_k(x));
  Var k2 = split(w.attn_k(ad::add(x, delta)));
  const double scale = 1.0 / std::sqrt(static_cast<double>(ch));
  Var l1 = ad::mul_scalar(ad::bmm(qh, k1, false, true), scale);
  Var l2 = ad::mul_scalar(ad::bmm(qh, k2, false, true), scale);
  Tensor dl = ad::sub(l2, l1).value();  // (H,N,N)
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t i = 0; i < n; ++i) {
      double lo = 1e300, hi = -1e300;
      for (int64_t j = 0; j < n; ++j) {
        const double e = dl.get((h * n + i) * n + j);
        lo = std::min(lo, e);
        hi = std::max(hi, e);
      }
      CHECK(hi - lo < 1e-10);  // row-constant shift
    }
  CHECK(max_abs_diff(ad::softmax(l1, -1).value(), ad::softmax(l2, -1).value()) < 1e-9);
}

TEST_CASE("the in-stage recursion matches a hand-chained double pass") {
  DecoderConfig cfg = tiny_cfg();  // depth 2, box PE + static centerness on
  ParamRegistry reg(Dtype::f64);
  Rng rng(50);
  Decoder dec(reg, cfg, rng);
  const StageWeights& w = dec.stage_weights(0);
  Rng r(51);
  FeaturePyramid pyr = rand_pyramid(r, cfg.c, false);
  ProposalState st = rand_state(r, cfg.n_proposals, cfg.c);
  const int64_t n = cfg.n_proposals, c = cfg.c;

  auto [next, pred] = dec.decode_stage(st, pyr, w);

  // the same pipeline, spelled out
  Var p_attn = w.box_pe.forward(st.boxes);
  Var q1 = self_attention_with_pe(st.q, &p_attn, w, cfg.n_heads);
  RoiAlignOut roi = roi_align(pyr, st.boxes);
  Var p_f = pe::roi_element_pe(roi.coords, c);
  Var q_cur = q1;
  Var o1;
  for (int pass = 0; pass < 2; ++pass) {
    auto [k, v] = dyn_kernels(q_cur, w.dyn_fc, c, cfg.d);
    auto [qc, qs] = w.geom.forward(q_cur);
    Var p_k = pe::kernel_pe(qc, qs, st.boxes);
    Var m = w.mask.forward(nullptr);
    Var fx = dynamic_conv(roi.features, k, v, &p_f, &p_k, &m, &w.conv_ln_h, &w.conv_ln_f);
    q_cur = ad::add(w.out_fc(ad::reshape(fx, {n, 49 * c})), q_cur);
    if (pass == 0) o1 = q_cur;
  }
  Var z = w.ffn_ln(ad::add(q_cur, w.ffn2(ad::relu(w.ffn1(q_cur)))));
  Var logits = w.cls(z);
  Var deltas = w.reg3(ad::relu(w.reg2(ad::relu(w.reg1(z)))));
  Var boxes = geo::apply_deltas(st.boxes, deltas);

  CHECK(max_abs_diff(pred.class_logits.value(), logits.value()) < 1e-12);
  CHECK(max_abs_diff(pred.boxes.value(), boxes.value()) < 1e-12);
  CHECK(max_abs_diff(pred.object_features.value(), z.value()) < 1e-12);
  // the second pass actually moved the object features
  CHECK(max_abs_diff(o1.value(), q_cur.value()) > 1e-6);
}

TEST_CASE("with encodings off the stage reduces to the plain region pipeline") {
  DecoderConfig cfg = tiny_cfg();
  cfg.use_box_pe = false;
  cfg.use_centerness = false;
  cfg.in_stage_depth = 1;
  ParamRegistry reg(Dtype::f64);
  Rng rng(52);
  Decoder dec(reg, cfg, rng);
  const StageWeights& w = dec.stage_weights(0);
  Rng r(53);
  FeaturePyramid pyr = rand_pyramid(r, cfg.c, false);
  ProposalState st = rand_state(r, cfg.n_proposals, cfg.c);
  const int64_t n = cfg.n_proposals, c = cfg.c, d = cfg.d, heads = cfg.n_heads, ch = c / heads;

  auto [next, pred] = dec.decode_stage(st, pyr, w);

  // hand-built baseline from raw graph primitives
  auto split = [&](const Var& t) {
    return ad::permute(ad::reshape(t, {n, heads, ch}), {1, 0, 2});
  };
  Var qh = split(ad::affine(st.q, w.attn_q.w, w.attn_q.b));
  Var kh = split(ad::affine(st.q, w.attn_k.w, w.attn_k.b));
  Var vh = split(ad::affine(st.q, w.attn_v.w, w.attn_v.b));
  Var attn = ad::softmax(
      ad::mul_scalar(ad::bmm(qh, kh, false, true), 1.0 / std::sqrt(static_cast<double>(ch))), -1);
  Var merged = ad::reshape(ad::permute(ad::bmm(attn, vh), {1, 0, 2}), {n, c});
  Var q1 = ad::layer_norm(ad::add(st.q, ad::affine(merged, w.attn_o.w, w.attn_o.b)),
                          w.attn_ln.gamma, w.attn_ln.beta);

  Var f = roi_align(pyr, st.boxes).features;
  Var kv = ad::affine(q1, w.dyn_fc.w, w.dyn_fc.b);
  Var k = ad::reshape(ad::slice(kv, 1, 0, c * d), {n, c, d});
  Var v = ad::reshape(ad::slice(kv, 1, c * d, c * d), {n, d, c});
  Var h = ad::relu(ad::layer_norm(ad::bmm(f, k), w.conv_ln_h.gamma, w.conv_ln_h.beta));
  Var fx = ad::relu(ad::layer_norm(ad::bmm(h, v), w.conv_ln_f.gamma, w.conv_ln_f.beta));
  Var o = ad::add(ad::affine(ad::reshape(fx, {n, 49 * c}), w.out_fc.w, w.out_fc.b), q1);
  Var z = ad::layer_norm(
      ad::add(o, ad::affine(ad::relu(ad::affine(o, w.ffn1.w, w.ffn1.b)), w.ffn2.w, w.ffn2.b)),
      w.ffn_ln.gamma, w.ffn_ln.beta);
  Var logits = ad::affine(z, w.cls.w, w.cls.b);
  Var deltas = ad::affine(
      ad::relu(ad::affine(ad::relu(ad::affine(z, w.reg1.w, w.reg1.b)), w.reg2.w, w.reg2.b)),
      w.reg3.w, w.reg3.b);
  Var boxes = geo::apply_deltas(st.boxes, deltas);

  CHECK(max_abs_diff(pred.class_logits.value(), logits.value()) < 1e-12);
  CHECK(max_abs_diff(pred.boxes.value(), boxes.value()) < 1e-12);
  CHECK(max_abs_diff(pred.object_features.value(), z.value()) < 1e-12);
}

TEST_CASE("identical inputs through shared weights give identical stages") {
  DecoderConfig cfg = tiny_cfg();
  ParamRegistry reg(Dtype::f64);
  Rng rng(54);
  Decoder dec(reg, cfg, rng);
  Rng r(55);
  FeaturePyramid pyr = rand_pyramid(r, cfg.c, false);
  ProposalState st = rand_state(r, cfg.n_proposals, cfg.c);
  CHECK(&dec.stage_weights(0) == &dec.stage_weights(3));
  auto [n1, p1] = dec.decode_stage(st, pyr, dec.stage_weights(0));
  auto [n2, p2] = dec.decode_stage(st, pyr, dec.stage_weights(3));
  for (int64_t i = 0; i < p1.class_logits.numel(); ++i)
    CHECK(p1.class_logits.value().get(i) == p2.class_logits.value().get(i));
  for (int64_t i = 0; i < p1.boxes.numel(); ++i)
    CHECK(p1.boxes.value().get(i) == p2.boxes.value().get(i));
}

TEST_CASE("sharing policies expose the right number of weight copies") {
  Rng r(56);
  FeaturePyramid pyr = rand_pyramid(r, 16, false);
  auto build = [&](Sharing s) {
    DecoderConfig cfg = tiny_cfg();
    cfg.sharing = s;
    auto reg = std::make_unique<ParamRegistry>(Dtype::f64);
    Rng rng(57);
    auto dec = std::make_unique<Decoder>(*reg, cfg, rng);
    return std::make_pair(std::move(reg), std::move(dec));
  };
  auto [r1, cascade] = build(Sharing::kCascade);
  auto [r2, shared] = build(Sharing::kSharedAll);
  auto [r3, first] = build(Sharing::kFirstIndependent);
  CHECK(cascade->unique_weight_copies() == 6);
  CHECK(shared->unique_weight_copies() == 1);
  CHECK(first->unique_weight_copies() == 2);
  for (int t = 0; t < 6; ++t)
    for (int u = t + 1; u < 6; ++u) CHECK(&cascade->stage_weights(t) != &cascade->stage_weights(u));
  CHECK(&first->stage_weights(0) != &first->stage_weights(1));
  CHECK(&first->stage_weights(1) == &first->stage_weights(5));
}

TEST_CASE("the in-stage depth setting adds no parameters") {
  auto total = [](int64_t depth) {
    DecoderConfig cfg = tiny_cfg();
    cfg.in_stage_depth = depth;
    ParamRegistry reg(Dtype::f64);
    Rng rng(58);
    Decoder dec(reg, cfg, rng);
    return reg.total_scalars();
  };
  CHECK(total(1) == total(2));
}

TEST_CASE("kernel-generator and out-projection sizes obey their closed forms") {
  DecoderConfig cfg = tiny_cfg();
  ParamRegistry reg(Dtype::f64);
  Rng rng(59);
  Decoder dec(reg, cfg, rng);
  const int64_t c = cfg.c, d = cfg.d;
  CHECK(reg.find("dec.s0.dyn.w").numel() + reg.find("dec.s0.dyn.b").numel() ==
        2 * c * c * d + 2 * c * d);
  CHECK(reg.find("dec.s0.out.w").numel() + reg.find("dec.s0.out.b").numel() == 49 * c * c + c);
}

TEST_CASE("whole-decoder runs are permutation-equivariant") {
  DecoderConfig cfg = tiny_cfg();
  cfg.n_proposals = 5;
  cfg.n_stages = 3;
  ParamRegistry reg(Dtype::f64);
  Rng rng(60);
  Decoder dec(reg, cfg, rng);
  Rng r(61);
  FeaturePyramid pyr = rand_pyramid(r, cfg.c, false);
  ProposalState st = rand_state(r, 5, cfg.c);
  const std::vector<int64_t> sigma{4, 2, 0, 3, 1};
  ProposalState st_p{ad::gather_rows(st.q, sigma), ad::gather_rows(st.boxes, sigma)};

  auto preds = dec.run_from(st, pyr, 3);
  auto preds_p = dec.run_from(st_p, pyr, 3);
  REQUIRE(preds.size() == 3);
  // rounding compounds across the recursion, so the bar is looser than for
  // the single-layer checks
  for (size_t t = 0; t < preds.size(); ++t) {
    CHECK(max_abs_diff(ad::gather_rows(preds[t].class_logits, sigma).value(),
                       preds_p[t].class_logits.value()) < 1e-7);
    CHECK(max_abs_diff(ad::gather_rows(preds[t].boxes, sigma).value(), preds_p[t].boxes.value()) <
          1e-7);
  }
}

TEST_CASE("truncated inference is a bitwise prefix of the full run") {
  DecoderConfig cfg = tiny_cfg();
  ParamRegistry reg(Dtype::f64);
  Rng rng(62);
  Decoder dec(reg, cfg, rng);
  Rng r(63);
  FeaturePyramid pyr = rand_pyramid(r, cfg.c, false);
  auto full = dec.run(pyr);
  REQUIRE(full.size() == 6);
  for (int64_t kstages : {1, 3}) {
    auto part = dec.run(pyr, kstages);
    REQUIRE(part.size() == static_cast<size_t>(kstages));
    for (int64_t t = 0; t < kstages; ++t) {
      for (int64_t i = 0; i < part[t].boxes.numel(); ++i)
        CHECK(part[t].boxes.value().get(i) == full[t].boxes.value().get(i));
      for (int64_t i = 0; i < part[t].class_logits.numel(); ++i)
        CHECK(part[t].class_logits.value().get(i) == full[t].class_logits.value().get(i));
    }
  }
  CHECK_THROWS_AS(dec.run(pyr, 7), std::invalid_argument);
  CHECK_THROWS_AS(dec.run(pyr, 0), std::invalid_argument);
}

TEST_CASE("stage one keeps the starting boxes because the delta head opens at zero") {
  DecoderConfig cfg = tiny_cfg();
  ParamRegistry reg(Dtype::f64);
  Rng rng(64);
  Decoder dec(reg, cfg, rng);
  Rng r(65);
  FeaturePyramid pyr = rand_pyramid(r, cfg.c, false);
  auto preds = dec.run(pyr, 1);
  ProposalState init = dec.initial_state();
  // zero deltas map the full-image starting box onto itself (after clamping)
  for (int64_t i = 0; i < preds[0].boxes.numel(); ++i)
    CHECK(preds[0].boxes.value().get(i) == doctest::Approx(init.boxes.value().get(i)).epsilon(1e-12));
}

TEST_CASE("gradients reach the proposal embeddings and the pyramid through six stages") {
  DecoderConfig cfg = tiny_cfg();
  cfg.detach_boxes = false;
  cfg.centerness_variant = pe::MaskVariant::kAdjust;
  ParamRegistry reg(Dtype::f64);
  Rng rng(66);
  Decoder dec(reg, cfg, rng);
  Rng r(67);
  FeaturePyramid pyr = rand_pyramid(r, cfg.c, true);  // leaves: gradients wanted
  ProposalState st = dec.initial_state();
  auto preds = dec.run_from(st, pyr, 6);
  Var loss = ad::add(ad::sum_all(preds.back().class_logits), ad::sum_all(preds.back().boxes));
  ad::backward(loss);

  auto grad_norm = [](const Var& v) {
    REQUIRE(v.node()->grad.defined());
    double s = 0;
    for (int64_t i = 0; i < v.node()->grad.numel(); ++i) {
      const double g = v.node()->grad.get(i);
      REQUIRE(std::isfinite(g));
      s += g * g;
    }
    return std::sqrt(s);
  };
  CHECK(grad_norm(st.q) > 0.0);
  CHECK(grad_norm(pyr.levels[1]) > 0.0);  // starting boxes sample this level
  for (const auto& [name, v] : reg.all()) {
    if (!v.node()->grad.defined()) continue;
    for (int64_t i = 0; i < v.node()->grad.numel(); ++i)
      REQUIRE(std::isfinite(v.node()->grad.get(i)));
  }
}
