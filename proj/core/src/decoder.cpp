#include "rrdet/decoder.h"

#include <cmath>
#include <stdexcept>

namespace rrdet {

using ad::Var;

void DecoderConfig::validate() const {
  if (c < 2 * d) throw std::invalid_argument("DecoderConfig: need c >= 2d");
  if (c <= 0 || d <= 0) throw std::invalid_argument("DecoderConfig: widths must be positive");
  if (n_heads <= 0 || c % n_heads != 0)
    throw std::invalid_argument("DecoderConfig: c must divide into heads");
  if (use_box_pe && c % 4 != 0)
    throw std::invalid_argument("DecoderConfig: box PE needs c divisible by 4");
  if (in_stage_depth != 1 && in_stage_depth != 2)
    throw std::invalid_argument("DecoderConfig: in_stage_depth must be 1 or 2");
  if (n_stages < 1) throw std::invalid_argument("DecoderConfig: need at least one stage");
  if (ffn_dim < 1 || n_classes < 1 || n_proposals < 1)
    throw std::invalid_argument("DecoderConfig: sizes must be positive");
}

DecoderConfig DecoderConfig::paper_scale() {
  DecoderConfig cfg;
  cfg.c = 256;
  cfg.d = 64;
  cfg.n_heads = 8;
  cfg.ffn_dim = 2048;
  cfg.n_proposals = 300;
  cfg.n_classes = 80;
  cfg.n_stages = 6;
  return cfg;
}

StageWeights::StageWeights(ParamRegistry& reg, const std::string& prefix,
                           const DecoderConfig& cfg, Rng& rng) {
  Rng r = rng.fork(3);
  const int64_t c = cfg.c;
  attn_q = Linear(reg, prefix + ".attn.q", c, c, r);
  attn_k = Linear(reg, prefix + ".attn.k", c, c, r);
  attn_v = Linear(reg, prefix + ".attn.v", c, c, r);
  attn_o = Linear(reg, prefix + ".attn.o", c, c, r);
  attn_ln = LayerNorm(reg, prefix + ".attn.ln", c);
  if (cfg.use_box_pe) {
    box_pe = pe::BoxPE(reg, prefix + ".box_pe", c, r);
    geom = pe::GeometryHeads(reg, prefix + ".geom", c, r);
  }
  if (cfg.use_centerness)
    mask = pe::CenternessMask(reg, prefix + ".mask", cfg.centerness_variant, c, r);
  dyn_fc = Linear(reg, prefix + ".dyn", c, 2 * c * cfg.d, r);
  conv_ln_h = LayerNorm(reg, prefix + ".conv.ln_h", cfg.d);
  conv_ln_f = LayerNorm(reg, prefix + ".conv.ln_f", c);
  out_fc = Linear(reg, prefix + ".out", 49 * c, c, r);
  ffn1 = Linear(reg, prefix + ".ffn.fc1", c, cfg.ffn_dim, r);
  ffn2 = Linear(reg, prefix + ".ffn.fc2", cfg.ffn_dim, c, r);
  ffn_ln = LayerNorm(reg, prefix + ".ffn.ln", c);

  cls = Linear(reg, prefix + ".cls", c, cfg.n_classes, r);
  // rare-positive prior: sigmoid(bias) = 0.01 at the start of training
  const double bias0 = -std::log((1.0 - 0.01) / 0.01);
  for (int64_t i = 0; i < cfg.n_classes; ++i) cls.b.node()->value.set(i, bias0);

  reg1 = Linear(reg, prefix + ".reg.fc1", c, c, r);
  reg2 = Linear(reg, prefix + ".reg.fc2", c, c, r);
  reg3 = Linear(reg, prefix + ".reg.fc3", c, 4, r);
  // zero deltas at init: stage 1 keeps the starting boxes
  reg3.w.node()->value = Tensor::zeros({c, 4}, reg.dtype());
}

std::pair<Var, Var> dyn_kernels(const Var& q, const Linear& dyn_fc, int64_t c, int64_t d) {
  if (q.shape().size() != 2 || q.shape()[1] != c)
    throw std::invalid_argument("dyn_kernels: q must be (N,c)");
  const int64_t n = q.shape()[0];
  Var kv = dyn_fc(q);  // (N, 2cd)
  Var k = ad::reshape(ad::slice(kv, 1, 0, c * d), {n, c, d});
  Var v = ad::reshape(ad::slice(kv, 1, c * d, c * d), {n, d, c});
  return {k, v};
}

Var dynamic_conv(const Var& f, const Var& k, const Var& v, const Var* p_f, const Var* p_k,
                 const Var* m, const LayerNorm* ln_h, const LayerNorm* ln_f) {
  const Shape& fs = f.shape();
  const Shape& ks = k.shape();
  if (fs.size() != 3 || ks.size() != 3 || v.shape().size() != 3)
    throw std::invalid_argument("dynamic_conv: rank-3 operands expected");
  const int64_t n = fs[0], g = fs[1], c = fs[2], d = ks[2];
  if (ks[0] != n || ks[1] != c || v.shape() != Shape{n, d, c})
    throw std::invalid_argument("dynamic_conv: kernel shapes inconsistent with f");
  if ((p_f == nullptr) != (p_k == nullptr))
    throw std::invalid_argument("dynamic_conv: pass both encodings or neither");

  Var h = ad::bmm(f, k);  // (N,G,d)
  if (m) {
    Var m2 = ad::mul(*m, *m);  // (1|N, G)
    h = ad::mul(h, ad::reshape(m2, {m2.shape()[0], g, 1}));
  }
  if (p_f) {
    if (p_f->shape() != fs) throw std::invalid_argument("dynamic_conv: p_f must match f");
    if (p_k->shape() != Shape{n, c}) throw std::invalid_argument("dynamic_conv: p_k must be (N,c)");
    h = ad::add(h, ad::bmm(*p_f, ad::reshape(*p_k, {n, c, 1})));  // broadcast over d
  }
  h = ad::relu(ln_h ? (*ln_h)(h) : h);
  Var o = ad::bmm(h, v);  // (N,G,c)
  return ad::relu(ln_f ? (*ln_f)(o) : o);
}

Var self_attention_with_pe(const Var& q, const Var* p, const StageWeights& w, int64_t n_heads) {
  const int64_t n = q.shape()[0], c = q.shape()[1];
  const int64_t ch = c / n_heads;
  Var x = p ? ad::add(q, *p) : q;
  const auto heads = [&](const Var& t) {
    return ad::permute(ad::reshape(t, {n, n_heads, ch}), {1, 0, 2});  // (H,N,ch)
  };
  Var qh = heads(w.attn_q(x));
  Var kh = heads(w.attn_k(x));
  Var vh = heads(w.attn_v(q));  // values carry no positional term
  Var logits = ad::mul_scalar(ad::bmm(qh, kh, false, true), 1.0 / std::sqrt(double(ch)));
  Var ctx = ad::bmm(ad::softmax(logits, -1), vh);                      // (H,N,ch)
  Var merged = ad::reshape(ad::permute(ctx, {1, 0, 2}), {n, c});
  return w.attn_ln(ad::add(q, w.attn_o(merged)));
}

Decoder::Decoder(ParamRegistry& reg, const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  int64_t copies = 1;
  switch (cfg_.sharing) {
    case Sharing::kCascade: copies = cfg_.n_stages; break;
    case Sharing::kSharedAll: copies = 1; break;
    case Sharing::kFirstIndependent: copies = 2; break;
  }
  for (int64_t i = 0; i < copies; ++i) {
    Rng r = rng.fork(100 + i);
    weights_.emplace_back(reg, "dec.s" + std::to_string(i), cfg_, r);
  }
  Rng rq = rng.fork(7);
  init_q_ = reg.create("proposals.q",
                       normal_init({cfg_.n_proposals, cfg_.c}, 1.0, rq, reg.dtype()));
  init_boxes_ = Tensor::zeros({cfg_.n_proposals, 4}, reg.dtype());
  for (int64_t i = 0; i < cfg_.n_proposals; ++i) {
    init_boxes_.set(i * 4 + 0, 0.5);
    init_boxes_.set(i * 4 + 1, 0.5);
    init_boxes_.set(i * 4 + 2, 1.0);
    init_boxes_.set(i * 4 + 3, 1.0);
  }
}

const StageWeights& Decoder::stage_weights(int64_t t) const {
  if (t < 0 || t >= cfg_.n_stages) throw std::invalid_argument("stage index out of range");
  switch (cfg_.sharing) {
    case Sharing::kCascade: return weights_[t];
    case Sharing::kSharedAll: return weights_[0];
    case Sharing::kFirstIndependent: return weights_[t == 0 ? 0 : 1];
  }
  throw std::logic_error("unreachable");
}

ProposalState Decoder::initial_state() const {
  return {init_q_, ad::constant(init_boxes_)};
}

std::pair<ProposalState, StagePrediction> Decoder::decode_stage(const ProposalState& state,
                                                                const FeaturePyramid& pyramid,
                                                                const StageWeights& w) const {
  const int64_t n = state.q.shape()[0];
  const int64_t c = cfg_.c;

  Var p_attn;
  if (cfg_.use_box_pe) p_attn = w.box_pe.forward(state.boxes);
  Var q1 = self_attention_with_pe(state.q, cfg_.use_box_pe ? &p_attn : nullptr, w, cfg_.n_heads);

  RoiAlignOut roi = roi_align(pyramid, state.boxes);
  Var p_f;
  if (cfg_.use_box_pe) p_f = pe::roi_element_pe(roi.coords, c);

  // in-stage recursion: the refreshed object feature is handed back to the
  // same kernel generator, and the convs rerun on the original RoI features
  Var q_cur = q1;
  for (int64_t pass = 0; pass < cfg_.in_stage_depth; ++pass) {
    auto [k, v] = dyn_kernels(q_cur, w.dyn_fc, c, cfg_.d);
    Var p_k;
    if (cfg_.use_box_pe) {
      auto [qc, qs] = w.geom.forward(q_cur);
      p_k = pe::kernel_pe(qc, qs, state.boxes);
    }
    Var m;
    if (cfg_.use_centerness)
      m = w.mask.forward(w.mask.variant() == pe::MaskVariant::kAdjust ? &q_cur : nullptr);
    Var fx = dynamic_conv(roi.features, k, v, cfg_.use_box_pe ? &p_f : nullptr,
                          cfg_.use_box_pe ? &p_k : nullptr, cfg_.use_centerness ? &m : nullptr,
                          &w.conv_ln_h, &w.conv_ln_f);
    q_cur = ad::add(w.out_fc(ad::reshape(fx, {n, 49 * c})), q_cur);
  }

  Var z = w.ffn_ln(ad::add(q_cur, w.ffn2(ad::relu(w.ffn1(q_cur)))));
  Var logits = w.cls(z);
  Var deltas = w.reg3(ad::relu(w.reg2(ad::relu(w.reg1(z)))));
  Var new_boxes = geo::apply_deltas(state.boxes, deltas);

  ProposalState next{z, cfg_.detach_boxes ? ad::detach(new_boxes) : new_boxes};
  return {next, StagePrediction{logits, new_boxes, z}};
}

std::vector<StagePrediction> Decoder::run(const FeaturePyramid& pyramid, int64_t stages) const {
  return run_from(initial_state(), pyramid, stages);
}

std::vector<StagePrediction> Decoder::run_from(ProposalState state, const FeaturePyramid& pyramid,
                                               int64_t stages) const {
  if (stages < 0) stages = cfg_.n_stages;
  if (stages < 1 || stages > cfg_.n_stages)
    throw std::invalid_argument("run: stage count must be in [1, n_stages]");
  std::vector<StagePrediction> preds;
  preds.reserve(stages);
  for (int64_t t = 0; t < stages; ++t) {
    auto [next, pred] = decode_stage(state, pyramid, stage_weights(t));
    state = next;
    preds.push_back(pred);
  }
  return preds;
}

}  // namespace rrdet
