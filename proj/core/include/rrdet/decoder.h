#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rrdet/autodiff.h"
#include "rrdet/features.h"
#include "rrdet/geometry.h"
#include "rrdet/params.h"
#include "rrdet/posenc.h"

namespace rrdet {

/// How stage parameters are reused across the decoding iterations.
enum class Sharing { kCascade, kSharedAll, kFirstIndependent };

struct DecoderConfig {
  int64_t c = 64;  // object-feature width
  int64_t d = 16;  // bottleneck width of the dynamic convs
  int64_t n_stages = 6;
  int64_t n_heads = 4;
  int64_t ffn_dim = 256;
  int64_t in_stage_depth = 2;  // dynamic-conv/out passes per stage (1 or 2)
  Sharing sharing = Sharing::kSharedAll;
  bool use_box_pe = true;
  bool use_centerness = true;
  pe::MaskVariant centerness_variant = pe::MaskVariant::kStatic;
  int64_t n_classes = 3;
  int64_t n_proposals = 20;
  bool detach_boxes = true;  // cut box gradients between stages

  void validate() const;  // throws std::invalid_argument

  /// Full-size configuration used by the parameter audit: c=256, d=64,
  /// 8 heads, ffn 2048, 300 proposals, 80 classes, 6 stages.
  static DecoderConfig paper_scale();
};

/// One full set of per-stage parameters. Under weight sharing several stages
/// point at the same copy.
struct StageWeights {
  Linear attn_q, attn_k, attn_v, attn_o;
  LayerNorm attn_ln;
  pe::BoxPE box_pe;        // present iff use_box_pe
  pe::GeometryHeads geom;  // present iff use_box_pe
  pe::CenternessMask mask; // present iff use_centerness
  Linear dyn_fc;           // c -> 2cd, emits both bottleneck kernels
  LayerNorm conv_ln_h;     // over d
  LayerNorm conv_ln_f;     // over c
  Linear out_fc;           // 49c -> c
  Linear ffn1, ffn2;
  LayerNorm ffn_ln;
  Linear cls;
  Linear reg1, reg2, reg3;

  StageWeights() = default;
  StageWeights(ParamRegistry& reg, const std::string& prefix, const DecoderConfig& cfg, Rng& rng);
};

struct ProposalState {
  ad::Var q;      // (N, c)
  ad::Var boxes;  // (N, 4) cxcywh
};

struct StagePrediction {
  ad::Var class_logits;     // (N, n_classes)
  ad::Var boxes;            // (N, 4) refined, still attached to the graph
  ad::Var object_features;  // (N, c)
};

/// Splits the single affine map's output into the two bottleneck kernels:
/// q (N,c) -> k (N,c,d), v (N,d,c).
std::pair<ad::Var, ad::Var> dyn_kernels(const ad::Var& q, const Linear& dyn_fc, int64_t c,
                                        int64_t d);

/// Two successive per-cell 1x1 convs through the bottleneck:
///   h  = ReLU(LN(m^2 * f k + p_f . p_k))   (N,49,d)
///   f' = ReLU(LN(h v))                     (N,49,c)
/// p_f/p_k extend the first conv's input/kernel (pass both or neither); the
/// centerness mask m scales f and k (so their product picks up m^2) but not
/// the encoding terms. Null layer norms mean identity (test hook).
ad::Var dynamic_conv(const ad::Var& f, const ad::Var& k, const ad::Var& v, const ad::Var* p_f,
                     const ad::Var* p_k, const ad::Var* m, const LayerNorm* ln_h,
                     const LayerNorm* ln_f);

/// Multi-head self-attention where the positional vector is added to query
/// and key tokens but not to values; residual + layer norm on the output.
ad::Var self_attention_with_pe(const ad::Var& q, const ad::Var* p, const StageWeights& w,
                               int64_t n_heads);

/// The recursive region-based decoder: a stack of stages that refine a set of
/// proposal features and boxes against an image pyramid, with the stage
/// parameters shared according to the configured policy.
class Decoder {
 public:
  Decoder(ParamRegistry& reg, const DecoderConfig& cfg, Rng& rng);

  const DecoderConfig& config() const { return cfg_; }
  int64_t unique_weight_copies() const { return static_cast<int64_t>(weights_.size()); }
  const StageWeights& stage_weights(int64_t t) const;

  /// Learnable proposal features plus the full-image starting boxes.
  ProposalState initial_state() const;

  std::pair<ProposalState, StagePrediction> decode_stage(const ProposalState& state,
                                                         const FeaturePyramid& pyramid,
                                                         const StageWeights& w) const;

  /// Runs `stages` stages (default: the configured count; fewer truncates the
  /// recursion with the same weights) and returns every stage's predictions.
  std::vector<StagePrediction> run(const FeaturePyramid& pyramid, int64_t stages = -1) const;
  std::vector<StagePrediction> run_from(ProposalState state, const FeaturePyramid& pyramid,
                                        int64_t stages) const;

 private:
  DecoderConfig cfg_;
  std::vector<StageWeights> weights_;
  ad::Var init_q_;
  Tensor init_boxes_;
};

}  // namespace rrdet
