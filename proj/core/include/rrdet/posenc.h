#pragma once

#include <utility>

#include "rrdet/autodiff.h"
#include "rrdet/params.h"

namespace rrdet::pe {

struct SinusoidalConfig {
  int64_t embed_dim = 0;       // even
  double temperature = 10000;  // DETR-family convention; inputs scaled by 2*pi
};

/// values: rank-1 (M) normalized coordinates -> (M, embed_dim), interleaved
/// as [sin f0, cos f0, sin f1, cos f1, ...] with f_i = 2*pi / T^(2i/D).
ad::Var sinusoidal_embed(const ad::Var& values, const SinusoidalConfig& cfg);

/// Self-attention positional vector p: the four box coordinates are embedded
/// sinusoidally (c/2 dims each, 2c total) and projected to R^c by a one-
/// hidden-layer MLP. (N,4) cxcywh -> (N,c).
class BoxPE {
 public:
  BoxPE() = default;
  BoxPE(ParamRegistry& reg, const std::string& prefix, int64_t c, Rng& rng);
  ad::Var forward(const ad::Var& boxes_cxcywh) const;
  int64_t channels() const { return c_; }

 private:
  int64_t c_ = 0;
  Linear fc1_, fc2_;
};

/// Geometry heads for the kernel PE: q_c = mlp_c(q) splits into two halves
/// for the x and y branches; q_s = softplus(mlp_s(q)) gives strictly
/// positive reference sides (w_ref, h_ref).
class GeometryHeads {
 public:
  GeometryHeads() = default;
  GeometryHeads(ParamRegistry& reg, const std::string& prefix, int64_t c, Rng& rng);
  // q: (N,c) -> { q_c: (N,c), q_s: (N,2) }
  std::pair<ad::Var, ad::Var> forward(const ad::Var& q) const;

 private:
  Linear c1_, c2_, s1_, s2_;
};

/// p_k(x,w) = (w_ref / w) * Sin(x) (Hadamard) q_cx, likewise for (y,h);
/// halves concatenated to R^c. Division guarded by max(side, 1e-6), which
/// keeps the exact 1/s homogeneity in the reference side.
/// q_c: (N,c), q_s: (N,2), boxes: (N,4) cxcywh -> (N,c).
ad::Var kernel_pe(const ad::Var& q_c, const ad::Var& q_s, const ad::Var& boxes_cxcywh);

/// Per-element PE of RoI sample centers. coords: (N,49,2) global normalized
/// (x,y) -> (N,49,c) so p_f matches p_k in width.
ad::Var roi_element_pe(const ad::Var& coords_xy, int64_t c);

enum class MaskVariant { kStatic, kLearnable, kAdjust };

/// 7x7 center-prior values: m(x,y) = sqrt(min(x,6-x)/max(x,6-x) *
/// min(y,6-y)/max(y,6-y)) on the integer grid. f64, row-major (y,x).
Tensor static_centerness_values();

/// Single-channel 7x7 centerness mask in one of three flavours: a fixed
/// center prior, a trainable grid initialized to it, or a grid whose peak is
/// shifted per proposal by a learned (dx, dy) in (-3,3)^2.
class CenternessMask {
 public:
  CenternessMask() = default;
  CenternessMask(ParamRegistry& reg, const std::string& prefix, MaskVariant variant, int64_t c,
                 Rng& rng);

  /// Mask rows in [0,1]. Static/learnable yield (1,49) (broadcast over
  /// proposals); adjust consumes q (N,c) and yields (N,49).
  ad::Var forward(const ad::Var* q) const;
  MaskVariant variant() const { return variant_; }

 private:
  MaskVariant variant_ = MaskVariant::kStatic;
  Dtype dt_ = Dtype::f32;
  ad::Var values_;   // learnable grid
  Linear offset_;    // adjust head
};

/// Reference modulation semantics: multiplies the mask onto the RoI feature
/// and expands the kernel per cell. f: (N,49,c), k: (N,c,d), m: (1|N,49) ->
/// { f_m: (N,49,c), k_e: (N,49,c,d) }. The decoder uses an algebraically
/// fused form; this materialized version is the cross-check oracle.
std::pair<ad::Var, ad::Var> modulate_with_centerness(const ad::Var& f, const ad::Var& k,
                                                     const ad::Var& m);

}  // namespace rrdet::pe
