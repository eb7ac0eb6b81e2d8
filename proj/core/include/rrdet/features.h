#pragma once

#include <utility>
#include <vector>

#include "rrdet/autodiff.h"
#include "rrdet/params.h"

namespace rrdet {

/// Multi-scale features P2..P5 for one image. Level i has stride 2^(i+2)
/// relative to the input and `channels` channels; spatial extents halve from
/// one level to the next.
struct FeaturePyramid {
  std::vector<ad::Var> levels;  // each (1, c, H_l, W_l), ordered P2..P5
  std::vector<int> strides;     // {4, 8, 16, 32}
  int64_t image_h = 0;
  int64_t image_w = 0;
  int64_t channels = 0;
};

/// Small strided conv net with a top-down lateral pathway. A stem halves the
/// input, four blocks halve it again each; 1x1 laterals bring every scale to
/// the requested width and are fused top-down with nearest upsampling.
class BackboneFPN {
 public:
  BackboneFPN() = default;
  BackboneFPN(ParamRegistry& reg, const std::string& prefix, int64_t out_channels, Rng& rng);

  /// image: (1, 3, H, W) with H, W divisible by 32.
  FeaturePyramid forward(const ad::Var& image) const;

  int64_t out_channels() const { return c_; }

 private:
  struct Conv {
    ad::Var w, b;
    int stride = 1, pad = 0;
  };
  Conv make_conv(ParamRegistry& reg, const std::string& name, int64_t ci, int64_t co, int k,
                 int stride, Rng& rng);
  static ad::Var apply(const Conv& cv, const ad::Var& x) {
    return ad::conv2d(x, cv.w, cv.b, cv.stride, cv.pad);
  }

  int64_t c_ = 0;
  Conv stem_;
  std::vector<Conv> down_;      // two convs per block, stride 2 then 1
  std::vector<Conv> lateral_;   // 1x1 onto c_
};

struct RoiAlignOut {
  ad::Var features;  // (N, 49, c)
  ad::Var coords;    // (N, 49, 2) global normalized (x, y) cell centers
};

/// Samples a 7x7 grid from the pyramid for each box (normalized cxcywh).
/// Level choice follows the canonical-size rule
///   l = clamp(floor(4 + log2(sqrt(w*h*H*W) / 224)), 2, 5),
/// each output cell averages 2x2 bilinear samples, and out-of-range samples
/// clamp to the border. Gradients flow to both the feature maps and the box
/// coordinates.
RoiAlignOut roi_align(const FeaturePyramid& pyramid, const ad::Var& boxes_cxcywh);

}  // namespace rrdet
