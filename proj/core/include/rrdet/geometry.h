#pragma once

#include <vector>

#include "rrdet/autodiff.h"

namespace rrdet::geo {

// Boxes live in normalized image units: centers in [0,1], sides in (0,1].
struct BoxCXCYWH {
  double x = 0, y = 0, w = 0, h = 0;
};

struct BoxXYXY {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// Center offsets are scaled by the current width/height; size deltas are
// log-scale and clamped to [-4, 4] before exponentiation.
struct BoxDeltas {
  double dx = 0, dy = 0, dw = 0, dh = 0;
};

constexpr double kMinBoxSide = 1e-3;
constexpr double kDeltaClamp = 4.0;

BoxXYXY to_xyxy(const BoxCXCYWH& b);
BoxCXCYWH to_cxcywh(const BoxXYXY& b);

double area(const BoxXYXY& b);
double iou(const BoxXYXY& a, const BoxXYXY& b);
/// IoU minus the enclosing-box penalty |C \ (A u B)| / |C|; in (-1, 1].
double giou(const BoxXYXY& a, const BoxXYXY& b);
/// Sum of absolute differences over the four components.
double l1(const BoxCXCYWH& a, const BoxCXCYWH& b);

/// Scale-invariant update: x' = x + dx*w, w' = w*exp(dw), then clamped to
/// the image with minimum side kMinBoxSide.
BoxCXCYWH apply_deltas(const BoxCXCYWH& b, const BoxDeltas& d);
BoxCXCYWH clamp_box(const BoxCXCYWH& b);

/// Row-major |a| x |b| matrices for assignment costs.
std::vector<double> iou_matrix(const std::vector<BoxXYXY>& a, const std::vector<BoxXYXY>& b);
std::vector<double> giou_matrix(const std::vector<BoxXYXY>& a, const std::vector<BoxXYXY>& b);

// ---------------------------------------------------------------------------
// Graph versions: rows of (N,4) tensors, differentiable end to end. They
// follow the scalar semantics exactly so either path can check the other.
// ---------------------------------------------------------------------------

ad::Var boxes_to_xyxy(const ad::Var& cxcywh);
ad::Var boxes_to_cxcywh(const ad::Var& xyxy);
ad::Var apply_deltas(const ad::Var& boxes_cxcywh, const ad::Var& deltas);
/// Row-aligned GIoU of two (K,4) xyxy tensors -> (K).
ad::Var giou_aligned(const ad::Var& a_xyxy, const ad::Var& b_xyxy);
/// Row-aligned L1 distance of two (K,4) cxcywh tensors -> (K).
ad::Var l1_aligned(const ad::Var& a, const ad::Var& b);

// Plain-value bridges.
Tensor boxes_tensor(const std::vector<BoxCXCYWH>& boxes, Dtype dt);
std::vector<BoxCXCYWH> boxes_from_tensor(const Tensor& t);

}  // namespace rrdet::geo
