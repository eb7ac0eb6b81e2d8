#include "rrdet/geometry.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rrdet::geo {

namespace {
constexpr double kEps = 1e-6;
}

BoxXYXY to_xyxy(const BoxCXCYWH& b) {
  return {b.x - 0.5 * b.w, b.y - 0.5 * b.h, b.x + 0.5 * b.w, b.y + 0.5 * b.h};
}

BoxCXCYWH to_cxcywh(const BoxXYXY& b) {
  return {0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2), b.x2 - b.x1, b.y2 - b.y1};
}

double area(const BoxXYXY& b) {
  return std::max(0.0, b.x2 - b.x1) * std::max(0.0, b.y2 - b.y1);
}

double iou(const BoxXYXY& a, const BoxXYXY& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = std::max(0.0, iw) * std::max(0.0, ih);
  const double uni = area(a) + area(b) - inter;
  return inter / (uni + kEps);
}

double giou(const BoxXYXY& a, const BoxXYXY& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = std::max(0.0, iw) * std::max(0.0, ih);
  const double uni = area(a) + area(b) - inter;
  const double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double enclosing = cw * ch;
  return inter / (uni + kEps) - (enclosing - uni) / (enclosing + kEps);
}

double l1(const BoxCXCYWH& a, const BoxCXCYWH& b) {
  return std::abs(a.x - b.x) + std::abs(a.y - b.y) + std::abs(a.w - b.w) + std::abs(a.h - b.h);
}

BoxCXCYWH clamp_box(const BoxCXCYWH& b) {
  BoxCXCYWH o;
  o.w = std::clamp(b.w, kMinBoxSide, 1.0);
  o.h = std::clamp(b.h, kMinBoxSide, 1.0);
  o.x = std::clamp(b.x, 0.0, 1.0);
  o.y = std::clamp(b.y, 0.0, 1.0);
  return o;
}

BoxCXCYWH apply_deltas(const BoxCXCYWH& b, const BoxDeltas& d) {
  const double dw = std::clamp(d.dw, -kDeltaClamp, kDeltaClamp);
  const double dh = std::clamp(d.dh, -kDeltaClamp, kDeltaClamp);
  BoxCXCYWH o;
  o.x = b.x + d.dx * b.w;
  o.y = b.y + d.dy * b.h;
  o.w = b.w * std::exp(dw);
  o.h = b.h * std::exp(dh);
  return clamp_box(o);
}

std::vector<double> iou_matrix(const std::vector<BoxXYXY>& a, const std::vector<BoxXYXY>& b) {
  std::vector<double> m(a.size() * b.size());
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < b.size(); ++j) m[i * b.size() + j] = iou(a[i], b[j]);
  return m;
}

std::vector<double> giou_matrix(const std::vector<BoxXYXY>& a, const std::vector<BoxXYXY>& b) {
  std::vector<double> m(a.size() * b.size());
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < b.size(); ++j) m[i * b.size() + j] = giou(a[i], b[j]);
  return m;
}

// ---------------------------------------------------------------------------
// Graph versions
// ---------------------------------------------------------------------------

namespace {

using ad::Var;

void check_boxes(const Var& v, const char* op) {
  if (v.shape().size() != 2 || v.shape()[1] != 4)
    throw std::invalid_argument(std::string(op) + ": expected an (N,4) tensor, got " +
                                shape_str(v.shape()));
}

Var col(const Var& v, int64_t i) { return ad::slice(v, 1, i, 1); }  // (N,1)

}  // namespace

Var boxes_to_xyxy(const Var& b) {
  check_boxes(b, "boxes_to_xyxy");
  Var cx = col(b, 0), cy = col(b, 1), w = col(b, 2), h = col(b, 3);
  Var hw = ad::mul_scalar(w, 0.5), hh = ad::mul_scalar(h, 0.5);
  return ad::concat({ad::sub(cx, hw), ad::sub(cy, hh), ad::add(cx, hw), ad::add(cy, hh)}, 1);
}

Var boxes_to_cxcywh(const Var& b) {
  check_boxes(b, "boxes_to_cxcywh");
  Var x1 = col(b, 0), y1 = col(b, 1), x2 = col(b, 2), y2 = col(b, 3);
  return ad::concat({ad::mul_scalar(ad::add(x1, x2), 0.5), ad::mul_scalar(ad::add(y1, y2), 0.5),
                     ad::sub(x2, x1), ad::sub(y2, y1)},
                    1);
}

Var apply_deltas(const Var& boxes, const Var& deltas) {
  check_boxes(boxes, "apply_deltas");
  check_boxes(deltas, "apply_deltas");
  Var x = col(boxes, 0), y = col(boxes, 1), w = col(boxes, 2), h = col(boxes, 3);
  Var dx = col(deltas, 0), dy = col(deltas, 1);
  Var dw = ad::clamp(col(deltas, 2), -kDeltaClamp, kDeltaClamp);
  Var dh = ad::clamp(col(deltas, 3), -kDeltaClamp, kDeltaClamp);
  Var nx = ad::clamp(ad::add(x, ad::mul(dx, w)), 0.0, 1.0);
  Var ny = ad::clamp(ad::add(y, ad::mul(dy, h)), 0.0, 1.0);
  Var nw = ad::clamp(ad::mul(w, ad::exp_op(dw)), kMinBoxSide, 1.0);
  Var nh = ad::clamp(ad::mul(h, ad::exp_op(dh)), kMinBoxSide, 1.0);
  return ad::concat({nx, ny, nw, nh}, 1);
}

Var giou_aligned(const Var& a, const Var& b) {
  check_boxes(a, "giou_aligned");
  check_boxes(b, "giou_aligned");
  if (a.shape()[0] != b.shape()[0])
    throw std::invalid_argument("giou_aligned: row counts differ");
  Var ax1 = col(a, 0), ay1 = col(a, 1), ax2 = col(a, 2), ay2 = col(a, 3);
  Var bx1 = col(b, 0), by1 = col(b, 1), bx2 = col(b, 2), by2 = col(b, 3);
  Var iw = ad::relu(ad::sub(ad::minimum(ax2, bx2), ad::maximum(ax1, bx1)));
  Var ih = ad::relu(ad::sub(ad::minimum(ay2, by2), ad::maximum(ay1, by1)));
  Var inter = ad::mul(iw, ih);
  Var area_a = ad::mul(ad::sub(ax2, ax1), ad::sub(ay2, ay1));
  Var area_b = ad::mul(ad::sub(bx2, bx1), ad::sub(by2, by1));
  Var uni = ad::sub(ad::add(area_a, area_b), inter);
  Var cw = ad::sub(ad::maximum(ax2, bx2), ad::minimum(ax1, bx1));
  Var ch = ad::sub(ad::maximum(ay2, by2), ad::minimum(ay1, by1));
  Var enclosing = ad::mul(cw, ch);
  Var out = ad::sub(ad::div_eps(inter, uni, kEps),
                    ad::div_eps(ad::sub(enclosing, uni), enclosing, kEps));
  return ad::reshape(out, {a.shape()[0]});
}

Var l1_aligned(const Var& a, const Var& b) {
  check_boxes(a, "l1_aligned");
  check_boxes(b, "l1_aligned");
  return ad::sum_axis(ad::abs_op(ad::sub(a, b)), 1);
}

Tensor boxes_tensor(const std::vector<BoxCXCYWH>& boxes, Dtype dt) {
  std::vector<double> v;
  v.reserve(boxes.size() * 4);
  for (const auto& b : boxes) {
    v.push_back(b.x);
    v.push_back(b.y);
    v.push_back(b.w);
    v.push_back(b.h);
  }
  return Tensor::from_values({static_cast<int64_t>(boxes.size()), 4}, v, dt);
}

std::vector<BoxCXCYWH> boxes_from_tensor(const Tensor& t) {
  if (t.rank() != 2 || t.dim(1) != 4)
    throw std::invalid_argument("boxes_from_tensor: expected (N,4)");
  std::vector<BoxCXCYWH> out(static_cast<size_t>(t.dim(0)));
  for (int64_t i = 0; i < t.dim(0); ++i)
    out[static_cast<size_t>(i)] = {t.get(i * 4), t.get(i * 4 + 1), t.get(i * 4 + 2),
                                   t.get(i * 4 + 3)};
  return out;
}

}  // namespace rrdet::geo
