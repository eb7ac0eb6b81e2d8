#include "rrdet/features.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rrdet {

using ad::Var;

BackboneFPN::Conv BackboneFPN::make_conv(ParamRegistry& reg, const std::string& name, int64_t ci,
                                         int64_t co, int k, int stride, Rng& rng) {
  Conv cv;
  const double stddev = std::sqrt(2.0 / static_cast<double>(ci * k * k));
  cv.w = reg.create(name + ".w", normal_init({co, ci, k, k}, stddev, rng, reg.dtype()));
  cv.b = reg.create(name + ".b", Tensor::zeros({co}, reg.dtype()));
  cv.stride = stride;
  cv.pad = k / 2;
  return cv;
}

BackboneFPN::BackboneFPN(ParamRegistry& reg, const std::string& prefix, int64_t out_channels,
                         Rng& rng)
    : c_(out_channels) {
  Rng r = rng.fork(11);
  stem_ = make_conv(reg, prefix + ".stem", 3, 8, 3, 2, r);
  const int64_t widths[5] = {8, 16, 32, 48, 64};
  for (int i = 0; i < 4; ++i) {
    const std::string b = prefix + ".b" + std::to_string(i + 1);
    down_.push_back(make_conv(reg, b + ".c1", widths[i], widths[i + 1], 3, 2, r));
    down_.push_back(make_conv(reg, b + ".c2", widths[i + 1], widths[i + 1], 3, 1, r));
  }
  for (int i = 0; i < 4; ++i)
    lateral_.push_back(
        make_conv(reg, prefix + ".lat" + std::to_string(i + 2), widths[i + 1], c_, 1, 1, r));
}

FeaturePyramid BackboneFPN::forward(const Var& image) const {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[0] != 1 || s[1] != 3)
    throw std::invalid_argument("BackboneFPN: expected a (1,3,H,W) image");
  if (s[2] % 32 != 0 || s[3] % 32 != 0)
    throw std::invalid_argument("BackboneFPN: image dims must be divisible by 32");

  Var x = ad::relu(apply(stem_, image));
  std::vector<Var> c_maps;
  for (int i = 0; i < 4; ++i) {
    x = ad::relu(apply(down_[2 * i], x));
    x = ad::relu(apply(down_[2 * i + 1], x));
    c_maps.push_back(x);
  }

  FeaturePyramid pyr;
  pyr.image_h = s[2];
  pyr.image_w = s[3];
  pyr.channels = c_;
  pyr.strides = {4, 8, 16, 32};
  pyr.levels.resize(4);
  pyr.levels[3] = apply(lateral_[3], c_maps[3]);
  for (int i = 2; i >= 0; --i)
    pyr.levels[i] = ad::add(apply(lateral_[i], c_maps[i]), ad::upsample2x(pyr.levels[i + 1]));
  return pyr;
}

namespace {

struct SamplePoint {
  int64_t x0, x1, y0, y1;  // clamped corner indices
  double fx, fy;           // interpolation fractions
};

// Continuous position p in cell units (cell k's center sits at p = k + 0.5).
inline SamplePoint locate(double px, double py, int64_t w, int64_t h) {
  const double u = px - 0.5, v = py - 0.5;
  const double fu = std::floor(u), fv = std::floor(v);
  SamplePoint sp;
  sp.fx = u - fu;
  sp.fy = v - fv;
  const auto cl = [](double i, int64_t n) {
    return std::min<int64_t>(std::max<int64_t>(static_cast<int64_t>(i), 0), n - 1);
  };
  sp.x0 = cl(fu, w);
  sp.x1 = cl(fu + 1, w);
  sp.y0 = cl(fv, h);
  sp.y1 = cl(fv + 1, h);
  return sp;
}

// a-th of the two sample offsets inside output cell g, as a fraction of the
// box side; the 2x2 samples sit at (g + 0.25)/7 and (g + 0.75)/7.
inline double cell_fraction(int64_t g, int64_t a) {
  return (static_cast<double>(g) + 0.25 + 0.5 * static_cast<double>(a)) / 7.0;
}

template <typename T>
void roi_sample_forward(const std::vector<Tensor>& levels, const Tensor& boxes,
                        const std::vector<int>& level_of, Tensor& out) {
  const int64_t n = boxes.shape()[0];
  const int64_t c = out.shape()[2];
  T* op = out.data<T>();
  for (int64_t i = 0; i < n; ++i) {
    const Tensor& lv = levels[level_of[i]];
    const T* fp = lv.data<T>();
    const int64_t lh = lv.shape()[2], lw = lv.shape()[3];
    const int64_t plane_sz = lh * lw;
    const double cx = boxes.get(i * 4 + 0), cy = boxes.get(i * 4 + 1);
    const double bw = boxes.get(i * 4 + 2), bh = boxes.get(i * 4 + 3);
    for (int64_t g = 0; g < 49; ++g) {
      const int64_t gx = g % 7, gy = g / 7;
      T* orow = op + (i * 49 + g) * c;
      for (int64_t sy = 0; sy < 2; ++sy)
        for (int64_t sx = 0; sx < 2; ++sx) {
          const double px = (cx + bw * (cell_fraction(gx, sx) - 0.5)) * lw;
          const double py = (cy + bh * (cell_fraction(gy, sy) - 0.5)) * lh;
          const SamplePoint sp = locate(px, py, lw, lh);
          const double w00 = (1 - sp.fy) * (1 - sp.fx), w01 = (1 - sp.fy) * sp.fx;
          const double w10 = sp.fy * (1 - sp.fx), w11 = sp.fy * sp.fx;
          const int64_t i00 = sp.y0 * lw + sp.x0, i01 = sp.y0 * lw + sp.x1;
          const int64_t i10 = sp.y1 * lw + sp.x0, i11 = sp.y1 * lw + sp.x1;
          const T* plane = fp;
          for (int64_t ch = 0; ch < c; ++ch, plane += plane_sz) {
            const double val =
                w00 * plane[i00] + w01 * plane[i01] + w10 * plane[i10] + w11 * plane[i11];
            orow[ch] += static_cast<T>(0.25 * val);
          }
        }
    }
  }
}

template <typename T>
void roi_sample_backward(ad::Node& nd, const std::vector<int>& level_of) {
  const Tensor& go = nd.grad;  // (N, 49, c)
  const Tensor boxes = nd.parents[4].value();
  const int64_t n = boxes.shape()[0];
  const int64_t c = go.shape()[2];
  const T* gp = go.data<T>();

  std::vector<Tensor> level_grads(4);
  for (int j = 0; j < 4; ++j)
    if (nd.parents[j].requires_grad())
      level_grads[j] = Tensor::zeros(nd.parents[j].shape(), go.dtype());
  const bool want_box = nd.parents[4].requires_grad();
  Tensor box_grad = want_box ? Tensor::zeros({n, 4}, go.dtype()) : Tensor();

  for (int64_t i = 0; i < n; ++i) {
    const Tensor& lv = nd.parents[level_of[i]].value();
    const T* fp = lv.data<T>();
    const int64_t lh = lv.shape()[2], lw = lv.shape()[3];
    const double cx = boxes.get(i * 4 + 0), cy = boxes.get(i * 4 + 1);
    const double bw = boxes.get(i * 4 + 2), bh = boxes.get(i * 4 + 3);
    T* lg = level_grads[level_of[i]].defined() ? level_grads[level_of[i]].data<T>() : nullptr;
    const int64_t plane_sz = lh * lw;
    double d_cx = 0, d_cy = 0, d_w = 0, d_h = 0;
    for (int64_t g = 0; g < 49; ++g) {
      const int64_t gx = g % 7, gy = g / 7;
      const T* grow = gp + (i * 49 + g) * c;
      for (int64_t sy = 0; sy < 2; ++sy)
        for (int64_t sx = 0; sx < 2; ++sx) {
          const double ax = cell_fraction(gx, sx), ay = cell_fraction(gy, sy);
          const double px = (cx + bw * (ax - 0.5)) * lw;
          const double py = (cy + bh * (ay - 0.5)) * lh;
          const SamplePoint sp = locate(px, py, lw, lh);
          const double w00 = (1 - sp.fy) * (1 - sp.fx), w01 = (1 - sp.fy) * sp.fx;
          const double w10 = sp.fy * (1 - sp.fx), w11 = sp.fy * sp.fx;
          const int64_t i00 = sp.y0 * lw + sp.x0, i01 = sp.y0 * lw + sp.x1;
          const int64_t i10 = sp.y1 * lw + sp.x0, i11 = sp.y1 * lw + sp.x1;
          double d_px = 0, d_py = 0;
          const T* plane = fp;
          T* gplane = lg;
          for (int64_t ch = 0; ch < c; ++ch, plane += plane_sz) {
            const double g_out = 0.25 * static_cast<double>(grow[ch]);
            if (gplane) {
              gplane[i00] += static_cast<T>(g_out * w00);
              gplane[i01] += static_cast<T>(g_out * w01);
              gplane[i10] += static_cast<T>(g_out * w10);
              gplane[i11] += static_cast<T>(g_out * w11);
              gplane += plane_sz;
            }
            if (want_box) {
              const double f00 = plane[i00], f01 = plane[i01];
              const double f10 = plane[i10], f11 = plane[i11];
              d_px += g_out * ((1 - sp.fy) * (f01 - f00) + sp.fy * (f11 - f10));
              d_py += g_out * ((1 - sp.fx) * (f10 - f00) + sp.fx * (f11 - f01));
            }
          }
          // p = (center + side * (a - 0.5)) * extent
          d_cx += d_px * lw;
          d_w += d_px * (ax - 0.5) * lw;
          d_cy += d_py * lh;
          d_h += d_py * (ay - 0.5) * lh;
        }
    }
    if (want_box) {
      box_grad.set(i * 4 + 0, box_grad.get(i * 4 + 0) + d_cx);
      box_grad.set(i * 4 + 1, box_grad.get(i * 4 + 1) + d_cy);
      box_grad.set(i * 4 + 2, box_grad.get(i * 4 + 2) + d_w);
      box_grad.set(i * 4 + 3, box_grad.get(i * 4 + 3) + d_h);
    }
  }

  for (int j = 0; j < 4; ++j)
    if (level_grads[j].defined()) ad::accumulate_grad(nd.parents[j], level_grads[j]);
  if (want_box) ad::accumulate_grad(nd.parents[4], box_grad);
}

}  // namespace

RoiAlignOut roi_align(const FeaturePyramid& pyr, const Var& boxes_cxcywh) {
  if (pyr.levels.size() != 4) throw std::invalid_argument("roi_align: pyramid must hold P2..P5");
  const Shape& bs = boxes_cxcywh.shape();
  if (bs.size() != 2 || bs[1] != 4 || bs[0] < 1)
    throw std::invalid_argument("roi_align: boxes must be (N,4)");
  const int64_t n = bs[0];
  const int64_t c = pyr.channels;
  const Dtype dt = pyr.levels[0].dtype();

  // level routing by box scale (piecewise constant, no gradient)
  Tensor bv = boxes_cxcywh.value();
  std::vector<int> level_of(n);
  for (int64_t i = 0; i < n; ++i) {
    const double area_px =
        std::max(bv.get(i * 4 + 2) * bv.get(i * 4 + 3) *
                     static_cast<double>(pyr.image_h) * static_cast<double>(pyr.image_w),
                 1e-12);
    const int lvl = static_cast<int>(std::floor(4.0 + std::log2(std::sqrt(area_px) / 224.0)));
    level_of[i] = std::clamp(lvl, 2, 5) - 2;
  }

  Tensor out = Tensor::zeros({n, 49, c}, dt);
  std::vector<Tensor> level_values;
  for (const Var& l : pyr.levels) level_values.push_back(l.value());
  if (dt == Dtype::f64)
    roi_sample_forward<double>(level_values, bv, level_of, out);
  else
    roi_sample_forward<float>(level_values, bv, level_of, out);

  std::vector<Var> parents = pyr.levels;
  parents.push_back(boxes_cxcywh);
  Var feat = ad::make_op(std::move(out), std::move(parents), [level_of, dt](ad::Node& nd) {
    if (dt == Dtype::f64)
      roi_sample_backward<double>(nd, level_of);
    else
      roi_sample_backward<float>(nd, level_of);
  });

  // global normalized cell centers, differentiable in the box parameters
  Tensor gx = Tensor::zeros({1, 49}, dt), gy = Tensor::zeros({1, 49}, dt);
  for (int64_t g = 0; g < 49; ++g) {
    gx.set(g, (static_cast<double>(g % 7) + 0.5) / 7.0 - 0.5);
    gy.set(g, (static_cast<double>(g / 7) + 0.5) / 7.0 - 0.5);
  }
  Var cxs = ad::slice(boxes_cxcywh, 1, 0, 1), cys = ad::slice(boxes_cxcywh, 1, 1, 1);
  Var ws = ad::slice(boxes_cxcywh, 1, 2, 1), hs = ad::slice(boxes_cxcywh, 1, 3, 1);
  Var px = ad::add(cxs, ad::mul(ws, ad::constant(gx)));  // (N,49)
  Var py = ad::add(cys, ad::mul(hs, ad::constant(gy)));
  Var coords = ad::concat({ad::reshape(px, {n, 49, 1}), ad::reshape(py, {n, 49, 1})}, 2);
  return {feat, coords};
}

}  // namespace rrdet
