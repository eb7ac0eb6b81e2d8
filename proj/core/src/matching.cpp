#include "rrdet/matching.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace rrdet {

namespace {

constexpr double kFocalEps = 1e-8;

double pow_gamma(double x, double gamma) {
  return gamma == 2.0 ? x * x : std::pow(x, gamma);
}

// Per-entry focal classification cost, positive-minus-negative form.
double focal_cost(double logit, const LossWeights& w) {
  const double p = 1.0 / (1.0 + std::exp(-logit));
  const double pos = w.focal_alpha * pow_gamma(1.0 - p, w.focal_gamma) * (-std::log(p + kFocalEps));
  const double neg =
      (1.0 - w.focal_alpha) * pow_gamma(p, w.focal_gamma) * (-std::log(1.0 - p + kFocalEps));
  return pos - neg;
}

ad::Var pow_gamma_graph(const ad::Var& x, double gamma) {
  if (gamma == 2.0) return ad::mul(x, x);
  return ad::exp_op(ad::mul_scalar(ad::log_eps(x, kFocalEps), gamma));
}

ad::Var scalar_zero(Dtype dt) { return ad::constant(Tensor::zeros({1}, dt)); }

void check_gt(const SceneGT& gt, int64_t n_classes) {
  if (gt.size() > 0) {
    const auto& s = gt.boxes.shape();
    if (s.size() != 2 || s[0] != gt.size() || s[1] != 4)
      throw std::invalid_argument("ground truth boxes must be (M, 4)");
  }
  for (int64_t c : gt.classes)
    if (c < 0 || c >= n_classes) throw std::invalid_argument("ground truth class out of range");
}

}  // namespace

Tensor cost_matrix(const StagePrediction& pred, const SceneGT& gt, const LossWeights& w) {
  const auto& ls = pred.class_logits.shape();
  if (ls.size() != 2) throw std::invalid_argument("cost_matrix: logits must be (N, K)");
  const int64_t n = ls[0], k = ls[1], m = gt.size();
  check_gt(gt, k);
  Tensor out = Tensor::zeros({n, m}, Dtype::f64);
  if (m == 0) return out;

  const Tensor& logits = pred.class_logits.value();
  const std::vector<geo::BoxCXCYWH> pb = geo::boxes_from_tensor(pred.boxes.value());
  const std::vector<geo::BoxCXCYWH> gb = geo::boxes_from_tensor(gt.boxes);
  std::vector<geo::BoxXYXY> pxy(pb.size()), gxy(gb.size());
  std::transform(pb.begin(), pb.end(), pxy.begin(), geo::to_xyxy);
  std::transform(gb.begin(), gb.end(), gxy.begin(), geo::to_xyxy);
  const std::vector<double> giou = geo::giou_matrix(pxy, gxy);

  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < m; ++j) {
      const double cls = focal_cost(logits.get(i * k + gt.classes[j]), w);
      out.set(i * m + j, w.lambda_cls * cls + w.lambda_l1 * geo::l1(pb[i], gb[j]) +
                             w.lambda_giou * (1.0 - giou[i * m + j]));
    }
  }
  return out;
}

Assignment hungarian(const Tensor& cost) {
  const auto& s = cost.shape();
  if (s.size() != 2) throw std::invalid_argument("hungarian: cost must be rank 2");
  const int64_t n_pred = s[0], n_gt = s[1];
  Assignment out;
  if (n_gt == 0) return out;
  if (n_pred < n_gt)
    throw std::invalid_argument("hungarian: needs at least as many predictions as ground truths");
  for (int64_t i = 0; i < cost.numel(); ++i)
    if (!std::isfinite(cost.get(i))) throw std::invalid_argument("hungarian: non-finite cost");

  // Shortest augmenting paths with potentials; ground truths play the role
  // of the scarce side. 1-based arrays, index 0 is the virtual start.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n_gt + 1, 0.0), v(n_pred + 1, 0.0);
  std::vector<int64_t> match(n_pred + 1, 0), way(n_pred + 1, 0);
  for (int64_t g = 1; g <= n_gt; ++g) {
    match[0] = g;
    int64_t j0 = 0;
    std::vector<double> minv(n_pred + 1, inf);
    std::vector<char> used(n_pred + 1, 0);
    do {
      used[j0] = 1;
      const int64_t g0 = match[j0];
      int64_t j1 = 0;
      double delta = inf;
      for (int64_t j = 1; j <= n_pred; ++j) {
        if (used[j]) continue;
        const double cur = cost.get((j - 1) * n_gt + (g0 - 1)) - u[g0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {  // strict: first minimal column wins ties
          delta = minv[j];
          j1 = j;
        }
      }
      for (int64_t j = 0; j <= n_pred; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int64_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  out.pairs.resize(n_gt);
  for (int64_t j = 1; j <= n_pred; ++j)
    if (match[j] != 0) out.pairs[match[j] - 1] = {j - 1, match[j] - 1};
  for (const auto& [pi, gj] : out.pairs) out.total_cost += cost.get(pi * n_gt + gj);
  return out;
}

LossBreakdown set_criterion(const std::vector<StagePrediction>& preds, const SceneGT& gt,
                            const LossWeights& w) {
  if (preds.empty()) throw std::invalid_argument("set_criterion: needs at least one stage");
  const Dtype dt = preds.front().class_logits.dtype();
  const double denom = static_cast<double>(std::max<int64_t>(gt.size(), 1));

  LossBreakdown out;
  out.total = scalar_zero(dt);
  for (const StagePrediction& pred : preds) {
    const auto& ls = pred.class_logits.shape();
    const int64_t n = ls[0], k = ls[1];
    StageLoss stage;
    if (gt.size() > 0) stage.assignment = hungarian(cost_matrix(pred, gt, w));

    Tensor targets = Tensor::zeros({n, k}, dt);
    Tensor not_targets = Tensor::full({n, k}, 1.0, dt);
    for (const auto& [pi, gj] : stage.assignment.pairs) {
      targets.set(pi * k + gt.classes[gj], 1.0);
      not_targets.set(pi * k + gt.classes[gj], 0.0);
    }
    ad::Var t = ad::constant(targets);
    ad::Var not_t = ad::constant(not_targets);
    ad::Var p = ad::sigmoid(pred.class_logits);
    ad::Var q = ad::add_scalar(ad::neg(p), 1.0);  // 1 - p
    ad::Var pos = ad::mul(t, ad::mul(pow_gamma_graph(q, w.focal_gamma),
                                     ad::neg(ad::log_eps(p, kFocalEps))));
    ad::Var neg = ad::mul(not_t, ad::mul(pow_gamma_graph(p, w.focal_gamma),
                                         ad::neg(ad::log_eps(q, kFocalEps))));
    ad::Var focal = ad::add(ad::mul_scalar(pos, w.focal_alpha),
                            ad::mul_scalar(neg, 1.0 - w.focal_alpha));
    stage.cls = ad::mul_scalar(ad::sum_all(focal), 1.0 / denom);

    if (!stage.assignment.pairs.empty()) {
      const int64_t km = static_cast<int64_t>(stage.assignment.pairs.size());
      std::vector<int64_t> pred_idx(km);
      Tensor gtb = Tensor::zeros({km, 4}, dt);
      for (int64_t r = 0; r < km; ++r) {
        pred_idx[r] = stage.assignment.pairs[r].first;
        const int64_t gj = stage.assignment.pairs[r].second;
        for (int64_t c = 0; c < 4; ++c) gtb.set(r * 4 + c, gt.boxes.get(gj * 4 + c));
      }
      ad::Var pb = ad::gather_rows(pred.boxes, pred_idx);
      ad::Var gb = ad::constant(gtb);
      stage.l1 = ad::mul_scalar(ad::sum_all(geo::l1_aligned(pb, gb)), 1.0 / denom);
      ad::Var g = geo::giou_aligned(geo::boxes_to_xyxy(pb), geo::boxes_to_xyxy(gb));
      stage.giou = ad::mul_scalar(ad::sum_all(ad::add_scalar(ad::neg(g), 1.0)), 1.0 / denom);
    } else {
      stage.l1 = scalar_zero(dt);
      stage.giou = scalar_zero(dt);
    }

    out.total = ad::add(out.total, ad::add(ad::add(ad::mul_scalar(stage.cls, w.lambda_cls),
                                                   ad::mul_scalar(stage.l1, w.lambda_l1)),
                                           ad::mul_scalar(stage.giou, w.lambda_giou)));
    out.stages.push_back(std::move(stage));
  }
  return out;
}

}  // namespace rrdet
