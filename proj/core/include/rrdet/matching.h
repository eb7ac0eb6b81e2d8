#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "rrdet/decoder.h"
#include "rrdet/geometry.h"
#include "rrdet/tensor.h"

namespace rrdet {

struct LossWeights {
  double lambda_cls = 2.0;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

/// Ground truth for one image: class ids and normalized cxcywh boxes.
struct SceneGT {
  std::vector<int64_t> classes;  // each in [0, n_classes)
  Tensor boxes;                  // (M, 4); M == classes.size(), possibly 0

  int64_t size() const { return static_cast<int64_t>(classes.size()); }
};

/// One-to-one matching result. pairs[g] = (prediction index, g), one entry
/// per ground-truth object; predictions absent from the list are background.
struct Assignment {
  std::vector<std::pair<int64_t, int64_t>> pairs;
  double total_cost = 0.0;
};

/// (N, M) matching costs: entry (i, j) combines the focal classification
/// cost of prediction i against class j (positive-minus-negative form), the
/// L1 distance of the normalized boxes, and 1 - GIoU, with the same weights
/// as the training loss. M == 0 yields an (N, 0) matrix.
Tensor cost_matrix(const StagePrediction& pred, const SceneGT& gt, const LossWeights& w);

/// Minimum-cost injective assignment of every column (ground truth) to a
/// distinct row (prediction); requires rows >= columns and finite entries.
/// Deterministic; cost ties resolve toward lower prediction indices.
Assignment hungarian(const Tensor& cost);

struct StageLoss {
  ad::Var cls;   // focal BCE over every prediction, / max(num GT, 1)
  ad::Var l1;    // matched pairs only, / max(num GT, 1)
  ad::Var giou;  // sum of (1 - GIoU) over matched pairs, / max(num GT, 1)
  Assignment assignment;
};

struct LossBreakdown {
  std::vector<StageLoss> stages;
  ad::Var total;  // sum over stages of the lambda-weighted components
};

/// Set-prediction criterion: matches every stage independently against the
/// ground truth and sums the weighted stage losses. Matched predictions are
/// supervised toward their object's class and box; unmatched ones toward
/// all-zero class scores.
LossBreakdown set_criterion(const std::vector<StagePrediction>& preds, const SceneGT& gt,
                            const LossWeights& w);

}  // namespace rrdet
