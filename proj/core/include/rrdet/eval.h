#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rrdet/data.h"
#include "rrdet/geometry.h"
#include "rrdet/train.h"

namespace rrdet {

struct Detection {
  int64_t image = 0;
  int64_t cls = 0;
  double score = 0.0;
  geo::BoxXYXY box;  // normalized
};

struct APReport {
  double ap = 0.0;    // mean over IoU thresholds 0.50:0.05:0.95
  double ap50 = 0.0;
  double ap75 = 0.0;
  std::vector<double> per_class;  // mean over thresholds; -1 for absent classes
};

inline constexpr double kScoreThreshold = 0.05;
inline constexpr int64_t kMaxDetectionsPerImage = 100;

/// Turns one stage's predictions into thresholded detections for one image.
std::vector<Detection> extract_detections(const StagePrediction& pred, int64_t image_index);

/// 101-point interpolated average precision over the ten COCO IoU
/// thresholds. Detection order does not matter: ties are broken by
/// (score desc, image, class, box coordinates). Classes without any ground
/// truth are excluded from the means.
APReport ap_from_detections(std::vector<Detection> dets, const std::vector<SceneGT>& gts,
                            int64_t n_classes);

/// Runs the model at the given recursion depth over the scenes.
APReport evaluate_scenes(const DetectionModel& model, const std::vector<SyntheticScene>& scenes,
                         int64_t stages = -1);

/// Fixed evaluation set derived from the run seed (disjoint from training
/// scenes).
std::vector<SyntheticScene> make_eval_scenes(uint64_t run_seed, int64_t count, Dtype dt);

struct TruncationPoint {
  int64_t stages;
  APReport report;
};

/// Evaluates the same weights at every inference depth 1..n_stages.
std::vector<TruncationPoint> truncation_sweep(const DetectionModel& model,
                                              const std::vector<SyntheticScene>& scenes);

/// CSV writers used by the command-line tools; byte-stable for fixed inputs.
std::string truncation_csv(const std::vector<TruncationPoint>& points);

}  // namespace rrdet
