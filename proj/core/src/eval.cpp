#include "rrdet/eval.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace rrdet {

namespace {

std::array<double, 10> iou_thresholds() {
  std::array<double, 10> t{};
  for (int i = 0; i < 10; ++i) t[i] = 0.5 + 0.05 * i;
  return t;
}

bool detection_before(const Detection& a, const Detection& b) {
  return std::tie(b.score, a.image, a.cls, a.box.x1, a.box.y1, a.box.x2, a.box.y2) <
         std::tie(a.score, b.image, b.cls, b.box.x1, b.box.y1, b.box.x2, b.box.y2);
}

/// 101-point interpolated AP from a score-sorted TP/FP sequence.
double interpolated_ap(const std::vector<char>& tp, int64_t n_gt) {
  std::vector<double> precision(tp.size()), recall(tp.size());
  int64_t hits = 0;
  for (size_t i = 0; i < tp.size(); ++i) {
    hits += tp[i];
    precision[i] = static_cast<double>(hits) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(hits) / static_cast<double>(n_gt);
  }
  // running max from the end makes precision monotone in recall
  for (size_t i = precision.size(); i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double total = 0.0;
  size_t j = 0;
  for (int r = 0; r <= 100; ++r) {
    const double want = r / 100.0;
    while (j < recall.size() && recall[j] < want - 1e-12) ++j;
    if (j < precision.size()) total += precision[j];
  }
  return total / 101.0;
}

}  // namespace

std::vector<Detection> extract_detections(const StagePrediction& pred, int64_t image_index) {
  const Tensor& logits = pred.class_logits.value();
  const Tensor& boxes = pred.boxes.value();
  const int64_t n = logits.shape()[0];
  const int64_t k = logits.shape()[1];
  std::vector<Detection> dets;
  for (int64_t i = 0; i < n; ++i) {
    const geo::BoxCXCYWH b{boxes.get(i * 4), boxes.get(i * 4 + 1), boxes.get(i * 4 + 2),
                           boxes.get(i * 4 + 3)};
    const geo::BoxXYXY xy = geo::to_xyxy(b);
    for (int64_t c = 0; c < k; ++c) {
      const double score = 1.0 / (1.0 + std::exp(-logits.get(i * k + c)));
      if (score < kScoreThreshold) continue;
      dets.push_back({image_index, c, score, xy});
    }
  }
  std::sort(dets.begin(), dets.end(), detection_before);
  if (static_cast<int64_t>(dets.size()) > kMaxDetectionsPerImage)
    dets.resize(kMaxDetectionsPerImage);
  return dets;
}

APReport ap_from_detections(std::vector<Detection> dets, const std::vector<SceneGT>& gts,
                            int64_t n_classes) {
  if (gts.empty()) throw std::invalid_argument("ap_from_detections: no images");
  if (n_classes < 1) throw std::invalid_argument("ap_from_detections: n_classes must be positive");
  std::sort(dets.begin(), dets.end(), detection_before);

  // ground truth boxes grouped by (image, class)
  struct GTBox {
    geo::BoxXYXY box;
    bool used = false;
  };
  const int64_t n_images = static_cast<int64_t>(gts.size());
  std::vector<std::vector<std::vector<GTBox>>> gt(n_images);
  std::vector<int64_t> gt_count(n_classes, 0);
  for (int64_t img = 0; img < n_images; ++img) {
    gt[img].resize(n_classes);
    const auto boxes = geo::boxes_from_tensor(gts[img].boxes);
    for (int64_t j = 0; j < gts[img].size(); ++j) {
      const int64_t c = gts[img].classes[j];
      if (c < 0 || c >= n_classes)
        throw std::invalid_argument("ap_from_detections: class id out of range");
      gt[img][c].push_back({geo::to_xyxy(boxes[j]), false});
      ++gt_count[c];
    }
  }
  for (const Detection& d : dets)
    if (d.image < 0 || d.image >= n_images)
      throw std::invalid_argument("ap_from_detections: detection image index out of range");

  const auto thresholds = iou_thresholds();
  APReport rep;
  rep.per_class.assign(n_classes, -1.0);
  std::array<double, 10> mean_at_thr{};
  std::array<int64_t, 10> classes_at_thr{};
  for (int64_t c = 0; c < n_classes; ++c) {
    if (gt_count[c] == 0) continue;  // class absent from the ground truth
    double class_sum = 0.0;
    for (size_t ti = 0; ti < thresholds.size(); ++ti) {
      for (auto& per_image : gt)
        for (auto& g : per_image[c]) g.used = false;
      std::vector<char> tp;
      tp.reserve(dets.size());
      for (const Detection& d : dets) {
        if (d.cls != c) continue;
        auto& candidates = gt[d.image][c];
        double best = thresholds[ti];
        int64_t best_j = -1;
        for (size_t j = 0; j < candidates.size(); ++j) {
          if (candidates[j].used) continue;
          const double ov = geo::iou(d.box, candidates[j].box);
          if (ov >= best) {
            best = ov;
            best_j = static_cast<int64_t>(j);
          }
        }
        if (best_j >= 0) {
          candidates[best_j].used = true;
          tp.push_back(1);
        } else {
          tp.push_back(0);
        }
      }
      const double ap = interpolated_ap(tp, gt_count[c]);
      class_sum += ap;
      mean_at_thr[ti] += ap;
      ++classes_at_thr[ti];
    }
    rep.per_class[c] = class_sum / thresholds.size();
  }

  int64_t present = 0;
  for (int64_t c = 0; c < n_classes; ++c)
    if (rep.per_class[c] >= 0) {
      rep.ap += rep.per_class[c];
      ++present;
    }
  if (present == 0) throw std::invalid_argument("ap_from_detections: no ground truth objects");
  rep.ap /= present;
  rep.ap50 = mean_at_thr[0] / classes_at_thr[0];
  rep.ap75 = mean_at_thr[5] / classes_at_thr[5];
  return rep;
}

APReport evaluate_scenes(const DetectionModel& model, const std::vector<SyntheticScene>& scenes,
                         int64_t stages) {
  if (scenes.empty()) throw std::invalid_argument("evaluate_scenes: no scenes");
  std::vector<Detection> dets;
  std::vector<SceneGT> gts;
  gts.reserve(scenes.size());
  for (size_t i = 0; i < scenes.size(); ++i) {
    const auto preds = model.forward(scenes[i].image, stages);
    const auto image_dets = extract_detections(preds.back(), static_cast<int64_t>(i));
    dets.insert(dets.end(), image_dets.begin(), image_dets.end());
    gts.push_back(scenes[i].gt);
  }
  return ap_from_detections(std::move(dets), gts, kSceneClasses);
}

std::vector<SyntheticScene> make_eval_scenes(uint64_t run_seed, int64_t count, Dtype dt) {
  std::vector<SyntheticScene> scenes;
  scenes.reserve(count);
  for (int64_t i = 0; i < count; ++i)
    scenes.push_back(generate_synthetic_scene(eval_scene_seed(run_seed, i), dt));
  return scenes;
}

std::vector<TruncationPoint> truncation_sweep(const DetectionModel& model,
                                              const std::vector<SyntheticScene>& scenes) {
  std::vector<TruncationPoint> points;
  for (int64_t k = 1; k <= model.decoder->config().n_stages; ++k)
    points.push_back({k, evaluate_scenes(model, scenes, k)});
  return points;
}

std::string truncation_csv(const std::vector<TruncationPoint>& points) {
  std::ostringstream os;
  os << "stage_count,ap,ap50,ap75\n";
  os << std::setprecision(17);
  for (const auto& p : points)
    os << p.stages << ',' << p.report.ap << ',' << p.report.ap50 << ',' << p.report.ap75 << '\n';
  return os.str();
}

}  // namespace rrdet
