#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rrdet/matching.h"
#include "rrdet/tensor.h"

namespace rrdet {

/// Rendered toy scene: a few colored shapes on a dark background with exact
/// ground-truth boxes. Class ids: 0 circle, 1 square, 2 triangle.
struct SyntheticScene {
  Tensor image;  // (3, H, W), values in [0, 1]
  SceneGT gt;    // normalized cxcywh boxes
};

inline constexpr int64_t kSceneSize = 128;
inline constexpr int64_t kSceneClasses = 3;
extern const char* const kSceneClassNames[kSceneClasses];

/// Deterministic per seed: same seed, same pixels, same boxes. Scenes hold
/// one to eight objects whose boxes pairwise overlap at IoU <= 0.3.
SyntheticScene generate_synthetic_scene(uint64_t seed, Dtype dt = Dtype::f32);

/// One image's worth of parsed annotations, boxes already normalized cxcywh.
struct CocoRecord {
  int64_t image_id = 0;
  std::string file_name;
  int64_t width = 0, height = 0;
  SceneGT gt;  // class ids remapped to contiguous [0, n_classes)
};

struct CocoDataset {
  std::vector<CocoRecord> records;
  std::vector<int64_t> category_ids;    // original ids, sorted; index = class id
  std::vector<std::string> category_names;
};

/// Parses a COCO-format annotation file (images/annotations/categories,
/// bbox in pixel xywh). Crowd annotations are skipped. Schema violations
/// throw std::runtime_error naming the offending key or record id.
CocoDataset load_coco_json(const std::string& path);

}  // namespace rrdet
