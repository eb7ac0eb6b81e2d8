#include "rrdet/data.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "json.hpp"
#include "rrdet/geometry.h"
#include "rrdet/rng.h"

namespace rrdet {

const char* const kSceneClassNames[kSceneClasses] = {"circle", "square", "triangle"};

namespace {

struct PixelBox {  // half-open [x0, x1) x [y0, y1) in pixel units
  double x0, y0, x1, y1;
};

geo::BoxXYXY to_unit(const PixelBox& b) {
  const double s = static_cast<double>(kSceneSize);
  return {b.x0 / s, b.y0 / s, b.x1 / s, b.y1 / s};
}

void paint(Tensor& img, int64_t x, int64_t y, const double rgb[3]) {
  const int64_t hw = kSceneSize * kSceneSize;
  for (int64_t ch = 0; ch < 3; ++ch) img.set(ch * hw + y * kSceneSize + x, rgb[ch]);
}

}  // namespace

SyntheticScene generate_synthetic_scene(uint64_t seed, Dtype dt) {
  Rng rng(seed);
  SyntheticScene scene;
  scene.image = Tensor::zeros({3, kSceneSize, kSceneSize}, dt);

  // dark, lightly speckled background
  const int64_t hw = kSceneSize * kSceneSize;
  for (int64_t p = 0; p < hw; ++p) {
    const double n = rng.uniform(0.0, 0.03);
    scene.image.set(0 * hw + p, 0.05 + n);
    scene.image.set(1 * hw + p, 0.05 + n);
    scene.image.set(2 * hw + p, 0.07 + n);
  }

  const double base_color[kSceneClasses][3] = {
      {0.85, 0.20, 0.20}, {0.20, 0.80, 0.25}, {0.25, 0.35, 0.90}};
  const int64_t n_objects = rng.uniform_int(1, 8);
  const int64_t margin = 4;

  std::vector<PixelBox> placed;
  std::vector<int64_t> classes;
  for (int64_t obj = 0; obj < n_objects; ++obj) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const int64_t cls = rng.uniform_int(0, kSceneClasses - 1);
      int64_t side = rng.uniform_int(16, 48);
      if (cls == 0) side &= ~int64_t{1};  // circles use an integer radius
      const int64_t x0 = rng.uniform_int(margin, kSceneSize - margin - side);
      const int64_t y0 = rng.uniform_int(margin, kSceneSize - margin - side);
      const PixelBox box{static_cast<double>(x0), static_cast<double>(y0),
                         static_cast<double>(x0 + side), static_cast<double>(y0 + side)};
      bool clear = true;
      for (const PixelBox& other : placed)
        if (geo::iou(to_unit(box), to_unit(other)) > 0.3) {
          clear = false;
          break;
        }
      if (!clear) continue;

      double rgb[3];
      for (int ch = 0; ch < 3; ++ch)
        rgb[ch] = std::clamp(base_color[cls][ch] + rng.uniform(-0.08, 0.08), 0.0, 1.0);

      if (cls == 0) {  // circle inscribed in the box
        const double r = side / 2.0, ccx = x0 + r, ccy = y0 + r;
        for (int64_t y = y0; y < y0 + side; ++y)
          for (int64_t x = x0; x < x0 + side; ++x) {
            const double dx = x + 0.5 - ccx, dy = y + 0.5 - ccy;
            if (dx * dx + dy * dy <= r * r) paint(scene.image, x, y, rgb);
          }
      } else if (cls == 1) {  // square fills the box exactly
        for (int64_t y = y0; y < y0 + side; ++y)
          for (int64_t x = x0; x < x0 + side; ++x) paint(scene.image, x, y, rgb);
      } else {  // isoceles triangle: apex top-center, base on the bottom edge
        const double ccx = x0 + side / 2.0;
        for (int64_t y = y0; y < y0 + side; ++y) {
          const double t = (y + 0.5 - y0) / side;
          const double half = t * side / 2.0;
          for (int64_t x = x0; x < x0 + side; ++x) {
            const double px = x + 0.5;
            if (px >= ccx - half && px <= ccx + half) paint(scene.image, x, y, rgb);
          }
        }
      }

      placed.push_back(box);
      classes.push_back(cls);
      break;
    }
  }

  const int64_t m = static_cast<int64_t>(placed.size());
  scene.gt.classes = classes;
  scene.gt.boxes = Tensor::zeros({m, 4}, Dtype::f64);
  for (int64_t j = 0; j < m; ++j) {
    const geo::BoxXYXY u = to_unit(placed[j]);
    scene.gt.boxes.set(j * 4 + 0, (u.x1 + u.x2) / 2.0);
    scene.gt.boxes.set(j * 4 + 1, (u.y1 + u.y2) / 2.0);
    scene.gt.boxes.set(j * 4 + 2, u.x2 - u.x1);
    scene.gt.boxes.set(j * 4 + 3, u.y2 - u.y1);
  }
  return scene;
}

namespace {

using nlohmann::json;

[[noreturn]] void coco_fail(const std::string& what) {
  throw std::runtime_error("coco: " + what);
}

const json& need(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) coco_fail(where + ": missing key \"" + key + "\"");
  return *it;
}

}  // namespace

CocoDataset load_coco_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) coco_fail("cannot open file " + path);
  json root;
  try {
    in >> root;
  } catch (const json::exception& e) {
    coco_fail(std::string("parse error: ") + e.what());
  }
  if (!root.is_object()) coco_fail("top level is not an object");

  const json& cats = need(root, "categories", "top level");
  const json& images = need(root, "images", "top level");
  const json& anns = need(root, "annotations", "top level");
  if (!cats.is_array() || !images.is_array() || !anns.is_array())
    coco_fail("categories/images/annotations must be arrays");

  CocoDataset ds;
  std::map<int64_t, std::string> cat_names;
  for (const json& c : cats) {
    const int64_t id = need(c, "id", "category").get<int64_t>();
    cat_names[id] = c.value("name", "");
  }
  if (cat_names.empty()) coco_fail("no categories");
  std::map<int64_t, int64_t> cat_index;
  for (const auto& [id, name] : cat_names) {
    cat_index[id] = static_cast<int64_t>(ds.category_ids.size());
    ds.category_ids.push_back(id);
    ds.category_names.push_back(name);
  }

  std::map<int64_t, size_t> image_slot;
  for (const json& im : images) {
    const std::string where = "image";
    CocoRecord rec;
    rec.image_id = need(im, "id", where).get<int64_t>();
    rec.width = need(im, "width", where + " " + std::to_string(rec.image_id)).get<int64_t>();
    rec.height = need(im, "height", where + " " + std::to_string(rec.image_id)).get<int64_t>();
    rec.file_name = im.value("file_name", "");
    if (rec.width <= 0 || rec.height <= 0)
      coco_fail("image " + std::to_string(rec.image_id) + ": non-positive dimensions");
    if (image_slot.count(rec.image_id))
      coco_fail("image " + std::to_string(rec.image_id) + ": duplicate id");
    image_slot[rec.image_id] = ds.records.size();
    ds.records.push_back(std::move(rec));
  }

  std::vector<std::vector<double>> boxes(ds.records.size());
  std::vector<std::vector<int64_t>> classes(ds.records.size());
  for (const json& a : anns) {
    const int64_t ann_id = need(a, "id", "annotation").get<int64_t>();
    const std::string where = "annotation " + std::to_string(ann_id);
    if (a.value("iscrowd", 0) != 0) continue;
    const int64_t img_id = need(a, "image_id", where).get<int64_t>();
    auto slot = image_slot.find(img_id);
    if (slot == image_slot.end()) coco_fail(where + ": unknown image_id");
    const int64_t cat = need(a, "category_id", where).get<int64_t>();
    auto ci = cat_index.find(cat);
    if (ci == cat_index.end()) coco_fail(where + ": unknown category_id");
    const json& bbox = need(a, "bbox", where);
    if (!bbox.is_array() || bbox.size() != 4) coco_fail(where + ": bbox must have 4 numbers");
    const double x = bbox[0].get<double>(), y = bbox[1].get<double>();
    const double w = bbox[2].get<double>(), h = bbox[3].get<double>();
    if (w <= 0 || h <= 0) coco_fail(where + ": non-positive bbox size");
    const CocoRecord& rec = ds.records[slot->second];
    const double iw = static_cast<double>(rec.width), ih = static_cast<double>(rec.height);
    auto& bx = boxes[slot->second];
    bx.push_back((x + w / 2.0) / iw);
    bx.push_back((y + h / 2.0) / ih);
    bx.push_back(w / iw);
    bx.push_back(h / ih);
    classes[slot->second].push_back(ci->second);
  }

  for (size_t s = 0; s < ds.records.size(); ++s) {
    const int64_t m = static_cast<int64_t>(classes[s].size());
    ds.records[s].gt.classes = std::move(classes[s]);
    ds.records[s].gt.boxes = Tensor::zeros({m, 4}, Dtype::f64);
    for (int64_t i = 0; i < m * 4; ++i) ds.records[s].gt.boxes.set(i, boxes[s][i]);
  }
  return ds;
}

}  // namespace rrdet
