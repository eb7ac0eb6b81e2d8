#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "rrdet/autodiff.h"
#include "rrdet/geometry.h"
#include "rrdet/gradcheck.h"
#include "rrdet/rng.h"

using namespace rrdet;
using namespace rrdet::geo;

namespace {

BoxCXCYWH random_box(Rng& r) {
  return {r.uniform(0.2, 0.8), r.uniform(0.2, 0.8), r.uniform(0.05, 0.4), r.uniform(0.05, 0.4)};
}

}  // namespace

TEST_CASE("corner/center conversions match hand arithmetic") {
  const BoxXYXY full = to_xyxy({0.5, 0.5, 1.0, 1.0});
  CHECK(full.x1 == doctest::Approx(0.0));
  CHECK(full.y1 == doctest::Approx(0.0));
  CHECK(full.x2 == doctest::Approx(1.0));
  CHECK(full.y2 == doctest::Approx(1.0));

  const BoxXYXY b = to_xyxy({0.5, 0.5, 0.2, 0.4});
  CHECK(b.x1 == doctest::Approx(0.4));
  CHECK(b.y1 == doctest::Approx(0.3));
  CHECK(b.x2 == doctest::Approx(0.6));
  CHECK(b.y2 == doctest::Approx(0.7));
}

TEST_CASE("conversion round-trips on a thousand random boxes") {
  Rng r(31);
  for (int i = 0; i < 1000; ++i) {
    const BoxCXCYWH b = random_box(r);
    const BoxCXCYWH back = to_cxcywh(to_xyxy(b));
    CHECK(back.x == doctest::Approx(b.x).epsilon(1e-12));
    CHECK(back.y == doctest::Approx(b.y).epsilon(1e-12));
    CHECK(back.w == doctest::Approx(b.w).epsilon(1e-12));
    CHECK(back.h == doctest::Approx(b.h).epsilon(1e-12));
  }
}

TEST_CASE("giou hand-derived values") {
  const BoxXYXY unit{0, 0, 1, 1};
  CHECK(giou(unit, unit) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(iou(unit, unit) == doctest::Approx(1.0).epsilon(1e-5));

  // disjoint diagonal neighbour: union 2, enclosing 4 -> 0 - 2/4
  CHECK(giou(unit, {1, 1, 2, 2}) == doctest::Approx(-0.5).epsilon(1e-5));
  // disjoint with a gap: union 2, enclosing 9 -> 0 - 7/9
  CHECK(giou(unit, {2, 2, 3, 3}) == doctest::Approx(-7.0 / 9.0).epsilon(1e-5));
  CHECK(iou(unit, {2, 2, 3, 3}) == doctest::Approx(0.0));

  // nested box of half the area: enclosing equals the outer box
  const BoxXYXY inner{0.25, 0, 0.75, 1};
  CHECK(iou(unit, inner) == doctest::Approx(0.5).epsilon(1e-5));
  CHECK(giou(unit, inner) == doctest::Approx(0.5).epsilon(1e-5));
}

TEST_CASE("giou is symmetric, bounded by iou, and translation invariant") {
  Rng r(32);
  for (int i = 0; i < 500; ++i) {
    const BoxXYXY a = to_xyxy(random_box(r));
    const BoxXYXY b = to_xyxy(random_box(r));
    CHECK(giou(a, b) == giou(b, a));
    CHECK(giou(a, b) <= iou(a, b) + 1e-12);
    CHECK(giou(a, b) > -1.0);
    CHECK(giou(a, b) <= 1.0);

    const double sx = r.uniform(-0.1, 0.1), sy = r.uniform(-0.1, 0.1);
    const BoxXYXY at{a.x1 + sx, a.y1 + sy, a.x2 + sx, a.y2 + sy};
    const BoxXYXY bt{b.x1 + sx, b.y1 + sy, b.x2 + sx, b.y2 + sy};
    CHECK(giou(at, bt) == doctest::Approx(giou(a, b)).epsilon(1e-9));
    CHECK(iou(at, bt) == doctest::Approx(iou(a, b)).epsilon(1e-9));
  }
}

TEST_CASE("degenerate zero-area operands stay finite") {
  const BoxXYXY point{0.5, 0.5, 0.5, 0.5};
  CHECK(std::isfinite(giou(point, point)));
  CHECK(std::isfinite(iou(point, {0, 0, 1, 1})));
}

TEST_CASE("apply_deltas follows the update rule") {
  const BoxCXCYWH b{0.5, 0.5, 0.2, 0.2};
  const BoxCXCYWH same = apply_deltas(b, {0, 0, 0, 0});
  CHECK(same.x == doctest::Approx(0.5));
  CHECK(same.y == doctest::Approx(0.5));
  CHECK(same.w == doctest::Approx(0.2));
  CHECK(same.h == doctest::Approx(0.2));

  const BoxCXCYWH moved = apply_deltas(b, {1, 0, 0, 0});
  CHECK(moved.x == doctest::Approx(0.7));
  CHECK(moved.y == doctest::Approx(0.5));

  // oversized log-scale delta is clamped to 4 before exponentiation, and the
  // resulting side is clamped to the image
  const BoxCXCYWH grown = apply_deltas({0.5, 0.5, 0.01, 0.01}, {0, 0, 10, 3});
  CHECK(grown.w == doctest::Approx(std::min(1.0, 0.01 * std::exp(4.0))));
  CHECK(grown.h == doctest::Approx(0.01 * std::exp(3.0)));

  const BoxCXCYWH shrunk = apply_deltas({0.5, 0.5, 0.5, 0.5}, {0, 0, -10, -10});
  CHECK(shrunk.w == doctest::Approx(std::max(kMinBoxSide, 0.5 * std::exp(-4.0))));
  CHECK(shrunk.w >= kMinBoxSide);
}

TEST_CASE("pairwise matrices agree with the scalar kernels") {
  Rng r(33);
  std::vector<BoxXYXY> a, b;
  for (int i = 0; i < 5; ++i) a.push_back(to_xyxy(random_box(r)));
  for (int i = 0; i < 7; ++i) b.push_back(to_xyxy(random_box(r)));
  const auto gm = giou_matrix(a, b);
  const auto im = iou_matrix(a, b);
  REQUIRE(gm.size() == 35);
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < b.size(); ++j) {
      CHECK(gm[i * 7 + j] == giou(a[i], b[j]));
      CHECK(im[i * 7 + j] == iou(a[i], b[j]));
    }
}

TEST_CASE("graph box ops reproduce the scalar path") {
  Rng r(34);
  std::vector<BoxCXCYWH> boxes, targets;
  std::vector<BoxDeltas> deltas;
  std::vector<double> dvals;
  for (int i = 0; i < 16; ++i) {
    boxes.push_back(random_box(r));
    targets.push_back(random_box(r));
    BoxDeltas d{r.uniform(-0.5, 0.5), r.uniform(-0.5, 0.5), r.uniform(-1, 1), r.uniform(-1, 1)};
    deltas.push_back(d);
    dvals.insert(dvals.end(), {d.dx, d.dy, d.dw, d.dh});
  }
  ad::Var vb = ad::constant(boxes_tensor(boxes, Dtype::f64));
  ad::Var vt = ad::constant(boxes_tensor(targets, Dtype::f64));
  ad::Var vd = ad::constant(Tensor::from_values({16, 4}, dvals, Dtype::f64));

  const auto updated = boxes_from_tensor(apply_deltas(vb, vd).value());
  for (int i = 0; i < 16; ++i) {
    const BoxCXCYWH want = apply_deltas(boxes[static_cast<size_t>(i)],
                                        deltas[static_cast<size_t>(i)]);
    CHECK(updated[static_cast<size_t>(i)].x == doctest::Approx(want.x).epsilon(1e-12));
    CHECK(updated[static_cast<size_t>(i)].y == doctest::Approx(want.y).epsilon(1e-12));
    CHECK(updated[static_cast<size_t>(i)].w == doctest::Approx(want.w).epsilon(1e-12));
    CHECK(updated[static_cast<size_t>(i)].h == doctest::Approx(want.h).epsilon(1e-12));
  }

  const Tensor g = giou_aligned(boxes_to_xyxy(vb), boxes_to_xyxy(vt)).value();
  const Tensor l = l1_aligned(vb, vt).value();
  for (int i = 0; i < 16; ++i) {
    const auto& A = boxes[static_cast<size_t>(i)];
    const auto& B = targets[static_cast<size_t>(i)];
    CHECK(g.get(i) == doctest::Approx(giou(to_xyxy(A), to_xyxy(B))).epsilon(1e-12));
    CHECK(l.get(i) == doctest::Approx(l1(A, B)).epsilon(1e-12));
  }

  // conversion round-trip through the graph path
  const Tensor round = boxes_to_cxcywh(boxes_to_xyxy(vb)).value();
  for (int64_t i = 0; i < round.numel(); ++i)
    CHECK(round.get(i) == doctest::Approx(vb.value().get(i)).epsilon(1e-12));
}

TEST_CASE("box losses pass finite differences through the update rule") {
  Rng r(35);
  const int64_t n = 6;
  std::vector<double> base, tgt, dv, wv;
  for (int64_t i = 0; i < n; ++i) {
    const BoxCXCYWH g = random_box(r);
    // prediction starts near the target so pairs overlap and stay away from
    // min/max tie points
    base.insert(base.end(),
                {g.x + r.uniform(0.02, 0.06), g.y - r.uniform(0.02, 0.06),
                 g.w * r.uniform(1.1, 1.3), g.h * r.uniform(0.7, 0.9)});
    tgt.insert(tgt.end(), {g.x, g.y, g.w, g.h});
    dv.insert(dv.end(), {r.uniform(-0.2, 0.2), r.uniform(-0.2, 0.2), r.uniform(-0.3, 0.3),
                         r.uniform(-0.3, 0.3)});
    wv.insert(wv.end(), {r.uniform(0.5, 1.5)});
  }
  Tensor boxes = Tensor::from_values({n, 4}, base, Dtype::f64);
  Tensor targets = Tensor::from_values({n, 4}, tgt, Dtype::f64);
  Tensor deltas = Tensor::from_values({n, 4}, dv, Dtype::f64);
  Tensor weights = Tensor::from_values({n}, wv, Dtype::f64);

  auto loss = [&targets, &weights](const std::vector<ad::Var>& v) {
    ad::Var updated = apply_deltas(v[0], v[1]);
    ad::Var tg = ad::constant(targets);
    ad::Var wc = ad::constant(weights);
    ad::Var gl = ad::sum_all(ad::mul(giou_aligned(boxes_to_xyxy(updated), boxes_to_xyxy(tg)), wc));
    ad::Var ll = ad::sum_all(ad::mul(l1_aligned(updated, tg), wc));
    return ad::add(gl, ll);
  };
  const auto res = ad::check_gradient(loss, {boxes, deltas}, 1e-6, 1e-4);
  INFO("max rel err " << res.max_rel_err << " at " << res.worst);
  CHECK(res.pass);
}
