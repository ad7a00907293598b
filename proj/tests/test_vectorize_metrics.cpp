#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "pmap/metrics.hpp"
#include "pmap/rng.hpp"

using namespace pmap;
using Catch::Approx;

// --- Independent oracles ---------------------------------------------------

namespace {

// Recursive flood fill, structurally unlike the library's explicit stack.
void cc_oracle_fill(const std::vector<uint8_t>& mask, int64_t rows, int64_t cols, int64_t r,
                    int64_t c, int32_t id, int connectivity, std::vector<int32_t>& labels) {
  if (r < 0 || r >= rows || c < 0 || c >= cols) return;
  size_t i = static_cast<size_t>(r * cols + c);
  if (!mask[i] || labels[i]) return;
  labels[i] = id;
  cc_oracle_fill(mask, rows, cols, r - 1, c, id, connectivity, labels);
  cc_oracle_fill(mask, rows, cols, r + 1, c, id, connectivity, labels);
  cc_oracle_fill(mask, rows, cols, r, c - 1, id, connectivity, labels);
  cc_oracle_fill(mask, rows, cols, r, c + 1, id, connectivity, labels);
  if (connectivity == 8) {
    cc_oracle_fill(mask, rows, cols, r - 1, c - 1, id, connectivity, labels);
    cc_oracle_fill(mask, rows, cols, r - 1, c + 1, id, connectivity, labels);
    cc_oracle_fill(mask, rows, cols, r + 1, c - 1, id, connectivity, labels);
    cc_oracle_fill(mask, rows, cols, r + 1, c + 1, id, connectivity, labels);
  }
}

int32_t cc_oracle(const std::vector<uint8_t>& mask, int64_t rows, int64_t cols,
                  int connectivity) {
  std::vector<int32_t> labels(static_cast<size_t>(rows * cols), 0);
  int32_t count = 0;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c)
      if (mask[static_cast<size_t>(r * cols + c)] && !labels[static_cast<size_t>(r * cols + c)])
        cc_oracle_fill(mask, rows, cols, r, c, ++count, connectivity, labels);
  return count;
}

// Arclength-table resampler: prefix sums plus direct interpolation per sample.
std::vector<Vec2> resample_oracle(const Polyline& pl, double pitch) {
  std::vector<double> cum{0.0};
  for (size_t i = 0; i + 1 < pl.points.size(); ++i)
    cum.push_back(cum.back() + norm(pl.points[i + 1] - pl.points[i]));
  double total = cum.back();
  auto at = [&](double s) -> Vec2 {
    size_t seg = 1;
    while (seg + 1 < cum.size() && cum[seg] < s) ++seg;
    double seg_len = cum[seg] - cum[seg - 1];
    double t = seg_len > 0 ? (s - cum[seg - 1]) / seg_len : 0.0;
    return pl.points[seg - 1] + t * (pl.points[seg] - pl.points[seg - 1]);
  };
  std::vector<Vec2> out;
  int64_t n = static_cast<int64_t>(std::floor(total / pitch + 1e-12));
  for (int64_t i = 0; i <= n; ++i) out.push_back(at(static_cast<double>(i) * pitch));
  if (total - static_cast<double>(n) * pitch > 1e-12) out.push_back(pl.points.back());
  return out;
}

double chamfer_oracle(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
  double sa = 0.0;
  for (const Vec2& p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vec2& q : b) best = std::min(best, std::hypot(p.x - q.x, p.y - q.y));
    sa += best;
  }
  double sb = 0.0;
  for (const Vec2& q : b) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vec2& p : a) best = std::min(best, std::hypot(p.x - q.x, p.y - q.y));
    sb += best;
  }
  return 0.5 * (sa / static_cast<double>(a.size()) + sb / static_cast<double>(b.size()));
}

// Trapezoid-free all-points AUC: each true positive contributes one recall
// step weighted by the best precision at or after its rank.
double ap_oracle(std::vector<Detection> dets, int64_t gt_count) {
  if (gt_count == 0) return dets.empty() ? 1.0 : 0.0;
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    return a.confidence > b.confidence;
  });
  double ap = 0.0;
  int64_t tp = 0;
  for (size_t i = 0; i < dets.size(); ++i) {
    if (!dets[i].tp) continue;
    ++tp;
    double best_prec = 0.0;
    int64_t tp_j = 0;
    for (size_t j = 0; j < dets.size(); ++j) {
      tp_j += dets[j].tp;
      if (j >= i)
        best_prec = std::max(best_prec, static_cast<double>(tp_j) / static_cast<double>(j + 1));
    }
    ap += best_prec / static_cast<double>(gt_count);
  }
  return ap;
}

// Greedy matcher mirror used on fixtures where the raster gate never binds.
std::vector<Detection> match_oracle(const std::vector<Instance>& preds,
                                    const std::vector<Polyline>& gts, double thr) {
  std::vector<size_t> order(preds.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return preds[a].confidence > preds[b].confidence; });
  std::vector<char> taken(gts.size(), 0);
  std::vector<Detection> out(preds.size());
  for (size_t oi : order) {
    out[oi].confidence = preds[oi].confidence;
    double best_cd = std::numeric_limits<double>::infinity();
    int64_t best = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      double cd = chamfer_oracle(resample_oracle(preds[oi].polyline, 0.1),
                                 resample_oracle(gts[g], 0.1));
      if (cd <= thr && cd < best_cd) {
        best_cd = cd;
        best = static_cast<int64_t>(g);
      }
    }
    if (best >= 0) {
      taken[static_cast<size_t>(best)] = 1;
      out[oi].tp = true;
    }
  }
  return out;
}

std::vector<uint8_t> random_mask(Rng& rng, int64_t rows, int64_t cols, double fill) {
  std::vector<uint8_t> m(static_cast<size_t>(rows * cols));
  for (auto& v : m) v = rng.uniform() < fill ? 1 : 0;
  return m;
}

Polyline hline(double y, double x0, double x1, int cls) {
  return Polyline{{{x0, y}, {x1, y}}, cls};
}

}  // namespace

// --- Connected components --------------------------------------------------

TEST_CASE("connected components match a recursive oracle") {
  SECTION("fixtures") {
    std::vector<uint8_t> empty(12, 0);
    CHECK(count_components(empty, 3, 4) == 0);
    std::vector<uint8_t> full(12, 1);
    CHECK(count_components(full, 3, 4) == 1);
    // Two cells touching only diagonally.
    std::vector<uint8_t> diag = {1, 0, 0, 1};
    CHECK(count_components(diag, 2, 2, 8) == 1);
    CHECK(count_components(diag, 2, 2, 4) == 2);
  }
  SECTION("labels are first-seen row-major") {
    std::vector<uint8_t> m = {1, 0, 1,  //
                              0, 0, 0,  //
                              1, 0, 1};
    std::vector<int32_t> labels;
    int32_t n = connected_components(m, 3, 3, labels, 4);
    REQUIRE(n == 4);
    CHECK(labels[0] == 1);
    CHECK(labels[2] == 2);
    CHECK(labels[6] == 3);
    CHECK(labels[8] == 4);
  }
  SECTION("random masks") {
    Rng rng(401);
    for (int trial = 0; trial < 60; ++trial) {
      int64_t rows = 12, cols = 18;
      auto m = random_mask(rng, rows, cols, 0.4);
      for (int conn : {4, 8}) {
        CHECK(count_components(m, rows, cols, conn) == cc_oracle(m, rows, cols, conn));
      }
    }
  }
  SECTION("bad connectivity") {
    std::vector<uint8_t> m(4, 1);
    std::vector<int32_t> labels;
    CHECK_THROWS_AS(connected_components(m, 2, 2, labels, 5), InvalidArgument);
  }
}

// --- Thinning --------------------------------------------------------------

TEST_CASE("thinning preserves topology and is idempotent") {
  Rng rng(402);
  for (int trial = 0; trial < 12; ++trial) {
    int64_t rows = 24, cols = 24;
    std::vector<uint8_t> mask(static_cast<size_t>(rows * cols), 0);
    // Union of a few random filled rectangles.
    int blobs = 1 + static_cast<int>(rng.uniform_index(3));
    for (int b = 0; b < blobs; ++b) {
      int64_t r0 = static_cast<int64_t>(rng.uniform_index(16));
      int64_t c0 = static_cast<int64_t>(rng.uniform_index(16));
      int64_t h = 2 + static_cast<int64_t>(rng.uniform_index(6));
      int64_t w = 2 + static_cast<int64_t>(rng.uniform_index(6));
      for (int64_t r = r0; r < std::min(rows, r0 + h); ++r)
        for (int64_t c = c0; c < std::min(cols, c0 + w); ++c)
          mask[static_cast<size_t>(r * cols + c)] = 1;
    }
    auto thin = thin_mask(mask, rows, cols);
    size_t on_before = 0, on_after = 0;
    for (size_t i = 0; i < mask.size(); ++i) {
      on_before += mask[i];
      on_after += thin[i];
      CHECK(thin[i] <= mask[i]);  // skeleton is a subset
    }
    CHECK(on_after >= 1);
    CHECK(on_after <= on_before);
    CHECK(count_components(thin, rows, cols, 8) == count_components(mask, rows, cols, 8));
    CHECK(thin_mask(thin, rows, cols) == thin);  // idempotent
    // No fully interior cell survives: some 3x3 neighborhood cell is off.
    for (int64_t r = 1; r + 1 < rows; ++r)
      for (int64_t c = 1; c + 1 < cols; ++c) {
        int full = 1;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc)
            full &= thin[static_cast<size_t>((r + dr) * cols + c + dc)];
        CHECK_FALSE(full);
      }
  }
  SECTION("singletons and empties survive unchanged") {
    std::vector<uint8_t> empty(25, 0);
    CHECK(thin_mask(empty, 5, 5) == empty);
    std::vector<uint8_t> single(25, 0);
    single[12] = 1;
    CHECK(thin_mask(single, 5, 5) == single);
  }
}

// --- Skeleton tracing ------------------------------------------------------

TEST_CASE("skeleton tracing covers each cell once with adjacent steps") {
  auto check_partition = [](const std::vector<uint8_t>& mask, int64_t rows, int64_t cols) {
    auto paths = trace_skeleton(mask, rows, cols);
    std::set<int64_t> seen;
    for (const auto& path : paths) {
      REQUIRE(!path.empty());
      for (size_t i = 0; i < path.size(); ++i) {
        CHECK(mask[static_cast<size_t>(path[i])] == 1);
        CHECK(seen.insert(path[i]).second);  // visited exactly once
        if (i > 0) {
          int64_t dr = std::abs(path[i] / cols - path[i - 1] / cols);
          int64_t dc = std::abs(path[i] % cols - path[i - 1] % cols);
          CHECK(std::max(dr, dc) == 1);  // 8-adjacent consecutive cells
        }
      }
    }
    size_t on = 0;
    for (auto v : mask) on += v;
    CHECK(seen.size() == on);
    return paths;
  };

  SECTION("straight line is one ordered path") {
    std::vector<uint8_t> mask(5 * 8, 0);
    for (int64_t c = 1; c <= 6; ++c) mask[static_cast<size_t>(2 * 8 + c)] = 1;
    auto paths = check_partition(mask, 5, 8);
    REQUIRE(paths.size() == 1);
    REQUIRE(paths[0].size() == 6);
    for (size_t i = 0; i < 6; ++i) CHECK(paths[0][i] == 2 * 8 + 1 + static_cast<int64_t>(i));
  }
  SECTION("closed ring has no endpoints yet still traces") {
    int64_t rows = 8, cols = 8;
    std::vector<uint8_t> mask(static_cast<size_t>(rows * cols), 0);
    for (int64_t i = 1; i <= 6; ++i) {
      mask[static_cast<size_t>(1 * cols + i)] = 1;
      mask[static_cast<size_t>(6 * cols + i)] = 1;
      mask[static_cast<size_t>(i * cols + 1)] = 1;
      mask[static_cast<size_t>(i * cols + 6)] = 1;
    }
    auto paths = check_partition(mask, rows, cols);
    REQUIRE(paths.size() == 1);
    CHECK(paths[0].size() == 20);
    CHECK(paths[0][0] == 1 * cols + 1);  // row-major first cell seeds the cycle walk
  }
  SECTION("random thinned blobs partition cleanly") {
    Rng rng(403);
    for (int trial = 0; trial < 10; ++trial) {
      auto mask = random_mask(rng, 16, 16, 0.35);
      check_partition(thin_mask(mask, 16, 16), 16, 16);
    }
  }
}

// --- Simplification --------------------------------------------------------

TEST_CASE("polyline simplification keeps corners and drops noise") {
  SECTION("collinear points collapse to endpoints") {
    std::vector<Vec2> pts;
    for (int i = 0; i <= 10; ++i) pts.push_back({0.1 * i, 0.0});
    auto out = rdp_simplify(pts, 0.2);
    REQUIRE(out.size() == 2);
    CHECK(out[0].x == Approx(0.0));
    CHECK(out[1].x == Approx(1.0));
  }
  SECTION("deviation below epsilon is dropped, above is kept") {
    std::vector<Vec2> small = {{0, 0}, {1, 0.1}, {2, 0}};
    CHECK(rdp_simplify(small, 0.2).size() == 2);
    std::vector<Vec2> big = {{0, 0}, {1, 0.3}, {2, 0}};
    auto kept = rdp_simplify(big, 0.2);
    REQUIRE(kept.size() == 3);
    CHECK(kept[1].y == Approx(0.3));
  }
  SECTION("simplified polyline stays within epsilon of the original") {
    Rng rng(404);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<Vec2> pts{{0, 0}};
      for (int i = 1; i <= 30; ++i)
        pts.push_back({0.2 * i, rng.uniform(-0.5, 0.5)});
      auto out = rdp_simplify(pts, 0.25);
      REQUIRE(out.size() >= 2);
      // Every original point lies within eps of the simplified chain.
      for (const Vec2& p : pts) {
        double best = std::numeric_limits<double>::infinity();
        for (size_t i = 0; i + 1 < out.size(); ++i)
          best = std::min(best, point_segment_distance(p, out[i], out[i + 1]));
        CHECK(best <= 0.25 + 1e-12);
      }
    }
  }
  SECTION("short inputs pass through") {
    std::vector<Vec2> two = {{0, 0}, {1, 1}};
    CHECK(rdp_simplify(two, 10.0).size() == 2);
  }
}

// --- Vectorization ---------------------------------------------------------

TEST_CASE("vectorization recovers well-separated ground truth") {
  GridSpec grid = grid_for_range(20.0, 10.0, 0.1);
  REQUIRE(grid.rows == 100);
  REQUIRE(grid.cols == 200);

  SECTION("one instance per class at exact cell centers") {
    std::vector<Polyline> gt = {
        hline(2.0, -8.0, 8.0, kDivider),
        Polyline{{{5.0, -1.0}, {5.0, 1.0}}, kPedCrossing},
        hline(-3.0, -8.0, 8.0, kBoundary),
    };
    SemanticRaster raster = rasterize_polylines(gt, grid, grid.resolution_m);
    auto instances = vectorize(raster);
    REQUIRE(instances.size() == 3);
    CHECK(instances[0].polyline.class_id == kDivider);
    CHECK(instances[1].polyline.class_id == kPedCrossing);
    CHECK(instances[2].polyline.class_id == kBoundary);
    for (size_t i = 0; i < 3; ++i) {
      CHECK(instances[i].confidence == Approx(1.0));
      CHECK(chamfer_polylines(instances[i].polyline, gt[i]) < grid.resolution_m);
      CHECK(instances[i].polyline.points.size() == 2);  // straight lines simplify fully
    }
  }

  SECTION("confidence averages the class probability along the path") {
    Tensor<float> probs({grid.rows, grid.cols, kNumChannels});
    for (int64_t i = 0; i < grid.rows * grid.cols; ++i)
      probs[i * kNumChannels + kBackground] = 1.0f;
    int64_t r = 50;
    for (int64_t c = 40; c <= 80; ++c) {
      probs[(r * grid.cols + c) * kNumChannels + kBackground] = 0.2f;
      probs[(r * grid.cols + c) * kNumChannels + kDivider] = 0.8f;
    }
    auto instances = vectorize(probs, grid);
    REQUIRE(instances.size() == 1);
    CHECK(instances[0].confidence == Approx(0.8).margin(1e-6));
  }

  SECTION("threshold is strict") {
    Tensor<float> probs({grid.rows, grid.cols, kNumChannels});
    for (int64_t i = 0; i < grid.rows * grid.cols; ++i)
      probs[i * kNumChannels + kBackground] = 1.0f;
    probs[(50 * grid.cols + 100) * kNumChannels + kDivider] = 0.5f;
    CHECK(vectorize(probs, grid).empty());
  }

  SECTION("an isolated cell becomes a two-point stub") {
    Tensor<float> probs({grid.rows, grid.cols, kNumChannels});
    for (int64_t i = 0; i < grid.rows * grid.cols; ++i)
      probs[i * kNumChannels + kBackground] = 1.0f;
    probs[(50 * grid.cols + 100) * kNumChannels + kDivider] = 0.9f;
    auto instances = vectorize(probs, grid);
    REQUIRE(instances.size() == 1);
    REQUIRE(instances[0].polyline.points.size() == 2);
    CHECK(instances[0].polyline.points[0].x == Approx(0.0));
    CHECK(instances[0].polyline.points[0].y == Approx(0.0));
    CHECK(instances[0].polyline.points[1].x == Approx(grid.resolution_m / 2.0));
    CHECK(instances[0].confidence == Approx(0.9));
  }

  SECTION("logits rasters are softmaxed first") {
    SemanticRaster raster = rasterize_polylines({hline(0.0, -5.0, 5.0, kDivider)}, grid,
                                                grid.resolution_m);
    SemanticRaster logits{grid, raster.values, RasterKind::logits};
    // One-hot scaled into decisive logits.
    for (int64_t i = 0; i < logits.values.numel(); ++i) logits.values[i] *= 10.0f;
    auto instances = vectorize(logits);
    REQUIRE(instances.size() == 1);
    CHECK(instances[0].polyline.class_id == kDivider);
  }

  SECTION("shape mismatch throws") {
    Tensor<float> probs({4, 4, kNumChannels});
    CHECK_THROWS_AS(vectorize(probs, grid), ShapeError);
  }
}

TEST_CASE("instance json round trip") {
  std::vector<Instance> instances = {
      {hline(1.0, -2.0, 2.0, kDivider), 0.75},
      {Polyline{{{0, 0}, {1, 1}, {2, 0}}, kBoundary}, 0.5},
  };
  auto doc = instances_to_json(instances);
  auto back = instances_from_json(doc);
  REQUIRE(back.size() == 2);
  CHECK(back[0].confidence == Approx(0.75));
  CHECK(back[0].polyline.class_id == kDivider);
  CHECK(back[1].polyline.points.size() == 3);

  SECTION("confidence defaults to 1") {
    nlohmann::json j = {{"polylines",
                         {{{"class", 0}, {"points", {{0.0, 0.0}, {1.0, 0.0}}}}}}};
    auto out = instances_from_json(j);
    REQUIRE(out.size() == 1);
    CHECK(out[0].confidence == 1.0);
  }
  SECTION("missing polylines key throws") {
    CHECK_THROWS_AS(instances_from_json(nlohmann::json::object()), ParseError);
  }
}

// --- IoU -------------------------------------------------------------------

TEST_CASE("mask iou matches cell count oracle") {
  CHECK(iou_masks({1, 1, 0}, {1, 1, 0}) == 1.0);
  CHECK(iou_masks({1, 0, 0}, {0, 1, 0}) == 0.0);
  CHECK(iou_masks({0, 0}, {0, 0}) == 1.0);  // both empty
  CHECK_THROWS_AS(iou_masks({1}, {1, 0}), ShapeError);

  Rng rng(405);
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_mask(rng, 8, 8, 0.5);
    auto b = random_mask(rng, 8, 8, 0.5);
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.size(); ++i) {
      inter += a[i] && b[i];
      uni += a[i] || b[i];
    }
    double expect = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    CHECK(iou_masks(a, b) == Approx(expect));
    CHECK(iou_masks(a, b) == iou_masks(b, a));  // symmetric
  }
}

// --- Resampling & Chamfer --------------------------------------------------

TEST_CASE("resampling spaces points along arclength") {
  SECTION("unit segment at 0.1 pitch gives 11 points") {
    Polyline pl = hline(0.0, 0.0, 1.0, kDivider);
    auto pts = resample_polyline(pl, 0.1);
    REQUIRE(pts.size() == 11);
    for (size_t i = 0; i < pts.size(); ++i) CHECK(pts[i].x == Approx(0.1 * i));
  }
  SECTION("non-multiple length keeps the endpoint") {
    Polyline pl = hline(0.0, 0.0, 0.95, kDivider);
    auto pts = resample_polyline(pl, 0.1);
    REQUIRE(pts.size() == 11);
    CHECK(pts.back().x == Approx(0.95));
  }
  SECTION("matches the arclength-table oracle across corners") {
    Rng rng(406);
    for (int trial = 0; trial < 50; ++trial) {
      Polyline pl;
      pl.class_id = kDivider;
      int n = 2 + static_cast<int>(rng.uniform_index(5));
      for (int i = 0; i < n; ++i)
        pl.points.push_back({rng.uniform(-3, 3), rng.uniform(-3, 3)});
      auto got = resample_polyline(pl, 0.1);
      auto want = resample_oracle(pl, 0.1);
      REQUIRE(got.size() == want.size());
      for (size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i].x == Approx(want[i].x).margin(1e-9));
        CHECK(got[i].y == Approx(want[i].y).margin(1e-9));
      }
    }
  }
  SECTION("preconditions") {
    Polyline single{{{0, 0}}, kDivider};
    CHECK_THROWS_AS(resample_polyline(single, 0.1), InvalidArgument);
    Polyline ok = hline(0.0, 0.0, 1.0, kDivider);
    CHECK_THROWS_AS(resample_polyline(ok, 0.0), InvalidArgument);
  }
}

TEST_CASE("chamfer distance matches brute force") {
  SECTION("identity and symmetry are exact") {
    Polyline a{{{0, 0}, {1, 0.5}, {2, 0}}, kDivider};
    Polyline b{{{0, 1}, {2, 1.5}}, kDivider};
    CHECK(chamfer_polylines(a, a) == 0.0);
    CHECK(chamfer_polylines(a, b) == chamfer_polylines(b, a));
  }
  SECTION("parallel lines offset by delta") {
    for (double delta : {0.3, 0.7, 1.2}) {
      Polyline a = hline(0.0, -4.0, 4.0, kDivider);
      Polyline b = hline(delta, -4.0, 4.0, kDivider);
      CHECK(chamfer_polylines(a, b) == Approx(delta).epsilon(1e-12));
    }
  }
  SECTION("random point sets against the n-squared oracle") {
    Rng rng(407);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<Vec2> a, b;
      for (int i = 0; i < 5; ++i) {
        a.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2)});
        b.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2)});
      }
      CHECK(chamfer(a, b) == Approx(chamfer_oracle(a, b)).epsilon(1e-12));
    }
  }
  SECTION("empty sets are rejected") {
    std::vector<Vec2> some = {{0, 0}};
    std::vector<Vec2> none;
    CHECK_THROWS_AS(chamfer(none, some), InvalidArgument);
    CHECK_THROWS_AS(chamfer(some, none), InvalidArgument);
  }
}

// --- Average precision -----------------------------------------------------

TEST_CASE("average precision follows all-points interpolation") {
  SECTION("hand-computed curve") {
    // Ranked: TP, FP, TP with 2 GT. Precisions 1, 1/2, 2/3; envelope 1, 2/3, 2/3.
    std::vector<Detection> dets = {{0.9, true}, {0.8, false}, {0.7, true}};
    CHECK(average_precision(dets, 2) == Approx(0.5 * 1.0 + 0.5 * (2.0 / 3.0)));
  }
  SECTION("conventions") {
    CHECK(average_precision({}, 0) == 1.0);
    CHECK(average_precision({{0.9, false}}, 0) == 0.0);
    CHECK(average_precision({}, 3) == 0.0);
    CHECK(average_precision({{0.9, true}}, 1) == 1.0);
  }
  SECTION("random detection sets against the per-TP oracle") {
    Rng rng(408);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<Detection> dets;
      int n = static_cast<int>(rng.uniform_index(10));
      for (int i = 0; i < n; ++i)
        dets.push_back({rng.uniform(), rng.uniform() < 0.5});
      int64_t gt = static_cast<int64_t>(rng.uniform_index(6));
      CHECK(average_precision(dets, gt) == Approx(ap_oracle(dets, gt)).margin(1e-12));
    }
  }
}

TEST_CASE("instance ap matches the matching protocol") {
  GridSpec grid = grid_for_range(20.0, 10.0, 0.1);

  SECTION("exact match scores 1 at every threshold") {
    std::vector<Polyline> gt = {hline(1.0, -6.0, 6.0, kDivider)};
    std::vector<Instance> pred = {{gt[0], 0.9}};
    auto ap = instance_ap(pred, gt, grid);
    for (size_t t = 0; t < 3; ++t) CHECK(ap[0][t] == 1.0);
    CHECK(instance_map(ap) == Approx(1.0));  // empty classes are perfect by convention
  }

  SECTION("cd 0.7 passes only the looser thresholds") {
    std::vector<Polyline> gt = {hline(0.0, -6.0, 6.0, kDivider)};
    std::vector<Instance> pred = {{hline(0.7, -6.0, 6.0, kDivider), 0.9}};
    auto ap = instance_ap(pred, gt, grid);
    CHECK(ap[0][0] == 0.0);
    CHECK(ap[0][1] == 1.0);
    CHECK(ap[0][2] == 1.0);
  }

  SECTION("empty-class conventions") {
    auto ap = instance_ap({}, {}, grid);
    for (int c = 0; c < kNumForegroundClasses; ++c)
      for (size_t t = 0; t < 3; ++t) CHECK(ap[static_cast<size_t>(c)][t] == 1.0);
    std::vector<Instance> stray = {{hline(0.0, -2.0, 2.0, kPedCrossing), 0.4}};
    auto ap2 = instance_ap(stray, {}, grid);
    CHECK(ap2[kPedCrossing][0] == 0.0);
    CHECK(ap2[kDivider][0] == 1.0);  // unaffected class stays empty-perfect
  }

  SECTION("three predictions, two gt, against the brute-force oracle") {
    std::vector<Polyline> gt = {hline(-2.0, -8.0, 8.0, kDivider),
                                hline(2.0, -8.0, 8.0, kDivider)};
    std::vector<Instance> pred = {
        {hline(-4.5, -8.0, 8.0, kDivider), 0.95},  // far from both: always FP
        {hline(-1.3, -8.0, 8.0, kDivider), 0.9},   // cd 0.7 to the first gt
        {hline(2.7, -8.0, 8.0, kDivider), 0.8},    // cd 0.7 to the second gt
    };
    auto ap = instance_ap(pred, gt, grid);
    for (size_t t = 0; t < 3; ++t) {
      auto dets = match_oracle(pred, gt, kCdThresholds[t]);
      CHECK(ap[0][t] == Approx(ap_oracle(dets, 2)).margin(1e-12));
    }
    CHECK(ap[0][0] == 0.0);
    CHECK(ap[0][1] == Approx(2.0 / 3.0));  // ranked FP, TP, TP with 2 gt
    CHECK(ap[0][2] == Approx(2.0 / 3.0));
  }

  SECTION("greedy prefers the nearest unmatched gt") {
    std::vector<Polyline> gt = {hline(0.0, -6.0, 6.0, kDivider),
                                hline(0.6, -6.0, 6.0, kDivider)};
    std::vector<Instance> pred = {
        {hline(0.2, -6.0, 6.0, kDivider), 0.9},  // nearest is y=0
        {hline(0.5, -6.0, 6.0, kDivider), 0.8},  // leftover y=0.6 is 0.1 away
    };
    auto dets = match_instances(pred, gt, 0.5, grid);
    CHECK(dets[0].tp);
    CHECK(dets[1].tp);
  }

  SECTION("raster gate rejects barely-overlapping parallel pairs") {
    std::vector<Polyline> gt = {hline(0.0, -6.0, 6.0, kDivider)};
    std::vector<Instance> pred = {{hline(1.3, -6.0, 6.0, kDivider), 0.9}};
    // cd 1.3 <= 1.5, but footprints at 1.5 m thickness overlap under iou 0.2.
    auto dets = match_instances(pred, gt, 1.5, grid);
    CHECK_FALSE(dets[0].tp);
    auto ap = instance_ap(pred, gt, grid);
    CHECK(ap[0][2] == 0.0);
  }

  SECTION("ap is invariant under monotone confidence rescaling") {
    std::vector<Polyline> gt = {hline(-2.0, -8.0, 8.0, kDivider),
                                hline(2.0, -8.0, 8.0, kDivider)};
    std::vector<Instance> pred = {
        {hline(-1.6, -8.0, 8.0, kDivider), 0.9},
        {hline(2.3, -8.0, 8.0, kDivider), 0.6},
        {hline(4.5, -8.0, 8.0, kDivider), 0.3},
    };
    auto base = instance_ap(pred, gt, grid);
    for (auto& inst : pred) inst.confidence = 0.1 + 0.5 * inst.confidence * inst.confidence;
    auto scaled = instance_ap(pred, gt, grid);
    for (int c = 0; c < kNumForegroundClasses; ++c)
      for (size_t t = 0; t < 3; ++t)
        CHECK(base[static_cast<size_t>(c)][t] == scaled[static_cast<size_t>(c)][t]);
  }
}

// --- Fragmentation ---------------------------------------------------------

TEST_CASE("fragmentation counts extra components") {
  int64_t rows = 6, cols = 20;
  auto labels_of = [&](const std::vector<std::pair<int64_t, int64_t>>& runs, int cls) {
    std::vector<uint8_t> labels(static_cast<size_t>(rows * cols),
                                static_cast<uint8_t>(kBackground));
    for (auto [c0, c1] : runs)
      for (int64_t c = c0; c <= c1; ++c)
        labels[static_cast<size_t>(2 * cols + c)] = static_cast<uint8_t>(cls);
    return labels;
  };

  SECTION("identical rasters score zero") {
    auto gt = labels_of({{2, 17}}, kDivider);
    CHECK(fragmentation_score(gt, gt, rows, cols) == 0.0);
  }
  SECTION("one line broken into three scores two") {
    auto gt = labels_of({{2, 17}}, kDivider);
    auto pred = labels_of({{2, 5}, {8, 11}, {14, 17}}, kDivider);
    CHECK(fragmentation_score(pred, gt, rows, cols) == Approx(2.0));
  }
  SECTION("fewer components than gt clamps at zero") {
    auto gt = labels_of({{2, 5}, {8, 11}}, kDivider);
    auto pred = labels_of({{2, 11}}, kDivider);
    CHECK(fragmentation_score(pred, gt, rows, cols) == 0.0);
  }
  SECTION("random rasters match the component-count oracle") {
    Rng rng(409);
    for (int trial = 0; trial < 40; ++trial) {
      std::vector<uint8_t> pred(static_cast<size_t>(rows * cols)),
          gt(static_cast<size_t>(rows * cols));
      for (size_t i = 0; i < pred.size(); ++i) {
        pred[i] = static_cast<uint8_t>(rng.uniform_index(kNumChannels));
        gt[i] = static_cast<uint8_t>(rng.uniform_index(kNumChannels));
      }
      double total = 0.0;
      int active = 0;
      for (int cls = 0; cls < kNumForegroundClasses; ++cls) {
        std::vector<uint8_t> pm(pred.size()), gm(gt.size());
        for (size_t i = 0; i < pred.size(); ++i) {
          pm[i] = pred[i] == cls;
          gm[i] = gt[i] == cls;
        }
        int32_t cp = cc_oracle(pm, rows, cols, 8);
        int32_t cg = cc_oracle(gm, rows, cols, 8);
        if (cp == 0 && cg == 0) continue;
        ++active;
        total += std::max(0, cp - cg) / static_cast<double>(std::max(1, cg));
      }
      double expect = active ? total / active : 0.0;
      CHECK(fragmentation_score(pred, gt, rows, cols) == Approx(expect).margin(1e-12));
    }
  }
  SECTION("shape mismatch throws") {
    std::vector<uint8_t> a(10, 0), b(12, 0);
    CHECK_THROWS_AS(fragmentation_score(a, b, 2, 5), ShapeError);
  }
}

// --- Far/near split --------------------------------------------------------

TEST_CASE("far and near splits use cell centers") {
  GridSpec grid = grid_for_range(8.0, 4.0, 0.5);  // near: |x| <= 2

  SECTION("symmetric scene gives equal halves") {
    std::vector<Polyline> shape = {hline(0.0, -3.5, 3.5, kDivider)};
    auto gt = rasterize_labels(shape, grid, grid.resolution_m).labels;
    auto pred = gt;
    // Perturb symmetrically: drop the outermost gt cell on each side.
    auto drop = [&](double x) {
      auto rc = grid.cell_of({x, 0.0});
      REQUIRE(rc.has_value());
      pred[static_cast<size_t>(rc->first * grid.cols + rc->second)] =
          static_cast<uint8_t>(kBackground);
    };
    drop(-3.5);
    drop(3.5);
    auto [near, far] = split_far_near(pred, gt, grid);
    CHECK(near.miou == 1.0);  // dropped cells are both far
    CHECK(far.iou[kDivider] < 1.0);
  }

  SECTION("empty far region uses the both-empty convention") {
    std::vector<Polyline> shape = {hline(0.0, -1.5, 1.5, kDivider)};  // near-only line
    auto gt = rasterize_labels(shape, grid, grid.resolution_m).labels;
    auto [near, far] = split_far_near(gt, gt, grid);
    CHECK(near.iou[kDivider] == 1.0);
    CHECK(far.iou[kDivider] == 1.0);  // nothing far in either raster
    CHECK(far.miou == 1.0);
  }

  SECTION("random rasters match the masked oracle") {
    Rng rng(410);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<uint8_t> pred(static_cast<size_t>(grid.rows * grid.cols)),
          gt(pred.size());
      for (size_t i = 0; i < pred.size(); ++i) {
        pred[i] = static_cast<uint8_t>(rng.uniform_index(kNumChannels));
        gt[i] = static_cast<uint8_t>(rng.uniform_index(kNumChannels));
      }
      auto [near, far] = split_far_near(pred, gt, grid);
      for (int cls = 0; cls < kNumForegroundClasses; ++cls) {
        int64_t inter[2] = {0, 0}, uni[2] = {0, 0};
        for (int64_t r = 0; r < grid.rows; ++r)
          for (int64_t c = 0; c < grid.cols; ++c) {
            size_t i = static_cast<size_t>(r * grid.cols + c);
            int region = std::abs(grid.cell_center(r, c).x) <= grid.range_forward_m / 4.0 ? 0 : 1;
            inter[region] += pred[i] == cls && gt[i] == cls;
            uni[region] += pred[i] == cls || gt[i] == cls;
          }
        auto expect = [&](int region) {
          return uni[region] == 0 ? 1.0
                                  : static_cast<double>(inter[region]) /
                                        static_cast<double>(uni[region]);
        };
        CHECK(near.iou[static_cast<size_t>(cls)] == Approx(expect(0)).margin(1e-12));
        CHECK(far.iou[static_cast<size_t>(cls)] == Approx(expect(1)).margin(1e-12));
      }
    }
  }
}

// --- Aggregated reports ----------------------------------------------------

TEST_CASE("evaluation reports aggregate scenes") {
  GridSpec grid = grid_for_range(20.0, 10.0, 0.1);
  std::vector<Polyline> gt_shape = {hline(1.0, -6.0, 6.0, kDivider)};
  auto gt_labels = rasterize_labels(gt_shape, grid, grid.resolution_m).labels;

  SECTION("pooled detections drive dataset-level ap") {
    MetricsAccumulator acc(grid);
    std::vector<Instance> exact = {{gt_shape[0], 0.9}};
    std::vector<Instance> offset = {{hline(1.7, -6.0, 6.0, kDivider), 0.8}};
    acc.add_scene(gt_labels, gt_labels, exact, gt_shape);
    acc.add_scene(gt_labels, gt_labels, offset, gt_shape);
    EvalReport rep = acc.finalize();
    CHECK(rep.scenes == 2);
    CHECK(rep.iou[kDivider] == 1.0);
    CHECK(rep.miou == 1.0);
    CHECK(rep.fragmentation == 0.0);
    // Threshold 0.5: TP(0.9) then FP(0.8) over 2 gt instances -> AP 0.5.
    CHECK(rep.ap[kDivider][0] == Approx(0.5));
    CHECK(rep.ap[kDivider][1] == Approx(1.0));
    CHECK(rep.ap[kDivider][2] == Approx(1.0));
    // Empty classes score 1 by convention at every threshold.
    CHECK(rep.ap[kPedCrossing][1] == 1.0);
    CHECK(rep.ap_class[kDivider] == Approx((0.5 + 1.0 + 1.0) / 3.0));
    double class_means = (rep.ap_class[0] + rep.ap_class[1] + rep.ap_class[2]) / 3.0;
    CHECK(rep.map_classes_first == Approx(class_means));
    double thr_means = 0.0;
    for (size_t t = 0; t < 3; ++t)
      thr_means += (rep.ap[0][t] + rep.ap[1][t] + rep.ap[2][t]) / 9.0;
    CHECK(rep.map_thresholds_first == Approx(thr_means));
  }

  SECTION("iou pools intersection and union counts across scenes") {
    MetricsAccumulator acc(grid);
    auto empty_pred = make_background(grid).labels;
    acc.add_scene(gt_labels, gt_labels, {}, {});   // perfect scene
    acc.add_scene(empty_pred, gt_labels, {}, {});  // fully missed scene
    EvalReport rep = acc.finalize();
    // Pooled counts: intersection |gt|, union 2|gt| -> 0.5, not the 0.5 scene mean by accident:
    CHECK(rep.iou[kDivider] == Approx(0.5));
    CHECK(rep.iou[kPedCrossing] == 1.0);  // empty everywhere
  }

  SECTION("json and table are complete and deterministic") {
    MetricsAccumulator acc(grid);
    acc.add_scene(gt_labels, gt_labels, {{gt_shape[0], 0.9}}, gt_shape);
    EvalReport rep = acc.finalize();
    auto j = rep.to_json();
    for (const char* key : {"scenes", "iou", "miou", "iou_near", "miou_near", "iou_far",
                            "miou_far", "ap", "ap_class_mean", "map", "map_thresholds_first",
                            "fragmentation"})
      CHECK(j.contains(key));
    CHECK(j["iou"].contains("divider"));
    CHECK(j["ap"]["divider"].contains("0.5"));
    std::string table = rep.to_table("eval");
    CHECK(table.find("Metric") != std::string::npos);
    CHECK(table.find("IoU") != std::string::npos);
    CHECK(table.find("AP@0.5") != std::string::npos);
    CHECK(table.find("fragmentation") != std::string::npos);
    EvalReport rep2 = acc.finalize();
    CHECK(rep2.to_json().dump() == j.dump());
    CHECK(rep2.to_table("eval") == table);
  }

  SECTION("mismatched raster sizes throw") {
    MetricsAccumulator acc(grid);
    std::vector<uint8_t> bad(10, 0);
    CHECK_THROWS_AS(acc.add_scene(bad, gt_labels, {}, {}), ShapeError);
  }
}
