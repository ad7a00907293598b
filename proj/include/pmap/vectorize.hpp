#pragma once

#include <cstdint>
#include <vector>

#include "pmap/nn.hpp"
#include "pmap/raster.hpp"

namespace pmap {

// A recovered map element: a polyline with a confidence score in [0, 1].
struct Instance {
  Polyline polyline;
  double confidence = 0.0;
};

struct VectorizeConfig {
  double prob_threshold = 0.5;
  double simplify_eps_m = 0.2;
};

// --- Connected components -------------------------------------------------
// Labels are assigned 1..n in row-major first-seen order; 0 is background.

inline int32_t connected_components(const std::vector<uint8_t>& mask, int64_t rows,
                                    int64_t cols, std::vector<int32_t>& labels,
                                    int connectivity = 8) {
  if (connectivity != 4 && connectivity != 8)
    throw InvalidArgument("connected_components: connectivity must be 4 or 8");
  labels.assign(static_cast<size_t>(rows * cols), 0);
  int32_t count = 0;
  std::vector<int64_t> stack;
  for (int64_t seed = 0; seed < rows * cols; ++seed) {
    if (!mask[static_cast<size_t>(seed)] || labels[static_cast<size_t>(seed)]) continue;
    ++count;
    stack.push_back(seed);
    labels[static_cast<size_t>(seed)] = count;
    while (!stack.empty()) {
      int64_t cur = stack.back();
      stack.pop_back();
      int64_t r = cur / cols, c = cur % cols;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          if (dr == 0 && dc == 0) continue;
          if (connectivity == 4 && dr != 0 && dc != 0) continue;
          int64_t rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= rows || cc < 0 || cc >= cols) continue;
          int64_t idx = rr * cols + cc;
          if (mask[static_cast<size_t>(idx)] && !labels[static_cast<size_t>(idx)]) {
            labels[static_cast<size_t>(idx)] = count;
            stack.push_back(idx);
          }
        }
    }
  }
  return count;
}

inline int32_t count_components(const std::vector<uint8_t>& mask, int64_t rows, int64_t cols,
                                int connectivity = 8) {
  std::vector<int32_t> labels;
  return connected_components(mask, rows, cols, labels, connectivity);
}

// --- Thinning -------------------------------------------------------------
// Zhang-Suen skeletonization; preserves 8-connectivity and keeps isolated
// cells. Deterministic: each pass scans row-major and deletes in bulk.

inline std::vector<uint8_t> thin_mask(std::vector<uint8_t> mask, int64_t rows, int64_t cols) {
  auto get = [&](int64_t r, int64_t c) -> int {
    if (r < 0 || r >= rows || c < 0 || c >= cols) return 0;
    return mask[static_cast<size_t>(r * cols + c)] ? 1 : 0;
  };
  std::vector<int64_t> kill;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      kill.clear();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) {
          if (!get(r, c)) continue;
          // Neighbors clockwise from north: p2..p9.
          int p2 = get(r - 1, c), p3 = get(r - 1, c + 1), p4 = get(r, c + 1);
          int p5 = get(r + 1, c + 1), p6 = get(r + 1, c), p7 = get(r + 1, c - 1);
          int p8 = get(r, c - 1), p9 = get(r - 1, c - 1);
          int b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9;
          if (b < 2 || b > 6) continue;
          int a = (p2 == 0 && p3 == 1) + (p3 == 0 && p4 == 1) + (p4 == 0 && p5 == 1) +
                  (p5 == 0 && p6 == 1) + (p6 == 0 && p7 == 1) + (p7 == 0 && p8 == 1) +
                  (p8 == 0 && p9 == 1) + (p9 == 0 && p2 == 1);
          if (a != 1) continue;
          bool cond = pass == 0 ? (p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0)
                                : (p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0);
          if (cond) kill.push_back(r * cols + c);
        }
      for (int64_t idx : kill) mask[static_cast<size_t>(idx)] = 0;
      changed = changed || !kill.empty();
    }
  }
  return mask;
}

// --- Skeleton tracing -----------------------------------------------------
// Decomposes a skeleton into cell paths. Endpoints (degree <= 1) seed walks
// in row-major order; leftover cycle cells seed afterwards. Each cell is
// visited once, so branches split at junctions.

inline std::vector<std::vector<int64_t>> trace_skeleton(const std::vector<uint8_t>& mask,
                                                        int64_t rows, int64_t cols) {
  auto on = [&](int64_t r, int64_t c) -> bool {
    return r >= 0 && r < rows && c >= 0 && c < cols && mask[static_cast<size_t>(r * cols + c)];
  };
  auto degree = [&](int64_t idx) {
    int64_t r = idx / cols, c = idx % cols;
    int d = 0;
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc)
        if ((dr || dc) && on(r + dr, c + dc)) ++d;
    return d;
  };
  std::vector<uint8_t> visited(static_cast<size_t>(rows * cols), 0);
  std::vector<std::vector<int64_t>> paths;
  auto walk = [&](int64_t start) {
    std::vector<int64_t> path;
    int64_t cur = start;
    visited[static_cast<size_t>(cur)] = 1;
    path.push_back(cur);
    for (;;) {
      int64_t r = cur / cols, c = cur % cols;
      int64_t next = -1;
      // Prefer 4-neighbors so straight runs do not zig-zag, then diagonals;
      // ties resolve by row-major order.
      static const int d4[4][2] = {{-1, 0}, {0, -1}, {0, 1}, {1, 0}};
      static const int d8[4][2] = {{-1, -1}, {-1, 1}, {1, -1}, {1, 1}};
      for (const auto& d : d4) {
        int64_t rr = r + d[0], cc = c + d[1];
        if (on(rr, cc) && !visited[static_cast<size_t>(rr * cols + cc)]) {
          next = rr * cols + cc;
          break;
        }
      }
      if (next < 0)
        for (const auto& d : d8) {
          int64_t rr = r + d[0], cc = c + d[1];
          if (on(rr, cc) && !visited[static_cast<size_t>(rr * cols + cc)]) {
            next = rr * cols + cc;
            break;
          }
        }
      if (next < 0) break;
      visited[static_cast<size_t>(next)] = 1;
      path.push_back(next);
      cur = next;
    }
    paths.push_back(std::move(path));
  };
  for (int64_t i = 0; i < rows * cols; ++i)
    if (mask[static_cast<size_t>(i)] && !visited[static_cast<size_t>(i)] && degree(i) <= 1)
      walk(i);
  for (int64_t i = 0; i < rows * cols; ++i)
    if (mask[static_cast<size_t>(i)] && !visited[static_cast<size_t>(i)]) walk(i);
  return paths;
}

// --- Ramer-Douglas-Peucker ------------------------------------------------

namespace detail {
inline void rdp_mark(const std::vector<Vec2>& pts, size_t i, size_t j, double eps,
                     std::vector<char>& keep) {
  if (j <= i + 1) return;
  double dmax = -1.0;
  size_t imax = i;
  for (size_t k = i + 1; k < j; ++k) {
    double d = point_segment_distance(pts[k], pts[i], pts[j]);
    if (d > dmax) {
      dmax = d;
      imax = k;
    }
  }
  if (dmax > eps) {
    keep[imax] = 1;
    rdp_mark(pts, i, imax, eps, keep);
    rdp_mark(pts, imax, j, eps, keep);
  }
}
}  // namespace detail

inline std::vector<Vec2> rdp_simplify(const std::vector<Vec2>& pts, double eps) {
  if (pts.size() <= 2) return pts;
  std::vector<char> keep(pts.size(), 0);
  keep.front() = keep.back() = 1;
  detail::rdp_mark(pts, 0, pts.size() - 1, eps, keep);
  std::vector<Vec2> out;
  for (size_t i = 0; i < pts.size(); ++i)
    if (keep[i]) out.push_back(pts[i]);
  return out;
}

// --- Vectorization --------------------------------------------------------
// probabilities -> thresholded class masks -> per-component skeletons ->
// traced paths -> simplified polylines. A singleton cell still yields a
// short two-point stub so nothing silently disappears.

inline std::vector<Instance> vectorize(const Tensor<float>& probs, const GridSpec& grid,
                                       const VectorizeConfig& cfg = {}) {
  if (probs.rank() != 3 || probs.extent(0) != grid.rows || probs.extent(1) != grid.cols ||
      probs.extent(2) != kNumChannels)
    throw ShapeError("vectorize: probabilities shape " + shape_str(probs.shape()) +
                     " does not match grid");
  int64_t rows = grid.rows, cols = grid.cols;
  std::vector<Instance> out;
  std::vector<uint8_t> class_mask(static_cast<size_t>(rows * cols));
  std::vector<int32_t> labels;
  for (int cls = 0; cls < kNumForegroundClasses; ++cls) {
    for (int64_t i = 0; i < rows * cols; ++i)
      class_mask[static_cast<size_t>(i)] =
          probs[i * kNumChannels + cls] > static_cast<float>(cfg.prob_threshold) ? 1 : 0;
    int32_t n = connected_components(class_mask, rows, cols, labels, 8);
    for (int32_t comp = 1; comp <= n; ++comp) {
      std::vector<uint8_t> comp_mask(static_cast<size_t>(rows * cols), 0);
      for (int64_t i = 0; i < rows * cols; ++i)
        if (labels[static_cast<size_t>(i)] == comp) comp_mask[static_cast<size_t>(i)] = 1;
      std::vector<uint8_t> skel = thin_mask(std::move(comp_mask), rows, cols);
      for (const auto& path : trace_skeleton(skel, rows, cols)) {
        Instance inst;
        inst.polyline.class_id = cls;
        double psum = 0.0;
        std::vector<Vec2> pts;
        for (int64_t idx : path) {
          pts.push_back(grid.cell_center(idx / cols, idx % cols));
          psum += probs[idx * kNumChannels + cls];
        }
        inst.confidence = psum / static_cast<double>(path.size());
        if (pts.size() == 1)
          pts.push_back(pts[0] + Vec2{grid.resolution_m / 2.0, 0.0});
        inst.polyline.points = rdp_simplify(pts, cfg.simplify_eps_m);
        out.push_back(std::move(inst));
      }
    }
  }
  return out;
}

inline std::vector<Instance> vectorize(const SemanticRaster& raster,
                                       const VectorizeConfig& cfg = {}) {
  if (raster.kind == RasterKind::logits) {
    Tensor<float> flat = raster.values.reshaped({raster.grid.rows * raster.grid.cols,
                                                 kNumChannels});
    Tensor<float> probs = softmax_rows(flat);
    return vectorize(probs.reshaped({raster.grid.rows, raster.grid.cols, kNumChannels}),
                     raster.grid, cfg);
  }
  return vectorize(raster.values, raster.grid, cfg);
}

// JSON for instance lists: the polyline schema plus a confidence field.
inline nlohmann::ordered_json instances_to_json(const std::vector<Instance>& instances) {
  nlohmann::ordered_json doc;
  doc["polylines"] = nlohmann::ordered_json::array();
  for (const auto& inst : instances) {
    nlohmann::ordered_json item;
    item["class"] = inst.polyline.class_id;
    item["confidence"] = inst.confidence;
    auto pts = nlohmann::ordered_json::array();
    for (const auto& p : inst.polyline.points) pts.push_back({p.x, p.y});
    item["points"] = std::move(pts);
    doc["polylines"].push_back(std::move(item));
  }
  return doc;
}

inline std::vector<Instance> instances_from_json(const nlohmann::json& doc) {
  if (!doc.contains("polylines") || !doc["polylines"].is_array())
    throw ParseError("instance document: missing \"polylines\" array");
  std::vector<Instance> out;
  for (const auto& item : doc["polylines"]) {
    Instance inst;
    inst.polyline.class_id = item.at("class").get<int>();
    inst.confidence = item.value("confidence", 1.0);
    for (const auto& p : item.at("points"))
      inst.polyline.points.push_back({p[0].get<double>(), p[1].get<double>()});
    inst.polyline.validate();
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace pmap
