#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "pmap/vectorize.hpp"

namespace pmap {

// --- IoU ------------------------------------------------------------------

// Intersection over union of two binary masks; both empty counts as 1.
inline double iou_masks(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
  if (a.size() != b.size()) throw ShapeError("iou: mask sizes differ");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    bool av = a[i] != 0, bv = b[i] != 0;
    inter += av && bv;
    uni += av || bv;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// --- Chamfer distance -----------------------------------------------------

// Points along the polyline every `pitch` meters of arclength, always
// including both endpoints.
inline std::vector<Vec2> resample_polyline(const Polyline& pl, double pitch = 0.1) {
  if (pl.points.size() < 2) throw InvalidArgument("resample: polyline needs 2+ points");
  if (pitch <= 0) throw InvalidArgument("resample: pitch must be > 0");
  std::vector<Vec2> out;
  out.push_back(pl.points.front());
  double carried = 0.0;  // arclength since the last emitted sample
  for (size_t i = 0; i + 1 < pl.points.size(); ++i) {
    Vec2 a = pl.points[i], b = pl.points[i + 1];
    double seg = norm(b - a);
    double t = pitch - carried;
    while (t <= seg) {
      out.push_back(a + (t / seg) * (b - a));
      t += pitch;
    }
    carried = seg - (t - pitch);
  }
  if (carried > 1e-12) out.push_back(pl.points.back());
  return out;
}

// Symmetric Chamfer distance between two non-empty point sets.
inline double chamfer(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
  if (a.empty() || b.empty()) throw InvalidArgument("chamfer: empty point set");
  auto mean_nn = [](const std::vector<Vec2>& from, const std::vector<Vec2>& to) {
    double sum = 0.0;
    for (const Vec2& p : from) {
      double best = norm(p - to[0]);
      for (size_t i = 1; i < to.size(); ++i) best = std::min(best, norm(p - to[i]));
      sum += best;
    }
    return sum / static_cast<double>(from.size());
  };
  return 0.5 * (mean_nn(a, b) + mean_nn(b, a));
}

inline double chamfer_polylines(const Polyline& a, const Polyline& b, double pitch = 0.1) {
  return chamfer(resample_polyline(a, pitch), resample_polyline(b, pitch));
}

// --- Instance AP ----------------------------------------------------------

constexpr std::array<double, 3> kCdThresholds = {0.5, 1.0, 1.5};
constexpr double kApIouThreshold = 0.2;
// Footprint width for the rasterized-IoU match gate. Wide enough that a
// parallel pair at the largest CD threshold still overlaps (a 0.7 m offset
// gives IoU ~0.36), yet crossings and shape mismatches stay below 0.2.
constexpr double kApRasterThicknessM = 1.5;

// One scored detection after matching: confidence plus hit flag.
struct Detection {
  double confidence = 0.0;
  bool tp = false;
};

// All-points interpolation area under the precision-recall curve.
inline double average_precision(std::vector<Detection> dets, int64_t gt_count) {
  if (gt_count == 0) return dets.empty() ? 1.0 : 0.0;
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) {
                     return a.confidence > b.confidence;
                   });
  size_t n = dets.size();
  std::vector<double> precision(n), recall(n);
  int64_t tp = 0;
  for (size_t i = 0; i < n; ++i) {
    tp += dets[i].tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(gt_count);
  }
  // Precision envelope from the right.
  for (size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

namespace detail {
// Occupancy footprint of one polyline on the eval grid, for the IoU gate.
inline std::vector<uint8_t> instance_footprint(const Polyline& pl, const GridSpec& grid,
                                               double thickness) {
  LabelRaster lr = make_background(grid);
  Polyline tagged = pl;
  tagged.class_id = kDivider;
  rasterize_into(lr, {tagged}, thickness);
  std::vector<uint8_t> mask(lr.labels.size());
  for (size_t i = 0; i < mask.size(); ++i) mask[i] = lr.labels[i] != kBackground;
  return mask;
}
}  // namespace detail

// Greedy matching of one scene's predictions of one class against its GT
// instances at one CD threshold. Predictions are taken in descending
// confidence; each may claim the nearest unmatched GT within the threshold,
// and must also overlap it with rasterized IoU >= iou_thr.
inline std::vector<Detection> match_instances(const std::vector<Instance>& preds,
                                              const std::vector<Polyline>& gts,
                                              double cd_threshold, const GridSpec& grid,
                                              double iou_thr = kApIouThreshold,
                                              double thickness = kApRasterThicknessM) {
  std::vector<size_t> order(preds.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return preds[a].confidence > preds[b].confidence;
  });
  std::vector<std::vector<uint8_t>> gt_masks;
  for (const auto& g : gts)
    gt_masks.push_back(detail::instance_footprint(g, grid, thickness));
  std::vector<char> taken(gts.size(), 0);
  std::vector<Detection> out(preds.size());
  for (size_t oi = 0; oi < order.size(); ++oi) {
    const Instance& p = preds[order[oi]];
    Detection det;
    det.confidence = p.confidence;
    std::vector<uint8_t> pmask;
    double best_cd = 0.0;
    int64_t best = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      double cd = chamfer_polylines(p.polyline, gts[g]);
      if (cd > cd_threshold) continue;
      if (pmask.empty()) pmask = detail::instance_footprint(p.polyline, grid, thickness);
      if (iou_masks(pmask, gt_masks[g]) < iou_thr) continue;
      if (best < 0 || cd < best_cd) {
        best = static_cast<int64_t>(g);
        best_cd = cd;
      }
    }
    if (best >= 0) {
      taken[static_cast<size_t>(best)] = 1;
      det.tp = true;
    }
    out[order[oi]] = det;
  }
  return out;
}

// Per-class, per-threshold AP for a single prediction/GT collection.
// Returns ap[class][threshold].
inline std::array<std::array<double, 3>, kNumForegroundClasses> instance_ap(
    const std::vector<Instance>& preds, const std::vector<Polyline>& gts, const GridSpec& grid,
    double iou_thr = kApIouThreshold,
    const std::array<double, 3>& cd_thresholds = kCdThresholds) {
  std::array<std::array<double, 3>, kNumForegroundClasses> ap{};
  for (int cls = 0; cls < kNumForegroundClasses; ++cls) {
    std::vector<Instance> p;
    std::vector<Polyline> g;
    for (const auto& inst : preds)
      if (inst.polyline.class_id == cls) p.push_back(inst);
    for (const auto& pl : gts)
      if (pl.class_id == cls) g.push_back(pl);
    for (size_t t = 0; t < cd_thresholds.size(); ++t) {
      auto dets = match_instances(p, g, cd_thresholds[t], grid, iou_thr);
      ap[static_cast<size_t>(cls)][t] = average_precision(dets, static_cast<int64_t>(g.size()));
    }
  }
  return ap;
}

// Classes-then-thresholds mean of an AP matrix.
inline double instance_map(const std::array<std::array<double, 3>, kNumForegroundClasses>& ap) {
  double m = 0.0;
  for (int cls = 0; cls < kNumForegroundClasses; ++cls) {
    double over_thr = 0.0;
    for (size_t t = 0; t < 3; ++t) over_thr += ap[static_cast<size_t>(cls)][t] / 3.0;
    m += over_thr / kNumForegroundClasses;
  }
  return m;
}

// --- Fragmentation --------------------------------------------------------

// How much more broken the prediction is than the ground truth: mean over
// active foreground classes of max(0, components(pred) - components(gt)) /
// max(1, components(gt)). Classes absent from both rasters do not dilute
// the mean; if nothing is active the score is 0.
inline double fragmentation_score(const std::vector<uint8_t>& pred_labels,
                                  const std::vector<uint8_t>& gt_labels, int64_t rows,
                                  int64_t cols) {
  if (pred_labels.size() != gt_labels.size() ||
      static_cast<int64_t>(pred_labels.size()) != rows * cols)
    throw ShapeError("fragmentation: label sizes differ");
  double total = 0.0;
  int active = 0;
  std::vector<uint8_t> mask(pred_labels.size());
  for (int cls = 0; cls < kNumForegroundClasses; ++cls) {
    for (size_t i = 0; i < mask.size(); ++i) mask[i] = pred_labels[i] == cls;
    int32_t cp = count_components(mask, rows, cols, 8);
    for (size_t i = 0; i < mask.size(); ++i) mask[i] = gt_labels[i] == cls;
    int32_t cg = count_components(mask, rows, cols, 8);
    if (cp == 0 && cg == 0) continue;
    ++active;
    total += static_cast<double>(std::max(0, cp - cg)) /
             static_cast<double>(std::max(1, cg));
  }
  return active ? total / static_cast<double>(active) : 0.0;
}

// --- Far/near split -------------------------------------------------------

struct RegionReport {
  std::array<double, kNumForegroundClasses> iou{};
  double miou = 0.0;
};

// IoU restricted to near cells (|x| <= range/4) and far cells (the rest).
inline std::pair<RegionReport, RegionReport> split_far_near(
    const std::vector<uint8_t>& pred_labels, const std::vector<uint8_t>& gt_labels,
    const GridSpec& grid) {
  int64_t cells = grid.rows * grid.cols;
  if (static_cast<int64_t>(pred_labels.size()) != cells ||
      static_cast<int64_t>(gt_labels.size()) != cells)
    throw ShapeError("split_far_near: label raster does not match grid");
  int64_t inter[2][kNumForegroundClasses] = {}, uni[2][kNumForegroundClasses] = {};
  for (int64_t r = 0; r < grid.rows; ++r)
    for (int64_t c = 0; c < grid.cols; ++c) {
      int64_t i = r * grid.cols + c;
      int region = std::abs(grid.cell_center(r, c).x) <= grid.range_forward_m / 4.0 ? 0 : 1;
      for (int cls = 0; cls < kNumForegroundClasses; ++cls) {
        bool p = pred_labels[static_cast<size_t>(i)] == cls;
        bool g = gt_labels[static_cast<size_t>(i)] == cls;
        inter[region][cls] += p && g;
        uni[region][cls] += p || g;
      }
    }
  std::pair<RegionReport, RegionReport> out;
  for (int region = 0; region < 2; ++region) {
    RegionReport& rep = region == 0 ? out.first : out.second;
    for (int cls = 0; cls < kNumForegroundClasses; ++cls) {
      rep.iou[static_cast<size_t>(cls)] =
          uni[region][cls] == 0 ? 1.0
                                : static_cast<double>(inter[region][cls]) /
                                      static_cast<double>(uni[region][cls]);
      rep.miou += rep.iou[static_cast<size_t>(cls)] / kNumForegroundClasses;
    }
  }
  return out;
}

// --- Dataset-level accumulation -------------------------------------------

struct EvalReport {
  int scenes = 0;
  std::array<double, kNumForegroundClasses> iou{}, iou_near{}, iou_far{};
  double miou = 0.0, miou_near = 0.0, miou_far = 0.0;
  std::array<std::array<double, 3>, kNumForegroundClasses> ap{};  // [class][threshold]
  std::array<double, kNumForegroundClasses> ap_class{};           // mean over thresholds
  double map_classes_first = 0.0;     // average thresholds of class means
  double map_thresholds_first = 0.0;  // average classes within thresholds first
  double fragmentation = 0.0;

  nlohmann::ordered_json to_json() const;
  std::string to_table(const std::string& title) const;
};

// Accumulates intersection/union counts, pooled detections, and per-scene
// fragmentation across a dataset, then finalizes into one report.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(const GridSpec& grid) : grid_(grid) {
    near_mask_.resize(static_cast<size_t>(grid.rows * grid.cols));
    for (int64_t r = 0; r < grid.rows; ++r)
      for (int64_t c = 0; c < grid.cols; ++c)
        near_mask_[static_cast<size_t>(r * grid.cols + c)] =
            std::abs(grid.cell_center(r, c).x) <= grid.range_forward_m / 4.0;
  }

  void add_scene(const std::vector<uint8_t>& pred_labels,
                 const std::vector<uint8_t>& gt_labels,
                 const std::vector<Instance>& pred_instances,
                 const std::vector<Polyline>& gt_instances) {
    int64_t cells = grid_.rows * grid_.cols;
    if (static_cast<int64_t>(pred_labels.size()) != cells ||
        static_cast<int64_t>(gt_labels.size()) != cells)
      throw ShapeError("metrics: label raster does not match grid");
    for (int64_t i = 0; i < cells; ++i) {
      for (int cls = 0; cls < kNumForegroundClasses; ++cls) {
        bool p = pred_labels[static_cast<size_t>(i)] == cls;
        bool g = gt_labels[static_cast<size_t>(i)] == cls;
        int region = near_mask_[static_cast<size_t>(i)] ? 0 : 1;
        inter_[region][cls] += p && g;
        uni_[region][cls] += p || g;
      }
    }
    for (int cls = 0; cls < kNumForegroundClasses; ++cls) {
      std::vector<Instance> p;
      std::vector<Polyline> g;
      for (const auto& inst : pred_instances)
        if (inst.polyline.class_id == cls) p.push_back(inst);
      for (const auto& pl : gt_instances)
        if (pl.class_id == cls) g.push_back(pl);
      gt_count_[cls] += static_cast<int64_t>(g.size());
      for (size_t t = 0; t < kCdThresholds.size(); ++t) {
        auto dets = match_instances(p, g, kCdThresholds[t], grid_);
        auto& pool = detections_[cls][t];
        pool.insert(pool.end(), dets.begin(), dets.end());
      }
    }
    frag_sum_ += fragmentation_score(pred_labels, gt_labels, grid_.rows, grid_.cols);
    ++scenes_;
  }

  EvalReport finalize() const {
    EvalReport r;
    r.scenes = scenes_;
    auto ratio = [](int64_t inter, int64_t uni) {
      return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    };
    for (int cls = 0; cls < kNumForegroundClasses; ++cls) {
      r.iou_near[static_cast<size_t>(cls)] = ratio(inter_[0][cls], uni_[0][cls]);
      r.iou_far[static_cast<size_t>(cls)] = ratio(inter_[1][cls], uni_[1][cls]);
      r.iou[static_cast<size_t>(cls)] =
          ratio(inter_[0][cls] + inter_[1][cls], uni_[0][cls] + uni_[1][cls]);
      r.miou += r.iou[static_cast<size_t>(cls)] / kNumForegroundClasses;
      r.miou_near += r.iou_near[static_cast<size_t>(cls)] / kNumForegroundClasses;
      r.miou_far += r.iou_far[static_cast<size_t>(cls)] / kNumForegroundClasses;
      for (size_t t = 0; t < kCdThresholds.size(); ++t) {
        double ap = average_precision(detections_[cls][t], gt_count_[cls]);
        r.ap[static_cast<size_t>(cls)][t] = ap;
        r.ap_class[static_cast<size_t>(cls)] += ap / 3.0;
      }
      r.map_classes_first += r.ap_class[static_cast<size_t>(cls)] / kNumForegroundClasses;
    }
    for (size_t t = 0; t < kCdThresholds.size(); ++t) {
      double over_classes = 0.0;
      for (int cls = 0; cls < kNumForegroundClasses; ++cls)
        over_classes += r.ap[static_cast<size_t>(cls)][t] / kNumForegroundClasses;
      r.map_thresholds_first += over_classes / 3.0;
    }
    r.fragmentation = scenes_ ? frag_sum_ / scenes_ : 0.0;
    return r;
  }

 private:
  GridSpec grid_;
  std::vector<char> near_mask_;
  int64_t inter_[2][kNumForegroundClasses] = {};  // [near=0/far=1][class]
  int64_t uni_[2][kNumForegroundClasses] = {};
  std::vector<Detection> detections_[kNumForegroundClasses][3];
  int64_t gt_count_[kNumForegroundClasses] = {};
  double frag_sum_ = 0.0;
  int scenes_ = 0;
};

inline nlohmann::ordered_json EvalReport::to_json() const {
  static const char* kClassNames[] = {"divider", "ped_crossing", "boundary"};
  nlohmann::ordered_json j;
  j["scenes"] = scenes;
  auto class_block = [&](const std::array<double, kNumForegroundClasses>& v) {
    nlohmann::ordered_json b;
    for (int c = 0; c < kNumForegroundClasses; ++c) b[kClassNames[c]] = v[static_cast<size_t>(c)];
    return b;
  };
  j["iou"] = class_block(iou);
  j["miou"] = miou;
  j["iou_near"] = class_block(iou_near);
  j["miou_near"] = miou_near;
  j["iou_far"] = class_block(iou_far);
  j["miou_far"] = miou_far;
  nlohmann::ordered_json apj;
  for (int c = 0; c < kNumForegroundClasses; ++c) {
    nlohmann::ordered_json row;
    static const char* kThresholdNames[] = {"0.5", "1.0", "1.5"};
    for (size_t t = 0; t < 3; ++t) row[kThresholdNames[t]] = ap[static_cast<size_t>(c)][t];
    apj[kClassNames[c]] = std::move(row);
  }
  j["ap"] = std::move(apj);
  j["ap_class_mean"] = class_block(ap_class);
  j["map"] = map_classes_first;
  j["map_thresholds_first"] = map_thresholds_first;
  j["fragmentation"] = fragmentation;
  return j;
}

inline std::string EvalReport::to_table(const std::string& title) const {
  char buf[160];
  std::string out;
  auto row = [&](const char* name, double a, double b, double c, double mean) {
    std::snprintf(buf, sizeof buf, "%-10s | %6.2f | %6.2f | %6.2f | %6.2f\n", name, 100.0 * a,
                  100.0 * b, 100.0 * c, 100.0 * mean);
    out += buf;
  };
  out += title + " (" + std::to_string(scenes) + " scenes)\n";
  out += "Metric     |   Div. |   Ped. | Bound. |   Mean\n";
  out += "-----------+--------+--------+--------+-------\n";
  row("IoU", iou[0], iou[1], iou[2], miou);
  row("IoU near", iou_near[0], iou_near[1], iou_near[2], miou_near);
  row("IoU far", iou_far[0], iou_far[1], iou_far[2], miou_far);
  row("AP@0.5", ap[0][0], ap[1][0], ap[2][0],
      (ap[0][0] + ap[1][0] + ap[2][0]) / 3.0);
  row("AP@1.0", ap[0][1], ap[1][1], ap[2][1],
      (ap[0][1] + ap[1][1] + ap[2][1]) / 3.0);
  row("AP@1.5", ap[0][2], ap[1][2], ap[2][2],
      (ap[0][2] + ap[1][2] + ap[2][2]) / 3.0);
  row("AP", ap_class[0], ap_class[1], ap_class[2], map_classes_first);
  std::snprintf(buf, sizeof buf, "fragmentation: %.4f\n", fragmentation);
  out += buf;
  return out;
}

}  // namespace pmap
