#pragma once

#include <cstdint>
#include <vector>

#include "pmap/polyline.hpp"
#include "pmap/tensor.hpp"

namespace pmap {

enum class RasterKind { labels, logits, probabilities };

// Per-cell class scores over the BEV grid, rows x cols x (Nc+1).
// kind==labels means one-hot rows; probabilities must sum to 1 per cell.
struct SemanticRaster {
  GridSpec grid;
  Tensor<float> values;  // rows x cols x kNumChannels
  RasterKind kind = RasterKind::labels;

  void validate() const {
    if (values.rank() != 3 || values.extent(0) != grid.rows || values.extent(1) != grid.cols ||
        values.extent(2) != kNumChannels)
      throw ShapeError("SemanticRaster: values shape " + shape_str(values.shape()) +
                       " does not match grid");
    if (kind == RasterKind::labels) {
      for (int64_t i = 0; i < grid.rows * grid.cols; ++i) {
        int ones = 0;
        for (int k = 0; k < kNumChannels; ++k) {
          float v = values[i * kNumChannels + k];
          if (v != 0.0f && v != 1.0f)
            throw InvalidArgument("SemanticRaster(labels): non-binary value");
          ones += v == 1.0f;
        }
        if (ones != 1) throw InvalidArgument("SemanticRaster(labels): cell not one-hot");
      }
    } else if (kind == RasterKind::probabilities) {
      for (int64_t i = 0; i < grid.rows * grid.cols; ++i) {
        float sum = 0.0f;
        for (int k = 0; k < kNumChannels; ++k) {
          float v = values[i * kNumChannels + k];
          if (v < 0.0f) throw InvalidArgument("SemanticRaster(probabilities): negative entry");
          sum += v;
        }
        if (std::abs(sum - 1.0f) > 1e-5f)
          throw InvalidArgument("SemanticRaster(probabilities): cell does not sum to 1");
      }
    }
  }
};

// Compact per-cell label map used internally by the data pipeline.
struct LabelRaster {
  GridSpec grid;
  std::vector<uint8_t> labels;  // rows*cols, row-major, values in [0, kNumChannels)

  uint8_t& at(int64_t r, int64_t c) { return labels[static_cast<size_t>(r * grid.cols + c)]; }
  uint8_t at(int64_t r, int64_t c) const { return labels[static_cast<size_t>(r * grid.cols + c)]; }
};

inline LabelRaster make_background(const GridSpec& grid) {
  return {grid, std::vector<uint8_t>(static_cast<size_t>(grid.rows * grid.cols),
                                     static_cast<uint8_t>(kBackground))};
}

inline Tensor<float> labels_to_onehot(const LabelRaster& lr) {
  Tensor<float> t({lr.grid.rows, lr.grid.cols, kNumChannels});
  for (int64_t i = 0; i < lr.grid.rows * lr.grid.cols; ++i)
    t[i * kNumChannels + lr.labels[static_cast<size_t>(i)]] = 1.0f;
  return t;
}

// Argmax decode; first max wins on ties.
template <typename T>
inline std::vector<uint8_t> channels_to_labels(const Tensor<T>& t) {
  if (t.rank() != 3) throw ShapeError("channels_to_labels: expected rank-3 tensor");
  int64_t cells = t.extent(0) * t.extent(1);
  int64_t ch = t.extent(2);
  std::vector<uint8_t> out(static_cast<size_t>(cells));
  for (int64_t i = 0; i < cells; ++i) {
    int best = 0;
    T bv = t[i * ch];
    for (int k = 1; k < ch; ++k)
      if (t[i * ch + k] > bv) {
        bv = t[i * ch + k];
        best = k;
      }
    out[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
  }
  return out;
}

inline SemanticRaster to_semantic(const LabelRaster& lr) {
  return {lr.grid, labels_to_onehot(lr), RasterKind::labels};
}

// Overlap priority: ped crossing > divider > boundary > background.
inline int class_priority(int class_id) {
  switch (class_id) {
    case kPedCrossing: return 3;
    case kDivider: return 2;
    case kBoundary: return 1;
    default: return 0;
  }
}

// Mark every cell whose center lies within thickness/2 of a segment of a
// class-c polyline. Cells outside the grid are ignored. Deterministic:
// the result depends only on per-cell distances and the priority rule.
inline void rasterize_into(LabelRaster& out, const std::vector<Polyline>& polylines,
                           double thickness_m) {
  if (thickness_m < 0) throw InvalidArgument("rasterize: thickness must be >= 0");
  const GridSpec& g = out.grid;
  double half = thickness_m / 2.0;
  double res = g.resolution_m;
  for (const auto& pl : polylines) {
    for (size_t s = 0; s + 1 < pl.points.size(); ++s) {
      Vec2 a = pl.points[s], b = pl.points[s + 1];
      double xmin = std::min(a.x, b.x) - half, xmax = std::max(a.x, b.x) + half;
      double ymin = std::min(a.y, b.y) - half, ymax = std::max(a.y, b.y) + half;
      auto col_of = [&](double x) { return static_cast<int64_t>(std::floor(x / res + 0.5)) + g.cols / 2; };
      auto row_of = [&](double y) { return static_cast<int64_t>(std::floor(y / res + 0.5)) + g.rows / 2; };
      int64_t c0 = std::max<int64_t>(0, col_of(xmin) - 1);
      int64_t c1 = std::min<int64_t>(g.cols - 1, col_of(xmax) + 1);
      int64_t r0 = std::max<int64_t>(0, row_of(ymin) - 1);
      int64_t r1 = std::min<int64_t>(g.rows - 1, row_of(ymax) + 1);
      for (int64_t r = r0; r <= r1; ++r) {
        for (int64_t c = c0; c <= c1; ++c) {
          if (point_segment_distance(g.cell_center(r, c), a, b) <= half) {
            uint8_t& cell = out.at(r, c);
            if (class_priority(pl.class_id) > class_priority(cell))
              cell = static_cast<uint8_t>(pl.class_id);
          }
        }
      }
    }
  }
}

inline LabelRaster rasterize_labels(const std::vector<Polyline>& polylines, const GridSpec& grid,
                                    double thickness_m) {
  LabelRaster out = make_background(grid);
  rasterize_into(out, polylines, thickness_m);
  return out;
}

inline SemanticRaster rasterize_polylines(const std::vector<Polyline>& polylines,
                                          const GridSpec& grid, double thickness_m) {
  return to_semantic(rasterize_labels(polylines, grid, thickness_m));
}

// Binary occupancy raster of polylines at one-cell thickness; rows x cols x 1.
template <typename T = float>
inline Tensor<T> rasterize_occupancy(const std::vector<Polyline>& polylines,
                                     const GridSpec& grid) {
  std::vector<Polyline> tagged = polylines;
  for (auto& pl : tagged) pl.class_id = kDivider;  // any foreground class
  LabelRaster lr = rasterize_labels(tagged, grid, grid.resolution_m);
  Tensor<T> t({grid.rows, grid.cols, 1});
  for (int64_t i = 0; i < grid.rows * grid.cols; ++i)
    t[i] = lr.labels[static_cast<size_t>(i)] == kBackground ? T(0) : T(1);
  return t;
}

}  // namespace pmap
