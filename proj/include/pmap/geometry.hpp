#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>

#include "pmap/common.hpp"

namespace pmap {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 v) { return {s * v.x, s * v.y}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 v) { return std::hypot(v.x, v.y); }

// Distance from point p to segment [a, b].
inline double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  Vec2 ab = b - a;
  double len2 = dot(ab, ab);
  if (len2 <= 0.0) return norm(p - a);
  double t = dot(p - a, ab) / len2;
  if (t < 0.0) t = 0.0;
  if (t > 1.0) t = 1.0;
  return norm(p - (a + t * ab));
}

// BEV raster geometry. The ego vehicle sits at the grid center facing +x
// (the travel direction); x is the longitudinal axis spanning cols cells,
// y the lateral axis spanning rows cells.
struct GridSpec {
  double range_forward_m = 0.0;  // total longitudinal extent, ego-centered
  double range_lateral_m = 0.0;
  double resolution_m = 0.0;
  int64_t rows = 0;  // lateral cell count
  int64_t cols = 0;  // longitudinal cell count

  double half_forward() const { return range_forward_m / 2.0; }
  double half_lateral() const { return range_lateral_m / 2.0; }

  // Center of cell (r, c) in ego meters. Row 0 is the most negative y,
  // column 0 the most negative x, and cell (rows/2, cols/2) is centered
  // on the ego origin.
  Vec2 cell_center(int64_t r, int64_t c) const {
    return {static_cast<double>(c - cols / 2) * resolution_m,
            static_cast<double>(r - rows / 2) * resolution_m};
  }

  // Cell whose center is nearest an ego-frame point (ties round up), if
  // within the lattice.
  std::optional<std::pair<int64_t, int64_t>> cell_of(Vec2 p) const {
    int64_t c = static_cast<int64_t>(std::floor(p.x / resolution_m + 0.5)) + cols / 2;
    int64_t r = static_cast<int64_t>(std::floor(p.y / resolution_m + 0.5)) + rows / 2;
    if (r < 0 || r >= rows || c < 0 || c >= cols) return std::nullopt;
    return std::make_pair(r, c);
  }

  bool inside(Vec2 p) const {
    return p.x >= -half_forward() && p.x <= half_forward() &&
           p.y >= -half_lateral() && p.y <= half_lateral();
  }

  bool operator==(const GridSpec& o) const {
    return range_forward_m == o.range_forward_m && range_lateral_m == o.range_lateral_m &&
           resolution_m == o.resolution_m && rows == o.rows && cols == o.cols;
  }
};

inline GridSpec grid_for_range(double range_forward_m, double range_lateral_m,
                               double resolution_m) {
  if (range_forward_m <= 0 || range_lateral_m <= 0 || resolution_m <= 0)
    throw InvalidArgument("grid_for_range: all arguments must be > 0");
  double fc = range_forward_m / resolution_m;
  double lc = range_lateral_m / resolution_m;
  if (std::abs(fc - std::round(fc)) > 1e-6 || std::abs(lc - std::round(lc)) > 1e-6)
    throw InvalidArgument("grid_for_range: range not divisible by resolution");
  GridSpec g;
  g.range_forward_m = range_forward_m;
  g.range_lateral_m = range_lateral_m;
  g.resolution_m = resolution_m;
  g.cols = static_cast<int64_t>(std::llround(fc));
  g.rows = static_cast<int64_t>(std::llround(lc));
  return g;
}

// Pose of the ego vehicle in the world frame; heading is counterclockwise
// from world +x, normalized to (-pi, pi].
struct EgoPose {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;

  static EgoPose make(double x, double y, double heading) {
    return {x, y, normalize_angle(heading)};
  }
};

// Rigid transform into the ego frame: translate by -(pose.x, pose.y), then
// rotate by -heading so the ego faces +x.
inline Vec2 world_to_ego(Vec2 p, const EgoPose& pose) {
  double dx = p.x - pose.x;
  double dy = p.y - pose.y;
  double c = std::cos(pose.heading);
  double s = std::sin(pose.heading);
  return {c * dx + s * dy, -s * dx + c * dy};
}

inline Vec2 ego_to_world(Vec2 p, const EgoPose& pose) {
  double c = std::cos(pose.heading);
  double s = std::sin(pose.heading);
  return {pose.x + c * p.x - s * p.y, pose.y + s * p.x + c * p.y};
}

// Clip segment [a, b] to the axis-aligned box [xmin,xmax]x[ymin,ymax] by
// intersecting the per-axis parameter intervals. Returns the clipped
// endpoints, or nothing when the segment misses the box.
inline std::optional<std::pair<Vec2, Vec2>> clip_segment_box(Vec2 a, Vec2 b, double xmin,
                                                             double xmax, double ymin,
                                                             double ymax) {
  double t0 = 0.0, t1 = 1.0;
  double d[2] = {b.x - a.x, b.y - a.y};
  double p0[2] = {a.x, a.y};
  double lo[2] = {xmin, ymin};
  double hi[2] = {xmax, ymax};
  for (int axis = 0; axis < 2; ++axis) {
    if (d[axis] == 0.0) {
      if (p0[axis] < lo[axis] || p0[axis] > hi[axis]) return std::nullopt;
      continue;
    }
    double ta = (lo[axis] - p0[axis]) / d[axis];
    double tb = (hi[axis] - p0[axis]) / d[axis];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::nullopt;
  }
  Vec2 pa = {a.x + t0 * (b.x - a.x), a.y + t0 * (b.y - a.y)};
  Vec2 pb = {a.x + t1 * (b.x - a.x), a.y + t1 * (b.y - a.y)};
  // Clamp residual floating error onto the box.
  pa.x = std::clamp(pa.x, xmin, xmax);
  pa.y = std::clamp(pa.y, ymin, ymax);
  pb.x = std::clamp(pb.x, xmin, xmax);
  pb.y = std::clamp(pb.y, ymin, ymax);
  return std::make_pair(pa, pb);
}

}  // namespace pmap
