#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "pmap/geometry.hpp"

namespace pmap {

// Map element classes. Raster channel order matches these ids with
// background last.
enum MapClass : int {
  kDivider = 0,
  kPedCrossing = 1,
  kBoundary = 2,
  kBackground = 3,
};
constexpr int kNumForegroundClasses = 3;
constexpr int kNumChannels = kNumForegroundClasses + 1;

// Ordered point chain with a class id. For HDMap elements the id is a
// MapClass; SDMap centerlines reuse the field for the road category tag.
struct Polyline {
  std::vector<Vec2> points;
  int class_id = kBackground;

  void validate() const {
    if (points.size() < 2) throw InvalidArgument("Polyline: needs at least 2 points");
    for (size_t i = 0; i < points.size(); ++i) {
      if (!std::isfinite(points[i].x) || !std::isfinite(points[i].y))
        throw InvalidArgument("Polyline: non-finite point");
      if (i > 0 && norm(points[i] - points[i - 1]) <= 1e-9)
        throw InvalidArgument("Polyline: consecutive duplicate points");
    }
  }

  double length() const {
    double len = 0.0;
    for (size_t i = 1; i < points.size(); ++i) len += norm(points[i] - points[i - 1]);
    return len;
  }
};

// JSON document schema:
//   {"polylines":[{"class":int,"points":[[x,y],...]},...]}
// coordinates in meters, ego frame. Instances add a "confidence" field.
inline nlohmann::ordered_json polylines_to_json(const std::vector<Polyline>& polylines) {
  nlohmann::ordered_json doc;
  doc["polylines"] = nlohmann::ordered_json::array();
  for (const auto& pl : polylines) {
    nlohmann::ordered_json item;
    item["class"] = pl.class_id;
    auto pts = nlohmann::ordered_json::array();
    for (const auto& p : pl.points) pts.push_back({p.x, p.y});
    item["points"] = std::move(pts);
    doc["polylines"].push_back(std::move(item));
  }
  return doc;
}

inline std::vector<Polyline> polylines_from_json(const nlohmann::json& doc) {
  if (!doc.contains("polylines") || !doc["polylines"].is_array())
    throw ParseError("polyline document: missing \"polylines\" array");
  std::vector<Polyline> out;
  for (const auto& item : doc["polylines"]) {
    Polyline pl;
    pl.class_id = item.at("class").get<int>();
    for (const auto& p : item.at("points")) {
      if (!p.is_array() || p.size() != 2) throw ParseError("polyline point must be [x,y]");
      pl.points.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    pl.validate();
    out.push_back(std::move(pl));
  }
  return out;
}

}  // namespace pmap
