#pragma once

#include <cctype>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pmap/raster.hpp"
#include "pmap/rng.hpp"

namespace pmap {

// --- OSM data model -------------------------------------------------------

struct OsmNode {
  int64_t id = 0;
  double lat = 0.0, lon = 0.0;
};

struct OsmWay {
  int64_t id = 0;
  std::vector<int64_t> node_refs;
  std::map<std::string, std::string> tags;
};

struct OsmData {
  std::map<int64_t, OsmNode> nodes;
  std::vector<OsmWay> ways;
};

enum class RoadCategory {
  motorway = 0,
  trunk,
  primary,
  secondary,
  tertiary,
  unclassified,
  residential,
  service,
  other,
};

inline RoadCategory road_category(const std::string& highway) {
  if (highway == "motorway") return RoadCategory::motorway;
  if (highway == "trunk") return RoadCategory::trunk;
  if (highway == "primary") return RoadCategory::primary;
  if (highway == "secondary") return RoadCategory::secondary;
  if (highway == "tertiary") return RoadCategory::tertiary;
  if (highway == "unclassified") return RoadCategory::unclassified;
  if (highway == "residential") return RoadCategory::residential;
  if (highway == "service") return RoadCategory::service;
  return RoadCategory::other;
}

inline const char* road_category_name(RoadCategory c) {
  switch (c) {
    case RoadCategory::motorway: return "motorway";
    case RoadCategory::trunk: return "trunk";
    case RoadCategory::primary: return "primary";
    case RoadCategory::secondary: return "secondary";
    case RoadCategory::tertiary: return "tertiary";
    case RoadCategory::unclassified: return "unclassified";
    case RoadCategory::residential: return "residential";
    case RoadCategory::service: return "service";
    case RoadCategory::other: return "other";
  }
  return "other";
}

// --- XML subset parser ----------------------------------------------------
// Handles elements, attributes (single or double quoted, any order), self
// closing tags, comments, and <? ?> / <! > declarations. Attribute values
// decode the five named entities. Errors carry 1-based line numbers.

namespace detail {

struct XmlTag {
  std::string name;
  std::vector<std::pair<std::string, std::string>> attrs;
  bool closing = false;
  bool self_closing = false;
  int line = 0;

  const std::string* attr(const std::string& key) const {
    for (const auto& [k, v] : attrs)
      if (k == key) return &v;
    return nullptr;
  }
};

class XmlScanner {
 public:
  explicit XmlScanner(std::string text) : text_(std::move(text)) {}

  int line() const { return line_; }

  // Next element tag, or nothing at end of input.
  std::optional<XmlTag> next() {
    for (;;) {
      while (pos_ < text_.size() && text_[pos_] != '<') step();
      if (pos_ >= text_.size()) return std::nullopt;
      if (match("<!--")) {
        skip_until("-->", "unterminated comment");
        continue;
      }
      if (match("<?")) {
        skip_until("?>", "unterminated declaration");
        continue;
      }
      if (match("<!")) {
        skip_until(">", "unterminated declaration");
        continue;
      }
      return parse_tag();
    }
  }

 private:
  std::string text_;
  size_t pos_ = 0;
  int line_ = 1;

  void step() {
    if (text_[pos_] == '\n') ++line_;
    ++pos_;
  }

  bool match(const char* s) {
    size_t n = std::strlen(s);
    if (text_.compare(pos_, n, s) != 0) return false;
    for (size_t i = 0; i < n; ++i) step();
    return true;
  }

  void skip_until(const char* end, const char* err) {
    size_t n = std::strlen(end);
    while (pos_ < text_.size() && text_.compare(pos_, n, end) != 0) step();
    if (pos_ >= text_.size()) throw ParseError(err, line_);
    for (size_t i = 0; i < n; ++i) step();
  }

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) step();
  }

  static bool name_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == ':';
  }

  std::string parse_name() {
    size_t start = pos_;
    while (pos_ < text_.size() && name_char(text_[pos_])) step();
    if (pos_ == start) throw ParseError("expected name", line_);
    return text_.substr(start, pos_ - start);
  }

  std::string decode_entities(const std::string& raw) {
    if (raw.find('&') == std::string::npos) return raw;
    std::string out;
    for (size_t i = 0; i < raw.size();) {
      if (raw[i] != '&') {
        out += raw[i++];
        continue;
      }
      size_t semi = raw.find(';', i);
      if (semi == std::string::npos) throw ParseError("unterminated entity", line_);
      std::string name = raw.substr(i + 1, semi - i - 1);
      if (name == "amp") out += '&';
      else if (name == "lt") out += '<';
      else if (name == "gt") out += '>';
      else if (name == "quot") out += '"';
      else if (name == "apos") out += '\'';
      else throw ParseError("unknown entity &" + name + ";", line_);
      i = semi + 1;
    }
    return out;
  }

  XmlTag parse_tag() {
    XmlTag tag;
    tag.line = line_;
    step();  // consume '<'
    if (pos_ < text_.size() && text_[pos_] == '/') {
      step();
      tag.closing = true;
      tag.name = parse_name();
      skip_ws();
      if (pos_ >= text_.size() || text_[pos_] != '>')
        throw ParseError("malformed closing tag </" + tag.name + ">", line_);
      step();
      return tag;
    }
    tag.name = parse_name();
    for (;;) {
      skip_ws();
      if (pos_ >= text_.size()) throw ParseError("unterminated tag <" + tag.name, tag.line);
      if (text_[pos_] == '>') {
        step();
        return tag;
      }
      if (text_[pos_] == '/') {
        step();
        if (pos_ >= text_.size() || text_[pos_] != '>')
          throw ParseError("expected '>' after '/'", line_);
        step();
        tag.self_closing = true;
        return tag;
      }
      std::string key = parse_name();
      skip_ws();
      if (pos_ >= text_.size() || text_[pos_] != '=')
        throw ParseError("attribute " + key + " missing '='", line_);
      step();
      skip_ws();
      if (pos_ >= text_.size() || (text_[pos_] != '"' && text_[pos_] != '\''))
        throw ParseError("attribute " + key + " missing quoted value", line_);
      char quote = text_[pos_];
      step();
      size_t start = pos_;
      while (pos_ < text_.size() && text_[pos_] != quote) step();
      if (pos_ >= text_.size()) throw ParseError("unterminated attribute value", line_);
      tag.attrs.emplace_back(key, decode_entities(text_.substr(start, pos_ - start)));
      step();
    }
  }
};

inline int64_t parse_i64_attr(const XmlTag& tag, const std::string& key) {
  const std::string* v = tag.attr(key);
  if (!v) throw ParseError("<" + tag.name + "> missing attribute " + key, tag.line);
  try {
    size_t used = 0;
    int64_t r = std::stoll(*v, &used);
    if (used != v->size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw ParseError("<" + tag.name + "> attribute " + key + " is not an integer: " + *v,
                     tag.line);
  }
}

inline double parse_f64_attr(const XmlTag& tag, const std::string& key) {
  const std::string* v = tag.attr(key);
  if (!v) throw ParseError("<" + tag.name + "> missing attribute " + key, tag.line);
  try {
    size_t used = 0;
    double r = std::stod(*v, &used);
    if (used != v->size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw ParseError("<" + tag.name + "> attribute " + key + " is not a number: " + *v,
                     tag.line);
  }
}

}  // namespace detail

inline void skip_subtree(detail::XmlScanner& scanner, const std::string& name, int open_line);

inline OsmData parse_osm(const std::string& xml) {
  detail::XmlScanner scanner(xml);
  auto first = scanner.next();
  if (!first || first->name != "osm" || first->closing)
    throw ParseError("expected <osm> root element", first ? first->line : scanner.line());
  OsmData data;
  bool closed = false;
  while (auto tag = scanner.next()) {
    if (tag->closing && tag->name == "osm") {
      closed = true;
      break;
    }
    if (tag->closing) throw ParseError("unexpected </" + tag->name + ">", tag->line);
    if (tag->name == "node") {
      OsmNode node;
      node.id = detail::parse_i64_attr(*tag, "id");
      node.lat = detail::parse_f64_attr(*tag, "lat");
      node.lon = detail::parse_f64_attr(*tag, "lon");
      if (!std::isfinite(node.lat) || !std::isfinite(node.lon) || std::abs(node.lat) > 90.0 ||
          std::abs(node.lon) > 180.0)
        throw DataError("node " + std::to_string(node.id) + ": lat/lon out of range");
      if (!data.nodes.emplace(node.id, node).second)
        throw DataError("duplicate node id " + std::to_string(node.id));
      if (!tag->self_closing) skip_subtree(scanner, "node", tag->line);
    } else if (tag->name == "way") {
      OsmWay way;
      way.id = detail::parse_i64_attr(*tag, "id");
      if (!tag->self_closing) {
        while (auto child = scanner.next()) {
          if (child->closing && child->name == "way") break;
          if (child->closing) throw ParseError("unexpected </" + child->name + ">", child->line);
          if (child->name == "nd") {
            way.node_refs.push_back(detail::parse_i64_attr(*child, "ref"));
            if (!child->self_closing) skip_subtree(scanner, "nd", child->line);
          } else if (child->name == "tag") {
            const std::string* k = child->attr("k");
            const std::string* v = child->attr("v");
            if (!k || !v) throw ParseError("<tag> needs k and v attributes", child->line);
            way.tags[*k] = *v;
            if (!child->self_closing) skip_subtree(scanner, "tag", child->line);
          } else if (!child->self_closing) {
            skip_subtree(scanner, child->name, child->line);
          }
        }
      }
      if (way.node_refs.size() < 2)
        throw DataError("way " + std::to_string(way.id) + " has fewer than 2 nodes");
      data.ways.push_back(std::move(way));
    } else if (!tag->self_closing) {
      skip_subtree(scanner, tag->name, tag->line);
    }
  }
  if (!closed) throw ParseError("missing </osm>", scanner.line());
  for (const auto& way : data.ways)
    for (int64_t ref : way.node_refs)
      if (!data.nodes.count(ref))
        throw DataError("way " + std::to_string(way.id) + " references missing node " +
                        std::to_string(ref));
  return data;
}

// Consume everything until the matching close tag.
inline void skip_subtree(detail::XmlScanner& scanner, const std::string& name, int open_line) {
  int depth = 1;
  while (auto tag = scanner.next()) {
    if (tag->closing) {
      if (--depth == 0) {
        if (tag->name != name)
          throw ParseError("expected </" + name + ">, found </" + tag->name + ">", tag->line);
        return;
      }
    } else if (!tag->self_closing) {
      ++depth;
    }
  }
  throw ParseError("unterminated <" + name + ">", open_line);
}

inline OsmData load_osm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_osm(ss.str());
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string serialize_osm(const OsmData& data) {
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<osm version=\"0.6\" generator=\"pmap\">\n";
  for (const auto& [id, node] : data.nodes)
    os << "  <node id=\"" << id << "\" lat=\"" << fmt(node.lat) << "\" lon=\"" << fmt(node.lon)
       << "\"/>\n";
  for (const auto& way : data.ways) {
    os << "  <way id=\"" << way.id << "\">\n";
    for (int64_t ref : way.node_refs) os << "    <nd ref=\"" << ref << "\"/>\n";
    for (const auto& [k, v] : way.tags)
      os << "    <tag k=\"" << xml_escape(k) << "\" v=\"" << xml_escape(v) << "\"/>\n";
    os << "  </way>\n";
  }
  os << "</osm>\n";
  return os.str();
}

// --- Projection -----------------------------------------------------------
// Equirectangular around a reference point; good to centimeters at the
// few-kilometer scale this pipeline works at.

constexpr double kEarthRadiusM = 6378137.0;

inline Vec2 project_latlon(double lat, double lon, double lat0, double lon0) {
  double d2r = kPi / 180.0;
  return {kEarthRadiusM * (lon - lon0) * d2r * std::cos(lat0 * d2r),
          kEarthRadiusM * (lat - lat0) * d2r};
}

inline std::pair<double, double> unproject_xy(Vec2 p, double lat0, double lon0) {
  double d2r = kPi / 180.0;
  double lat = lat0 + p.y / (kEarthRadiusM * d2r);
  double lon = lon0 + p.x / (kEarthRadiusM * d2r * std::cos(lat0 * d2r));
  return {lat, lon};
}

// Ways with a highway tag become world-frame centerline polylines whose
// class_id is the RoadCategory. Service roads are dropped unless asked for;
// ways without a highway tag are never roads.
inline std::vector<Polyline> osm_to_world(const OsmData& data, double lat0, double lon0,
                                          bool include_service = false) {
  std::vector<Polyline> out;
  for (const auto& way : data.ways) {
    auto it = way.tags.find("highway");
    if (it == way.tags.end()) continue;
    RoadCategory cat = road_category(it->second);
    if (cat == RoadCategory::service && !include_service) continue;
    Polyline pl;
    pl.class_id = static_cast<int>(cat);
    for (int64_t ref : way.node_refs) {
      const OsmNode& n = data.nodes.at(ref);
      Vec2 p = project_latlon(n.lat, n.lon, lat0, lon0);
      if (!pl.points.empty() && norm(p - pl.points.back()) <= 1e-9) continue;
      pl.points.push_back(p);
    }
    if (pl.points.size() >= 2) out.push_back(std::move(pl));
  }
  return out;
}

// --- Window extraction ----------------------------------------------------

// Transform world polylines into the ego frame and clip them to the grid
// extent. A way that leaves and re-enters the window splits into separate
// chains; chains shorter than a segment are dropped.
inline std::vector<Polyline> extract_sd_window(const std::vector<Polyline>& world,
                                               const EgoPose& pose, const GridSpec& grid) {
  double hf = grid.half_forward(), hl = grid.half_lateral();
  std::vector<Polyline> out;
  for (const auto& pl : world) {
    Polyline cur;
    cur.class_id = pl.class_id;
    auto flush = [&] {
      if (cur.points.size() >= 2) out.push_back(cur);
      cur.points.clear();
    };
    for (size_t i = 0; i + 1 < pl.points.size(); ++i) {
      Vec2 a = world_to_ego(pl.points[i], pose);
      Vec2 b = world_to_ego(pl.points[i + 1], pose);
      auto clipped = clip_segment_box(a, b, -hf, hf, -hl, hl);
      if (!clipped || norm(clipped->second - clipped->first) <= 1e-9) {
        flush();
        continue;
      }
      if (cur.points.empty()) {
        cur.points = {clipped->first, clipped->second};
      } else if (norm(cur.points.back() - clipped->first) <= 1e-9) {
        cur.points.push_back(clipped->second);
      } else {
        flush();
        cur.points = {clipped->first, clipped->second};
      }
    }
    flush();
  }
  return out;
}

// --- Weak alignment -------------------------------------------------------

// A single rigid offset applied to the whole window; models the few-meter
// misregistration between the road graph and the ego frame.
struct RigidPerturbation {
  double theta = 0.0;  // radians, about the ego origin
  double tx = 0.0, ty = 0.0;
};

inline RigidPerturbation sample_perturbation(Rng& rng, double sigma_t_m, double sigma_r_rad) {
  RigidPerturbation p;
  p.theta = rng.normal(0.0, sigma_r_rad);
  p.tx = rng.normal(0.0, sigma_t_m);
  p.ty = rng.normal(0.0, sigma_t_m);
  return p;
}

inline Vec2 apply_perturbation(Vec2 v, const RigidPerturbation& p) {
  double c = std::cos(p.theta), s = std::sin(p.theta);
  return {c * v.x - s * v.y + p.tx, s * v.x + c * v.y + p.ty};
}

inline std::vector<Polyline> apply_perturbation(const std::vector<Polyline>& polys,
                                                const RigidPerturbation& p) {
  std::vector<Polyline> out = polys;
  for (auto& pl : out)
    for (auto& v : pl.points) v = apply_perturbation(v, p);
  return out;
}

// --- SD raster ------------------------------------------------------------

// Binary occupancy of the centerlines on a d-times coarser grid, matching
// the BEV feature resolution the prior is fused at.
template <typename T = float>
inline Tensor<T> rasterize_sd(const std::vector<Polyline>& ego_polys, const GridSpec& grid,
                              int64_t downsample) {
  if (downsample < 1) throw InvalidArgument("rasterize_sd: downsample must be >= 1");
  if (grid.rows % downsample != 0 || grid.cols % downsample != 0)
    throw InvalidArgument("rasterize_sd: downsample must divide the grid");
  GridSpec coarse = grid_for_range(grid.range_forward_m, grid.range_lateral_m,
                                   grid.resolution_m * static_cast<double>(downsample));
  return rasterize_occupancy<T>(ego_polys, coarse);
}

}  // namespace pmap
