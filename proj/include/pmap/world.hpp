#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pmap/osm.hpp"
#include "pmap/raster.hpp"

namespace pmap {

// --- Specs -----------------------------------------------------------------

struct WorldSpec {
  uint64_t seed = 0;
  double extent_m = 480.0;  // square world, [-extent/2, extent/2] each axis
  int intersections = 4;    // lower bound; the road lattice rounds up
  double lane_width_m = 3.5;
  int min_lanes = 2;
  int max_lanes = 4;
  double occlusion_base = 0.15;       // base dropout fraction
  double occlusion_rate_per_m = 0.02; // range-growth rate of dropout
  int blob_count = 4;                 // rectangular occluders per scene
  double blob_size_m = 10.0;          // occluder edge scale
  double weather_keep = 1.0;          // multiplier on keep probability
  double flip_fraction = 0.02;        // kept foreground flipped to background

  void validate() const {
    if (!(extent_m > 0)) throw InvalidArgument("WorldSpec: extent must be > 0");
    if (intersections < 0) throw InvalidArgument("WorldSpec: intersections must be >= 0");
    if (!(lane_width_m > 0)) throw InvalidArgument("WorldSpec: lane width must be > 0");
    if (min_lanes < 1 || max_lanes < min_lanes || max_lanes > 8)
      throw InvalidArgument("WorldSpec: lanes must satisfy 1 <= min <= max <= 8");
    if (occlusion_base < 0 || occlusion_base > 1)
      throw InvalidArgument("WorldSpec: occlusion base must be in [0,1]");
    if (occlusion_rate_per_m < 0)
      throw InvalidArgument("WorldSpec: occlusion rate must be >= 0");
    if (blob_count < 0 || blob_size_m < 0)
      throw InvalidArgument("WorldSpec: blob parameters must be >= 0");
    if (weather_keep < 0 || weather_keep > 1)
      throw InvalidArgument("WorldSpec: weather multiplier must be in [0,1]");
    if (flip_fraction < 0 || flip_fraction > 1)
      throw InvalidArgument("WorldSpec: flip fraction must be in [0,1]");
  }
};

inline nlohmann::ordered_json world_spec_to_json(const WorldSpec& s) {
  nlohmann::ordered_json j;
  j["seed"] = s.seed;
  j["extent_m"] = s.extent_m;
  j["intersections"] = s.intersections;
  j["lane_width_m"] = s.lane_width_m;
  j["min_lanes"] = s.min_lanes;
  j["max_lanes"] = s.max_lanes;
  j["occlusion_base"] = s.occlusion_base;
  j["occlusion_rate_per_m"] = s.occlusion_rate_per_m;
  j["blob_count"] = s.blob_count;
  j["blob_size_m"] = s.blob_size_m;
  j["weather_keep"] = s.weather_keep;
  j["flip_fraction"] = s.flip_fraction;
  return j;
}

// Unknown keys are rejected so configuration typos cannot silently fall
// back to defaults; absent keys keep their defaults.
inline WorldSpec world_spec_from_json(const nlohmann::json& j) {
  WorldSpec s;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "seed") s.seed = it.value().get<uint64_t>();
    else if (k == "extent_m") s.extent_m = it.value().get<double>();
    else if (k == "intersections") s.intersections = it.value().get<int>();
    else if (k == "lane_width_m") s.lane_width_m = it.value().get<double>();
    else if (k == "min_lanes") s.min_lanes = it.value().get<int>();
    else if (k == "max_lanes") s.max_lanes = it.value().get<int>();
    else if (k == "occlusion_base") s.occlusion_base = it.value().get<double>();
    else if (k == "occlusion_rate_per_m") s.occlusion_rate_per_m = it.value().get<double>();
    else if (k == "blob_count") s.blob_count = it.value().get<int>();
    else if (k == "blob_size_m") s.blob_size_m = it.value().get<double>();
    else if (k == "weather_keep") s.weather_keep = it.value().get<double>();
    else if (k == "flip_fraction") s.flip_fraction = it.value().get<double>();
    else throw ParseError("WorldSpec: unknown key \"" + k + "\"");
  }
  s.validate();
  return s;
}

inline nlohmann::ordered_json grid_to_json(const GridSpec& g) {
  nlohmann::ordered_json j;
  j["range_forward_m"] = g.range_forward_m;
  j["range_lateral_m"] = g.range_lateral_m;
  j["resolution_m"] = g.resolution_m;
  return j;
}

inline GridSpec grid_from_json(const nlohmann::json& j) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k != "range_forward_m" && k != "range_lateral_m" && k != "resolution_m")
      throw ParseError("GridSpec: unknown key \"" + k + "\"");
  }
  return grid_for_range(j.at("range_forward_m").get<double>(),
                        j.at("range_lateral_m").get<double>(),
                        j.at("resolution_m").get<double>());
}

inline nlohmann::ordered_json pose_to_json(const EgoPose& p) {
  nlohmann::ordered_json j;
  j["x"] = p.x;
  j["y"] = p.y;
  j["heading"] = p.heading;
  return j;
}

inline EgoPose pose_from_json(const nlohmann::json& j) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k != "x" && k != "y" && k != "heading")
      throw ParseError("EgoPose: unknown key \"" + k + "\"");
  }
  return EgoPose::make(j.at("x").get<double>(), j.at("y").get<double>(),
                       j.at("heading").get<double>());
}

// --- World -----------------------------------------------------------------

struct Road {
  std::vector<Vec2> centerline;  // world frame
  int lanes = 2;
  bool horizontal = true;

  double half_width(double lane_width) const { return lanes * lane_width / 2.0; }
};

struct Intersection {
  Vec2 center;
  size_t road_a = 0, road_b = 0;
};

struct World {
  WorldSpec spec;
  std::vector<Road> roads;
  std::vector<Intersection> intersections;
  std::vector<Polyline> hd;  // dividers, boundaries, ped crossings (world frame)
};

namespace detail {

// One straight road's lane furniture: two outer boundaries plus a divider
// at every internal lane boundary.
inline void road_furniture(const Road& road, double lane_width, std::vector<Polyline>& out) {
  Vec2 a = road.centerline.front(), b = road.centerline.back();
  Vec2 n = road.horizontal ? Vec2{0.0, 1.0} : Vec2{1.0, 0.0};
  double half = road.half_width(lane_width);
  auto offset_line = [&](double off, int cls) {
    out.push_back(Polyline{{a + off * n, b + off * n}, cls});
  };
  offset_line(-half, kBoundary);
  offset_line(half, kBoundary);
  for (int k = 1; k < road.lanes; ++k) offset_line(-half + k * lane_width, kDivider);
}

}  // namespace detail

// Deterministic road lattice: enough horizontal/vertical roads to reach the
// requested intersection count, jittered positions, randomized lane counts.
// Ped crossings span each approach arm of every intersection.
inline World gen_world(const WorldSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  World world;
  world.spec = spec;

  int n_h = 1, n_v = 0;
  if (spec.intersections > 0) {
    n_h = std::max(1, static_cast<int>(std::floor(std::sqrt(
                          static_cast<double>(spec.intersections)))));
    n_v = (spec.intersections + n_h - 1) / n_h;
  }
  double usable = spec.extent_m / 2.0 - spec.extent_m * 0.1;
  auto positions = [&](int n) {
    std::vector<double> ps;
    double spacing = 2.0 * usable / std::max(1, n);
    for (int i = 0; i < n; ++i) {
      double base = n == 1 ? 0.0 : -usable + spacing * (static_cast<double>(i) + 0.5);
      ps.push_back(base + rng.uniform(-spacing / 6.0, spacing / 6.0));
    }
    return ps;
  };
  auto lanes_draw = [&]() {
    return spec.min_lanes +
           static_cast<int>(rng.uniform_index(
               static_cast<uint64_t>(spec.max_lanes - spec.min_lanes + 1)));
  };

  double e = spec.extent_m / 2.0;
  for (double y : positions(n_h)) {
    Road r;
    r.centerline = {{-e, y}, {e, y}};
    r.lanes = lanes_draw();
    r.horizontal = true;
    world.roads.push_back(std::move(r));
  }
  for (double x : positions(n_v)) {
    Road r;
    r.centerline = {{x, -e}, {x, e}};
    r.lanes = lanes_draw();
    r.horizontal = false;
    world.roads.push_back(std::move(r));
  }

  for (const Road& road : world.roads)
    detail::road_furniture(road, spec.lane_width_m, world.hd);

  // Every horizontal/vertical pair crosses exactly once.
  constexpr double kCrossingSetbackM = 1.0;
  for (size_t hi = 0; hi < world.roads.size(); ++hi) {
    if (!world.roads[hi].horizontal) continue;
    for (size_t vi = 0; vi < world.roads.size(); ++vi) {
      if (world.roads[vi].horizontal) continue;
      const Road& h = world.roads[hi];
      const Road& v = world.roads[vi];
      Vec2 c{v.centerline.front().x, h.centerline.front().y};
      world.intersections.push_back({c, hi, vi});
      double wh = h.half_width(spec.lane_width_m);
      double wv = v.half_width(spec.lane_width_m);
      auto add = [&](Vec2 p0, Vec2 p1) {
        if (std::abs(p0.x) > e || std::abs(p1.x) > e || std::abs(p0.y) > e ||
            std::abs(p1.y) > e)
          return;
        world.hd.push_back(Polyline{{p0, p1}, kPedCrossing});
      };
      double xw = c.x - wv - kCrossingSetbackM, xe = c.x + wv + kCrossingSetbackM;
      double ys = c.y - wh - kCrossingSetbackM, yn = c.y + wh + kCrossingSetbackM;
      add({xw, c.y - wh}, {xw, c.y + wh});  // across the west arm
      add({xe, c.y - wh}, {xe, c.y + wh});  // east
      add({c.x - wv, ys}, {c.x + wv, ys});  // south
      add({c.x - wv, yn}, {c.x + wv, yn});  // north
    }
  }
  return world;
}

// SDMap: centerline skeletons only, tagged with a coarse road category by
// lane count. No lane-level furniture leaks in.
inline std::vector<Polyline> derive_sdmap(const World& world) {
  std::vector<Polyline> sd;
  for (const Road& r : world.roads) {
    int cat = r.lanes >= 4 ? static_cast<int>(RoadCategory::primary)
                           : (r.lanes == 3 ? static_cast<int>(RoadCategory::secondary)
                                           : static_cast<int>(RoadCategory::residential));
    sd.push_back(Polyline{r.centerline, cat});
  }
  return sd;
}

// --- Observation degradation ----------------------------------------------

inline double keep_probability(const WorldSpec& spec, double distance_m) {
  return (1.0 - spec.occlusion_base) * std::exp(-spec.occlusion_rate_per_m * distance_m) *
         spec.weather_keep;
}

// Degraded copy of a ground-truth label raster: range-dependent dropout,
// rectangular occluder blobs, and a small fraction of surviving foreground
// flipped to background. Never hallucinates foreground. Random draws happen
// only for foreground cells outside blobs, in row-major order, after the
// blob rectangles are drawn.
inline LabelRaster simulate_observation_labels(const LabelRaster& gt, const WorldSpec& spec,
                                               uint64_t seed) {
  spec.validate();
  const GridSpec& g = gt.grid;
  Rng rng(seed);
  struct Blob {
    double x0, x1, y0, y1;
  };
  std::vector<Blob> blobs;
  for (int i = 0; i < spec.blob_count; ++i) {
    double cx = rng.uniform(-g.half_forward(), g.half_forward());
    double cy = rng.uniform(-g.half_lateral(), g.half_lateral());
    double hx = rng.uniform(spec.blob_size_m / 4.0, spec.blob_size_m / 2.0);
    double hy = rng.uniform(spec.blob_size_m / 4.0, spec.blob_size_m / 2.0);
    blobs.push_back({cx - hx, cx + hx, cy - hy, cy + hy});
  }
  LabelRaster obs = gt;
  for (int64_t r = 0; r < g.rows; ++r)
    for (int64_t c = 0; c < g.cols; ++c) {
      size_t i = static_cast<size_t>(r * g.cols + c);
      if (gt.labels[i] == kBackground) continue;
      Vec2 p = g.cell_center(r, c);
      bool occluded = false;
      for (const Blob& b : blobs)
        if (p.x >= b.x0 && p.x <= b.x1 && p.y >= b.y0 && p.y <= b.y1) {
          occluded = true;
          break;
        }
      if (occluded) {
        obs.labels[i] = static_cast<uint8_t>(kBackground);
        continue;
      }
      if (rng.uniform() >= keep_probability(spec, norm(p))) {
        obs.labels[i] = static_cast<uint8_t>(kBackground);
        continue;
      }
      if (spec.flip_fraction > 0 && rng.uniform() < spec.flip_fraction)
        obs.labels[i] = static_cast<uint8_t>(kBackground);
    }
  return obs;
}

inline Tensor<float> simulate_observation(const LabelRaster& gt, const WorldSpec& spec,
                                          uint64_t seed) {
  return labels_to_onehot(simulate_observation_labels(gt, spec, seed));
}

// --- Scenes ----------------------------------------------------------------

struct Scene {
  EgoPose pose;
  SemanticRaster gt;             // labels kind
  Tensor<float> obs;             // one-hot degraded raster
  std::vector<Polyline> sd;      // perturbed SD window, ego frame
};

constexpr double kGtThicknessM = 0.3;

// Rasterization width for ground truth. Never thinner than one cell, or
// lines at unlucky offsets would slip between cell centers at coarse
// resolutions and vanish from the raster.
inline double gt_thickness_for(const GridSpec& grid, double requested_m = 0.0) {
  double base = requested_m > 0 ? requested_m : kGtThicknessM;
  return std::max(base, grid.resolution_m);
}

// Transforms the world's HD polylines into the ego frame. No clipping: the
// rasterizer only visits cells near each segment.
inline std::vector<Polyline> hd_in_ego(const World& world, const EgoPose& pose) {
  std::vector<Polyline> out;
  for (const Polyline& pl : world.hd) {
    Polyline ego;
    ego.class_id = pl.class_id;
    for (const Vec2& p : pl.points) ego.points.push_back(world_to_ego(p, pose));
    out.push_back(std::move(ego));
  }
  return out;
}

// Ego pose on a road: a point along a centerline with a tangent heading
// (random travel direction) and a small in-lane lateral offset.
inline EgoPose sample_pose(const World& world, Rng& rng) {
  if (world.roads.empty()) throw DataError("sample_pose: world has no roads");
  const Road& road = world.roads[rng.uniform_index(world.roads.size())];
  Vec2 a = road.centerline.front(), b = road.centerline.back();
  double len = norm(b - a);
  if (len <= 1e-9) throw DataError("sample_pose: degenerate road centerline");
  double t = rng.uniform(0.05, 0.95);
  Vec2 pos = a + t * (b - a);
  Vec2 dir{(b.x - a.x) / len, (b.y - a.y) / len};
  if (rng.uniform() < 0.5) dir = {-dir.x, -dir.y};  // travel direction
  double max_off = std::max(0.0, road.half_width(world.spec.lane_width_m) -
                                     world.spec.lane_width_m / 2.0);
  double off = rng.uniform(-max_off, max_off);
  Vec2 left{-dir.y, dir.x};
  pos = pos + off * left;
  return EgoPose::make(pos.x, pos.y, std::atan2(dir.y, dir.x));
}

// A full dataset sample: pose, ground truth, degraded observation, and the
// independently misaligned SD window.
inline std::vector<Scene> sample_dataset(const World& world, int n_scenes, const GridSpec& grid,
                                         double sigma_t_m, double sigma_r_rad, uint64_t seed,
                                         double gt_thickness_m = 0.0) {
  if (n_scenes < 1) throw InvalidArgument("sample_dataset: need at least one scene");
  if (world.spec.extent_m + 1e-9 < 2.0 * std::max(grid.range_forward_m, grid.range_lateral_m))
    throw InvalidArgument("sample_dataset: world extent smaller than twice the grid range");
  double thickness = gt_thickness_for(grid, gt_thickness_m);
  std::vector<Polyline> sd_world = derive_sdmap(world);
  Rng master(seed);
  std::vector<Scene> scenes;
  for (int i = 0; i < n_scenes; ++i) {
    Rng rng = master.fork(static_cast<uint64_t>(i));
    Scene s;
    s.pose = sample_pose(world, rng);
    LabelRaster gt_labels = rasterize_labels(hd_in_ego(world, s.pose), grid, thickness);
    s.gt = to_semantic(gt_labels);
    uint64_t obs_seed = seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<uint64_t>(i) + 1));
    s.obs = simulate_observation(gt_labels, world.spec, obs_seed);
    std::vector<Polyline> window = extract_sd_window(sd_world, s.pose, grid);
    RigidPerturbation pert = sample_perturbation(rng, sigma_t_m, sigma_r_rad);
    s.sd = apply_perturbation(window, pert);
    scenes.push_back(std::move(s));
  }
  return scenes;
}

// --- Dataset IO ------------------------------------------------------------
// Layout: <dir>/manifest.json plus scenes/NNNN/{gt.pmtn, obs.pmtn, sd.json,
// pose.json}.

struct Dataset {
  WorldSpec spec;
  GridSpec grid;
  std::vector<Scene> scenes;
};

namespace detail {
inline std::string scene_dir_name(size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return j;
}
}  // namespace detail

inline void save_dataset(const std::string& dir, const WorldSpec& spec, const GridSpec& grid,
                         const std::vector<Scene>& scenes) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "scenes");
  nlohmann::ordered_json manifest;
  manifest["format"] = "pmap-dataset-v1";
  manifest["world"] = world_spec_to_json(spec);
  manifest["grid"] = grid_to_json(grid);
  manifest["scenes"] = scenes.size();
  detail::write_json_file(fs::path(dir) / "manifest.json", manifest);
  for (size_t i = 0; i < scenes.size(); ++i) {
    fs::path sd = fs::path(dir) / "scenes" / detail::scene_dir_name(i);
    fs::create_directories(sd);
    save_tensor((sd / "gt.pmtn").string(), scenes[i].gt.values);
    save_tensor((sd / "obs.pmtn").string(), scenes[i].obs);
    detail::write_json_file(sd / "sd.json", polylines_to_json(scenes[i].sd));
    detail::write_json_file(sd / "pose.json", pose_to_json(scenes[i].pose));
  }
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  nlohmann::json manifest = detail::read_json_file(fs::path(dir) / "manifest.json");
  if (manifest.value("format", "") != "pmap-dataset-v1")
    throw ParseError("dataset manifest: unknown format");
  Dataset ds;
  ds.spec = world_spec_from_json(manifest.at("world"));
  ds.grid = grid_from_json(manifest.at("grid"));
  size_t n = manifest.at("scenes").get<size_t>();
  for (size_t i = 0; i < n; ++i) {
    fs::path sd = fs::path(dir) / "scenes" / detail::scene_dir_name(i);
    Scene s;
    s.pose = pose_from_json(detail::read_json_file(sd / "pose.json"));
    Tensor<float> gt = load_tensor<float>((sd / "gt.pmtn").string());
    if (gt.rank() != 3 || gt.extent(0) != ds.grid.rows || gt.extent(1) != ds.grid.cols ||
        gt.extent(2) != kNumChannels)
      throw DataError("dataset scene " + detail::scene_dir_name(i) + ": gt shape " +
                      shape_str(gt.shape()) + " does not match grid");
    s.gt = SemanticRaster{ds.grid, std::move(gt), RasterKind::labels};
    s.gt.validate();
    s.obs = load_tensor<float>((sd / "obs.pmtn").string());
    if (s.obs.shape() != s.gt.values.shape())
      throw DataError("dataset scene " + detail::scene_dir_name(i) +
                      ": obs shape does not match gt");
    s.sd = polylines_from_json(detail::read_json_file(sd / "sd.json"));
    ds.scenes.push_back(std::move(s));
  }
  return ds;
}

}  // namespace pmap
