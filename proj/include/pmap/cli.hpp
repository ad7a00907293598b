#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "pmap/checkpoint.hpp"
#include "pmap/config.hpp"
#include "pmap/mae.hpp"
#include "pmap/metrics.hpp"
#include "pmap/osm.hpp"
#include "pmap/render.hpp"
#include "pmap/vectorize.hpp"

namespace pmap {

// Exit codes shared by every subcommand.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

namespace detail {

// Maps library errors onto the exit-code contract; usage errors never reach
// here (the flag parser owns those).
template <typename Fn>
inline int guarded(std::ostream& err, Fn&& fn) {
  try {
    fn();
    return kExitOk;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

inline RunConfig load_run_config(const std::string& path) {
  RunConfig cfg = run_config_from_json(read_json_file(path));
  if (const char* env = std::getenv("PMAP_SEED")) {
    char* end = nullptr;
    unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0')
      throw ParseError(std::string("PMAP_SEED: not an unsigned integer: ") + env);
    cfg.seed = static_cast<uint64_t>(v);
    cfg.world.seed = cfg.seed;
  }
  return cfg;
}

// Every run leaves the exact config it executed with next to its artifacts.
inline void write_snapshot(const std::filesystem::path& dir, const RunConfig& cfg) {
  std::filesystem::create_directories(dir);
  write_json_file(dir / "config.json", run_config_to_json(cfg));
}

inline void require_dataset(const std::filesystem::path& dir, const std::string& stage) {
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw DataError(stage + ": dataset missing at " + dir.string() + " (run gen-world first)");
}

inline void require_checkpoint(const std::filesystem::path& dir, const std::string& name,
                               const std::string& producer) {
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw DataError(name + " checkpoint missing at " + dir.string() + " (run " + producer +
                    " first)");
}

inline std::ofstream open_log(const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  return os;
}

// Clipped ego-frame HD elements; the vector ground truth for instance AP.
inline std::vector<Polyline> gt_instances(const World& world, const EgoPose& pose,
                                          const GridSpec& grid) {
  return extract_sd_window(world.hd, pose, grid);
}

}  // namespace detail

// --- extract-sdmap ---------------------------------------------------------

// Trajectory schema: {"origin": {"lat", "lon"}, "grid": {...}, "poses": [...]}.
inline int cmd_extract_sdmap(const std::string& osm_path, const std::string& trajectory_path,
                             const std::string& out_dir, bool include_service,
                             std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  return detail::guarded(err, [&] {
    OsmData data = load_osm(osm_path);
    nlohmann::json traj = detail::read_json_file(trajectory_path);
    double lat0 = 0.0, lon0 = 0.0;
    GridSpec grid;
    std::vector<EgoPose> poses;
    bool have_origin = false, have_grid = false;
    for (auto it = traj.begin(); it != traj.end(); ++it) {
      const std::string& k = it.key();
      if (k == "origin") {
        lat0 = it.value().at("lat").get<double>();
        lon0 = it.value().at("lon").get<double>();
        have_origin = true;
      } else if (k == "grid") {
        grid = grid_from_json(it.value());
        have_grid = true;
      } else if (k == "poses") {
        for (const auto& p : it.value()) poses.push_back(pose_from_json(p));
      } else {
        throw ParseError("trajectory: unknown key " + k);
      }
    }
    if (!have_origin || !have_grid)
      throw ParseError("trajectory: origin and grid are required");

    std::vector<Polyline> world = osm_to_world(data, lat0, lon0, include_service);
    double total_len = 0.0;
    for (const Polyline& pl : world) total_len += pl.length();

    fs::create_directories(out_dir);
    for (size_t i = 0; i < poses.size(); ++i) {
      nlohmann::ordered_json doc;
      doc["pose"] = pose_to_json(poses[i]);
      doc["polylines"] = polylines_to_json(extract_sd_window(world, poses[i], grid));
      detail::write_json_file(fs::path(out_dir) / ("sdmap_" + detail::scene_dir_name(i) +
                                                   ".json"),
                              doc);
    }
    nlohmann::ordered_json stats;
    stats["ways"] = world.size();
    stats["total_length_m"] = total_len;
    stats["poses"] = poses.size();
    stats["include_service"] = include_service;
    detail::write_json_file(fs::path(out_dir) / "stats.json", stats);
    out << "extract-sdmap: " << world.size() << " ways, " << total_len << " m, "
        << poses.size() << " windows\n";
  });
}

// --- gen-world -------------------------------------------------------------

inline int cmd_gen_world(const std::string& config_path, const std::string& out_dir,
                         std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  return detail::guarded(err, [&] {
    RunConfig cfg = detail::load_run_config(config_path);
    detail::write_snapshot(out_dir, cfg);
    World world = gen_world(cfg.world);
    std::vector<Scene> train =
        sample_dataset(world, cfg.train.train_scenes, cfg.grid(), cfg.train.sigma_t_m,
                       cfg.train.sigma_r_rad, stage_seed(cfg.seed, Stage::dataset_train));
    std::vector<Scene> eval =
        sample_dataset(world, cfg.train.eval_scenes, cfg.grid(), cfg.train.sigma_t_m,
                       cfg.train.sigma_r_rad, stage_seed(cfg.seed, Stage::dataset_eval));
    save_dataset((fs::path(out_dir) / "train").string(), cfg.world, cfg.grid(), train);
    save_dataset((fs::path(out_dir) / "eval").string(), cfg.world, cfg.grid(), eval);
    out << "gen-world: " << world.roads.size() << " roads, " << train.size() << " train / "
        << eval.size() << " eval scenes\n";
  });
}

// --- pretrain --------------------------------------------------------------

inline int cmd_pretrain(const std::string& config_path, const std::string& data_dir,
                        const std::string& out_dir, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  return detail::guarded(err, [&] {
    RunConfig cfg = detail::load_run_config(config_path);
    detail::require_dataset(fs::path(data_dir) / "train", "pretrain");
    Dataset ds = load_dataset((fs::path(data_dir) / "train").string());
    detail::write_snapshot(out_dir, cfg);

    std::vector<SemanticRaster> maps;
    for (const Scene& sc : ds.scenes) maps.push_back(sc.gt);

    uint64_t seed = stage_seed(cfg.seed, Stage::pretrain);
    Rng rng(seed);
    MaeModel<float> model(cfg.mae, rng);
    std::ofstream csv = detail::open_log(fs::path(out_dir) / "pretrain_log.csv");
    std::vector<EpochLog> logs = pretrain_mae(model, maps, cfg.mask,
                                              cfg.train.pretrain_epochs,
                                              cfg.train.pretrain_lr, seed, &csv);

    ParamRefs<float> ps;
    model.params(ps);
    CheckpointMeta meta;
    meta.model = "mae";
    meta.epoch = cfg.train.pretrain_epochs;
    meta.seed = seed;
    meta.config = mae_config_to_json(cfg.mae);
    save_checkpoint((fs::path(out_dir) / "mae").string(), ps, meta);
    out << "pretrain: " << logs.size() << " epochs, final loss " << logs.back().loss
        << ", miou " << logs.back().miou << "\n";
  });
}

// --- train -----------------------------------------------------------------

inline int cmd_train(const std::string& config_path, const std::string& data_dir,
                     const std::string& out_dir, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  return detail::guarded(err, [&] {
    RunConfig cfg = detail::load_run_config(config_path);
    detail::require_dataset(fs::path(data_dir) / "train", "train");
    Dataset ds = load_dataset((fs::path(data_dir) / "train").string());
    detail::write_snapshot(out_dir, cfg);

    uint64_t seed = stage_seed(cfg.seed, Stage::train);
    Rng rng(seed);
    FusionModel<float> model(cfg.fusion, rng);
    std::ofstream csv = detail::open_log(fs::path(out_dir) / "train_log.csv");
    std::vector<EpochLog> logs = train_fusion(model, ds.scenes, cfg.train.train_epochs,
                                              cfg.train.lr, seed, &csv);

    ParamRefs<float> ps;
    model.params(ps);
    CheckpointMeta meta;
    meta.model = "fusion";
    meta.epoch = cfg.train.train_epochs;
    meta.seed = seed;
    meta.config = fusion_config_to_json(cfg.fusion);
    save_checkpoint((fs::path(out_dir) / "fusion").string(), ps, meta);
    out << "train: " << logs.size() << " epochs, final loss " << logs.back().loss
        << ", miou " << logs.back().miou << "\n";
  });
}

// --- finetune --------------------------------------------------------------

inline int cmd_finetune(const std::string& config_path, const std::string& data_dir,
                        const std::string& fusion_ckpt, const std::string& mae_ckpt,
                        const std::string& out_dir, bool freeze_fusion, std::ostream& out,
                        std::ostream& err) {
  namespace fs = std::filesystem;
  return detail::guarded(err, [&] {
    RunConfig cfg = detail::load_run_config(config_path);
    detail::require_dataset(fs::path(data_dir) / "train", "finetune");
    detail::require_checkpoint(fusion_ckpt, "fusion", "train");
    detail::require_checkpoint(mae_ckpt, "mae", "pretrain");
    Dataset ds = load_dataset((fs::path(data_dir) / "train").string());
    detail::write_snapshot(out_dir, cfg);

    uint64_t seed = stage_seed(cfg.seed, Stage::finetune);
    Rng rng(seed);
    FusionModel<float> fusion(cfg.fusion, rng);
    MaeModel<float> mae(cfg.mae, rng);
    ParamRefs<float> fps, mps;
    fusion.params(fps);
    mae.params(mps);
    load_checkpoint(fusion_ckpt, fps);
    load_checkpoint(mae_ckpt, mps);

    std::ofstream csv = detail::open_log(fs::path(out_dir) / "finetune_log.csv");
    std::vector<EpochLog> logs = finetune(fusion, mae, ds.scenes, cfg.train.finetune_epochs,
                                          cfg.train.finetune_lr, seed, &csv, freeze_fusion);

    CheckpointMeta fmeta;
    fmeta.model = "fusion";
    fmeta.epoch = cfg.train.finetune_epochs;
    fmeta.seed = seed;
    fmeta.config = fusion_config_to_json(cfg.fusion);
    save_checkpoint((fs::path(out_dir) / "fusion").string(), fps, fmeta);
    CheckpointMeta mmeta;
    mmeta.model = "mae";
    mmeta.epoch = cfg.train.finetune_epochs;
    mmeta.seed = seed;
    mmeta.config = mae_config_to_json(cfg.mae);
    save_checkpoint((fs::path(out_dir) / "mae").string(), mps, mmeta);
    out << "finetune: " << logs.size() << " epochs, final loss " << logs.back().loss
        << ", miou " << logs.back().miou << "\n";
  });
}

// --- eval ------------------------------------------------------------------

// With --gt-as-pred the ground truth plays the prediction; the report must
// then be perfect, which makes the metric plumbing auditable end to end.
inline int cmd_eval(const std::string& config_path, const std::string& data_dir,
                    const std::string& fusion_ckpt, const std::string& mae_ckpt,
                    const std::string& out_dir, bool gt_as_pred, std::ostream& out,
                    std::ostream& err) {
  namespace fs = std::filesystem;
  return detail::guarded(err, [&] {
    RunConfig cfg = detail::load_run_config(config_path);
    detail::require_dataset(fs::path(data_dir) / "eval", "eval");
    Dataset ds = load_dataset((fs::path(data_dir) / "eval").string());
    detail::write_snapshot(out_dir, cfg);

    Rng frng(stage_seed(cfg.seed, Stage::train));
    Rng mrng(stage_seed(cfg.seed, Stage::pretrain));
    FusionModel<float> fusion(cfg.fusion, frng);
    MaeModel<float> mae(cfg.mae, mrng);
    bool use_mae = !mae_ckpt.empty();
    if (!gt_as_pred) {
      if (fusion_ckpt.empty())
        throw DataError("eval: --fusion checkpoint required unless --gt-as-pred is set");
      detail::require_checkpoint(fusion_ckpt, "fusion", "train");
      ParamRefs<float> fps;
      fusion.params(fps);
      load_checkpoint(fusion_ckpt, fps);
      if (use_mae) {
        detail::require_checkpoint(mae_ckpt, "mae", "pretrain");
        ParamRefs<float> mps;
        mae.params(mps);
        load_checkpoint(mae_ckpt, mps);
      }
    }

    World world = gen_world(ds.spec);
    VectorizeConfig vcfg;
    MetricsAccumulator acc(ds.grid);
    for (const Scene& sc : ds.scenes) {
      std::vector<uint8_t> gt_labels = channels_to_labels(sc.gt.values);
      std::vector<Polyline> gt_vec = detail::gt_instances(world, sc.pose, ds.grid);
      if (gt_as_pred) {
        acc.add_scene(gt_labels, gt_labels, vectorize(sc.gt, vcfg), gt_vec);
        continue;
      }
      Tensor<float> sd = rasterize_sd<float>(sc.sd, ds.grid, cfg.fusion.downsample);
      Tensor<float> logits = fusion.forward(sc.obs, sd, false);
      if (use_mae) logits = mae.refine_forward(logits, false);
      SemanticRaster pred{ds.grid, logits, RasterKind::logits};
      acc.add_scene(channels_to_labels(logits), gt_labels, vectorize(pred, vcfg), gt_vec);
    }

    EvalReport report = acc.finalize();
    detail::write_json_file(fs::path(out_dir) / "eval_report.json", report.to_json());
    std::string table = report.to_table(gt_as_pred ? "eval (gt as pred)"
                                                   : use_mae ? "eval (S+H)" : "eval (S)");
    std::ofstream ts(fs::path(out_dir) / "eval_report.txt");
    if (!ts) throw DataError("cannot write eval_report.txt");
    ts << table;
    out << table;
  });
}

// --- render ----------------------------------------------------------------

inline int cmd_render(const std::string& dataset_dir, int index, const std::string& out_path,
                      bool overlay, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    detail::require_dataset(dataset_dir, "render");
    Dataset ds = load_dataset(dataset_dir);
    if (index < 0 || index >= static_cast<int>(ds.scenes.size()))
      throw DataError("render: scene index " + std::to_string(index) + " out of range [0, " +
                      std::to_string(ds.scenes.size()) + ")");
    const Scene& sc = ds.scenes[static_cast<size_t>(index)];
    Image img = render_semantic(sc.gt);
    if (overlay) overlay_sd(img, rasterize_sd<float>(sc.sd, ds.grid, 1));
    write_ppm(out_path, img);
    out << "render: wrote " << out_path << " (" << img.width << "x" << img.height << ")\n";
  });
}

}  // namespace pmap
