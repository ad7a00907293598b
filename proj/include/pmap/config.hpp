#pragma once

#include <cstdint>
#include <string>

#include "pmap/fusion.hpp"
#include "pmap/mae.hpp"
#include "pmap/world.hpp"

namespace pmap {

// Training hyperparameters shared by the pipeline stages.
struct TrainParams {
  int pretrain_epochs = 20;
  int train_epochs = 30;
  int finetune_epochs = 10;
  double lr = 1e-3;
  double pretrain_lr = 1e-3;
  double finetune_lr = 2e-4;
  int train_scenes = 32;
  int eval_scenes = 8;
  double sigma_t_m = 1.0;     // SD prior misalignment, translation
  double sigma_r_rad = 0.03;  // SD prior misalignment, rotation

  void validate() const {
    if (pretrain_epochs < 1 || train_epochs < 1 || finetune_epochs < 1)
      throw InvalidArgument("TrainParams: epochs must be >= 1");
    if (!(lr > 0.0) || !(pretrain_lr > 0.0) || !(finetune_lr > 0.0))
      throw InvalidArgument("TrainParams: learning rates must be positive");
    if (train_scenes < 1 || eval_scenes < 1)
      throw InvalidArgument("TrainParams: scene counts must be >= 1");
    if (sigma_t_m < 0.0 || sigma_r_rad < 0.0)
      throw InvalidArgument("TrainParams: misalignment sigmas must be >= 0");
  }
};

inline nlohmann::ordered_json train_params_to_json(const TrainParams& t) {
  nlohmann::ordered_json j;
  j["pretrain_epochs"] = t.pretrain_epochs;
  j["train_epochs"] = t.train_epochs;
  j["finetune_epochs"] = t.finetune_epochs;
  j["lr"] = t.lr;
  j["pretrain_lr"] = t.pretrain_lr;
  j["finetune_lr"] = t.finetune_lr;
  j["train_scenes"] = t.train_scenes;
  j["eval_scenes"] = t.eval_scenes;
  j["sigma_t_m"] = t.sigma_t_m;
  j["sigma_r_rad"] = t.sigma_r_rad;
  return j;
}

inline TrainParams train_params_from_json(const nlohmann::json& j) {
  TrainParams t;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "pretrain_epochs") t.pretrain_epochs = it.value().get<int>();
    else if (k == "train_epochs") t.train_epochs = it.value().get<int>();
    else if (k == "finetune_epochs") t.finetune_epochs = it.value().get<int>();
    else if (k == "lr") t.lr = it.value().get<double>();
    else if (k == "pretrain_lr") t.pretrain_lr = it.value().get<double>();
    else if (k == "finetune_lr") t.finetune_lr = it.value().get<double>();
    else if (k == "train_scenes") t.train_scenes = it.value().get<int>();
    else if (k == "eval_scenes") t.eval_scenes = it.value().get<int>();
    else if (k == "sigma_t_m") t.sigma_t_m = it.value().get<double>();
    else if (k == "sigma_r_rad") t.sigma_r_rad = it.value().get<double>();
    else throw ParseError("TrainParams: unknown key " + k);
  }
  t.validate();
  return t;
}

// Everything a pipeline run needs besides file paths. The grid lives inside
// the fusion config; the MAE config must agree with it.
struct RunConfig {
  WorldSpec world;
  FusionConfig fusion;
  MaeConfig mae;
  MaskSpec mask;
  TrainParams train;
  uint64_t seed = 0;

  const GridSpec& grid() const { return fusion.grid; }

  void validate() const {
    world.validate();
    fusion.validate();
    mae.validate();
    mask.validate();
    train.validate();
    if (!(fusion.grid == mae.grid))
      throw InvalidArgument("RunConfig: fusion and mae grids differ");
    if (world.extent_m + 1e-9 <
        2.0 * std::max(fusion.grid.range_forward_m, fusion.grid.range_lateral_m))
      throw InvalidArgument("RunConfig: world extent smaller than twice the grid range");
  }
};

inline nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["world"] = world_spec_to_json(c.world);
  j["fusion"] = fusion_config_to_json(c.fusion);
  j["mae"] = mae_config_to_json(c.mae);
  j["mask"] = mask_spec_to_json(c.mask);
  j["train"] = train_params_to_json(c.train);
  j["seed"] = c.seed;
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "world") c.world = world_spec_from_json(it.value());
    else if (k == "fusion") c.fusion = fusion_config_from_json(it.value());
    else if (k == "mae") c.mae = mae_config_from_json(it.value());
    else if (k == "mask") c.mask = mask_spec_from_json(it.value());
    else if (k == "train") c.train = train_params_from_json(it.value());
    else if (k == "seed") c.seed = it.value().get<uint64_t>();
    else throw ParseError("RunConfig: unknown key " + k);
  }
  c.validate();
  return c;
}

// Per-stage seed streams derived from the master seed.
enum class Stage : uint64_t {
  dataset_train = 0,
  dataset_eval = 1,
  pretrain = 2,
  train = 3,
  finetune = 4,
};

inline uint64_t stage_seed(uint64_t master, Stage stage) {
  return master ^ (0x9E3779B97F4A7C15ULL * (static_cast<uint64_t>(stage) + 1));
}

}  // namespace pmap
