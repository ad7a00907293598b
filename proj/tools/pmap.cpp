#include <CLI11.hpp>

#include <iostream>
#include <string>

#include "pmap/cli.hpp"

// Single-binary subcommand CLI. Anything affecting numerics lives in the
// config file; flags carry only paths and toggles.
int main(int argc, char** argv) {
  CLI::App app{"BEV map segmentation pipeline with SD and HD map priors"};
  app.require_subcommand(1);

  std::string osm_path, trajectory_path, config_path, data_dir, out_dir;
  std::string fusion_ckpt, mae_ckpt, dataset_dir, out_path;
  bool include_service = false, freeze_fusion = false, overlay = false, gt_as_pred = false;
  int index = 0;

  CLI::App* extract = app.add_subcommand("extract-sdmap",
                                         "Clip an OSM road graph to per-pose SD map windows");
  extract->add_option("--osm", osm_path, "OSM XML file")->required();
  extract->add_option("--trajectory", trajectory_path, "Trajectory JSON file")->required();
  extract->add_option("--out", out_dir, "Output directory")->required();
  extract->add_flag("--include-service", include_service, "Keep service roads");

  CLI::App* gen = app.add_subcommand("gen-world", "Generate a world and sample datasets");
  gen->add_option("--config", config_path, "Run config JSON")->required();
  gen->add_option("--out", out_dir, "Output directory")->required();

  CLI::App* pre = app.add_subcommand("pretrain", "Pretrain the map autoencoder on HD masks");
  pre->add_option("--config", config_path, "Run config JSON")->required();
  pre->add_option("--data", data_dir, "Dataset directory from gen-world")->required();
  pre->add_option("--out", out_dir, "Output directory")->required();

  CLI::App* train = app.add_subcommand("train", "Train the SD prior fusion segmenter");
  train->add_option("--config", config_path, "Run config JSON")->required();
  train->add_option("--data", data_dir, "Dataset directory from gen-world")->required();
  train->add_option("--out", out_dir, "Output directory")->required();

  CLI::App* fine = app.add_subcommand("finetune", "Fine-tune segmenter and autoencoder jointly");
  fine->add_option("--config", config_path, "Run config JSON")->required();
  fine->add_option("--data", data_dir, "Dataset directory from gen-world")->required();
  fine->add_option("--fusion", fusion_ckpt, "Fusion checkpoint from train")->required();
  fine->add_option("--mae", mae_ckpt, "Autoencoder checkpoint from pretrain")->required();
  fine->add_option("--out", out_dir, "Output directory")->required();
  fine->add_flag("--freeze-fusion", freeze_fusion, "Update only the autoencoder");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate checkpoints on the eval split");
  eval->add_option("--config", config_path, "Run config JSON")->required();
  eval->add_option("--data", data_dir, "Dataset directory from gen-world")->required();
  eval->add_option("--fusion", fusion_ckpt, "Fusion checkpoint");
  eval->add_option("--mae", mae_ckpt, "Optional autoencoder checkpoint for refinement");
  eval->add_option("--out", out_dir, "Output directory")->required();
  eval->add_flag("--gt-as-pred", gt_as_pred, "Score ground truth against itself");

  CLI::App* render = app.add_subcommand("render", "Render a dataset scene to a PPM image");
  render->add_option("--data", dataset_dir, "Dataset directory (train or eval split)")
      ->required();
  render->add_option("--index", index, "Scene index")->required();
  render->add_option("--out", out_path, "Output PPM path")->required();
  render->add_flag("--overlay-sd", overlay, "Paint the SD prior in white");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return pmap::kExitUsage;
  }

  if (extract->parsed())
    return pmap::cmd_extract_sdmap(osm_path, trajectory_path, out_dir, include_service,
                                   std::cout, std::cerr);
  if (gen->parsed()) return pmap::cmd_gen_world(config_path, out_dir, std::cout, std::cerr);
  if (pre->parsed())
    return pmap::cmd_pretrain(config_path, data_dir, out_dir, std::cout, std::cerr);
  if (train->parsed())
    return pmap::cmd_train(config_path, data_dir, out_dir, std::cout, std::cerr);
  if (fine->parsed())
    return pmap::cmd_finetune(config_path, data_dir, fusion_ckpt, mae_ckpt, out_dir,
                              freeze_fusion, std::cout, std::cerr);
  if (eval->parsed())
    return pmap::cmd_eval(config_path, data_dir, fusion_ckpt, mae_ckpt, out_dir, gt_as_pred,
                          std::cout, std::cerr);
  if (render->parsed())
    return pmap::cmd_render(dataset_dir, index, out_path, overlay, std::cout, std::cerr);
  return pmap::kExitUsage;
}
