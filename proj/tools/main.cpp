#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "meshreg/geometry.hpp"
#include "meshreg/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"mesh-rigged feature registers: preprocessing, synthetic targets, low-rank "
               "adaptation, inference and feature visualization"};
  app.require_subcommand(1);

  std::string mesh_path, poses_path, config_path, out_path, cache_path, features_path;
  std::string merged_out, mode = "dino";
  std::uint32_t component = 0;
  std::string scale = "desk";
  bool check_visibility = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint32_t> iters, batch;
  std::optional<std::size_t> pose_index;

  auto* preprocess = app.add_subcommand(
      "preprocess", "cache visibility, projections, alpha-shape interiors and k-NN tables");
  preprocess->add_option("--mesh", mesh_path, "OBJ mesh")->required();
  preprocess->add_option("--poses", poses_path, "camera rig JSON")->required();
  preprocess->add_option("--config", config_path, "config JSON")->required();
  preprocess->add_option("--out", out_path, "output cache file (PCCH)")->required();
  preprocess->add_flag("--check-visibility", check_visibility,
                       "debug: verify ray-cast visibility against the brute-force oracle");

  auto* synth = app.add_subcommand("synth", "generate deterministic synthetic feature planes");
  synth->add_option("--mesh", mesh_path)->required();
  synth->add_option("--poses", poses_path)->required();
  synth->add_option("--config", config_path)->required();
  synth->add_option("--cache", cache_path, "preprocess cache")->required();
  synth->add_option("--seed", seed, "generator seed (defaults to the config seed)");
  synth->add_option("--out", out_path, "output directory")->required();

  auto* adapt = app.add_subcommand("adapt", "run the adaptation loop");
  adapt->add_option("--mesh", mesh_path)->required();
  adapt->add_option("--poses", poses_path)->required();
  adapt->add_option("--config", config_path)->required();
  adapt->add_option("--cache", cache_path)->required();
  adapt->add_option("--features", features_path, "directory with synthetic feature planes")
      ->required();
  adapt->add_option("--iters", iters, "override config iterations");
  adapt->add_option("--batch", batch, "override config batch size");
  adapt->add_option("--seed", seed, "override config seed");
  adapt->add_option("--out", out_path, "output directory")->required();

  auto* infer = app.add_subcommand(
      "infer", "merged-adapter inference: the register module is skipped entirely");
  infer->add_option("--features", features_path, "source feature plane (FPLN)")->required();
  infer->add_option("--checkpoint", cache_path, "adapter checkpoint (LORA)")->required();
  infer->add_option("--config", config_path)->required();
  infer->add_option("--poses", poses_path, "camera rig JSON (validated only)");
  infer->add_option("--pose", pose_index, "pose index in the rig (validated only)");
  infer->add_option("--out", out_path, "output feature plane")->required();
  infer->add_option("--merged-out", merged_out, "also write the merged dense weights");

  auto* visualize = app.add_subcommand("visualize", "channel-wise PCA projection as a PPM image");
  visualize->add_option("--plane", features_path, "feature plane (FPLN)")->required();
  visualize->add_option("--component", component, "0-based PCA component")->required();
  visualize->add_option("--mode", mode, "dino (clip 3 sigma) or register (clip 1 sigma)")
      ->check(CLI::IsMember({"dino", "register"}));
  visualize->add_option("--out", out_path, "output PPM")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
  gradcheck->add_option("--scale", scale, "instance size (desk)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (preprocess->parsed()) {
      return meshreg::cmd_preprocess(mesh_path, poses_path, config_path, out_path,
                                     check_visibility);
    }
    if (synth->parsed()) {
      return meshreg::cmd_synth(mesh_path, poses_path, config_path, cache_path, seed, out_path);
    }
    if (adapt->parsed()) {
      return meshreg::cmd_adapt(mesh_path, poses_path, config_path, cache_path, features_path,
                                iters, batch, seed, out_path);
    }
    if (infer->parsed()) {
      if (!poses_path.empty()) {
        const meshreg::CameraRig rig = meshreg::load_camera_rig(poses_path);
        if (pose_index && *pose_index >= rig.poses.size()) {
          throw std::invalid_argument("infer: pose index out of range");
        }
      }
      return meshreg::cmd_infer(features_path, cache_path, config_path, out_path, merged_out);
    }
    if (visualize->parsed()) {
      return meshreg::cmd_visualize(features_path, component, mode, out_path);
    }
    if (gradcheck->parsed()) {
      return meshreg::cmd_gradcheck(scale);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
