#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "meshreg/featuremap.hpp"
#include "meshreg/geometry.hpp"
#include "meshreg/lora.hpp"
#include "meshreg/optim.hpp"
#include "meshreg/registers.hpp"
#include "meshreg/visibility.hpp"

namespace meshreg {

/// Run configuration. The defaults are the production values; tests use
/// smaller desk-scale overrides.
struct AdaptConfig {
  std::uint32_t height = 296;
  std::uint32_t width = 296;
  std::uint32_t d = 512;       // embedding dimension (f_s channels)
  std::uint32_t d_out = 256;   // dense feature channels
  std::uint32_t k = 11;        // IDW neighbor count
  double alpha = 0.065;        // alpha-shape parameter, 1/pixels
  std::uint32_t rank = 32;     // adapter rank
  double lambda_feat = 2.0;
  double lambda_reg = 20.0;
  double lr_lora = 1e-4;
  double lr_register = 1e-3;
  std::uint32_t iterations = 1000;
  std::uint32_t batch_size = 2;
  std::uint64_t seed = 0;
  double fov_deg = 30.0;

  void validate() const;
};

/// JSON config document; omitted fields keep their defaults, and an
/// empty file yields the full default configuration.
AdaptConfig load_config(const std::string& path);

/// 64-bit FNV-1a over mesh bytes, pose, intrinsics, alpha and k. A cache
/// record is only usable when this matches the current inputs.
std::uint64_t frame_fingerprint(const TriMesh& mesh, const CameraPose& pose,
                                const Intrinsics& intr, double alpha, std::uint32_t k);

/// One preprocessed pose: either a usable FrameGeometry or the reason it
/// was rejected (degenerate projection, camera inside the mesh, ...).
struct CacheFrame {
  bool valid = false;
  std::string error;
  FrameGeometry geometry;
};

struct PreprocessCache {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<CacheFrame> frames;

  std::size_t valid_count() const;
};

/// Visibility, projection, alpha-shape interior and k-NN tables for every
/// pose. Per-pose failures land in the frame record; throws only when
/// every pose fails (or there are none).
PreprocessCache preprocess_frames(const TriMesh& mesh, const CameraRig& rig,
                                  const AdaptConfig& config);

void save_cache(const PreprocessCache& cache, const std::string& path);
PreprocessCache load_cache(const std::string& path);

/// Per-channel parameters of the synthetic feature generator: channel c
/// holds sin(omega * <normal, x> + phase) of the surface point x behind
/// each pixel, and a constant on background pixels.
struct SynthChannel {
  double omega = 0;
  Vec3 normal = Vec3::UnitZ();
  double phase = 0;
  double background = 0;
};

std::vector<SynthChannel> make_synth_channels(std::uint32_t d_out, std::uint64_t seed);

/// Deterministic pose-consistent target plane for one frame. Occupied
/// pixels evaluate at their vertex position; interior pixels at the
/// IDW-blended neighbor position; background pixels take the channel
/// constant.
FeaturePlane synth_feature_plane(const TriMesh& mesh, const FrameGeometry& frame,
                                 const Intrinsics& intr,
                                 const std::vector<SynthChannel>& channels);

/// Frozen weight of the 1x1 adapter head (d_out x d_out), deterministic
/// in the seed.
Eigen::MatrixXd make_head_weight(std::uint32_t d_out, std::uint64_t seed);

/// Applies the factored adapter to every pixel vector of the plane.
FeaturePlane head_forward(const FeaturePlane& input, const LoraLayer<double>& head);
FeaturePlane head_forward_merged(const FeaturePlane& input, const LoraLayer<double>& head);

/// Gradient wrt the head input; factor gradients accumulate into
/// grad_A / grad_B.
FeaturePlane head_backward(const FeaturePlane& grad_output, const FeaturePlane& input,
                           const LoraLayer<double>& head, Eigen::MatrixXd& grad_A,
                           Eigen::MatrixXd& grad_B);

struct MetricsRow {
  std::uint32_t iter = 0;
  double lr_factor = 0;
  double l_feat = 0;
  double l_reg = 0;
  double l_register = 0;
};

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path);

struct AdaptArtifacts {
  RegisterParams params;
  LoraLayer<double> head;
  std::vector<MetricsRow> metrics;
  Eigen::MatrixXd frozen_head_weight;  // pre-training copy, for audits
};

/// The adaptation loop: pose 0 is the source frame; every iteration
/// samples batch_size driving poses, assembles f_s from the cache, runs
/// the register forward and the adapter head, and Adam-steps the register
/// and adapter groups under a shared linear schedule.
AdaptArtifacts run_adaptation(const TriMesh& mesh, const CameraRig& rig,
                              const PreprocessCache& cache,
                              const std::vector<FeaturePlane>& features,
                              const AdaptConfig& config);

/// Flat spans over the register parameter tensors, in checkpoint order.
std::vector<ParamSpan> register_param_spans(RegisterParams& params);

struct InferResult {
  FeaturePlane output;
  std::size_t parameter_count = 0;  // equals m*n of the unadapted head
};

/// Inference-time path: merge the adapter factors into the frozen head
/// and push the source features straight through it. The register module
/// is never consulted.
InferResult infer_merged(const FeaturePlane& f_src, LoraLayer<double> head);

enum class VisualizeMode { Dino, Register };

struct Visualization {
  std::uint32_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;        // 3 bytes per pixel, row-major
  std::vector<double> standardized;     // pre-clip standardized projection
  double clip = 3.0;
};

/// Channel-wise PCA over the pixels, projection onto `component`
/// (0-based), standardization to zero mean / unit variance, clipping at
/// +-3 (Dino mode) or +-1 (Register mode), blue-white-red colormap.
Visualization visualize_pca(const FeaturePlane& plane, std::uint32_t component,
                            VisualizeMode mode);

void write_ppm(const Visualization& vis, const std::string& path);

// ---------------------------------------------------------------------
// File-level commands backing the CLI.

int cmd_preprocess(const std::string& mesh_path, const std::string& poses_path,
                   const std::string& config_path, const std::string& out_path,
                   bool check_visibility);

int cmd_synth(const std::string& mesh_path, const std::string& poses_path,
              const std::string& config_path, const std::string& cache_path,
              std::optional<std::uint64_t> seed, const std::string& out_dir);

int cmd_adapt(const std::string& mesh_path, const std::string& poses_path,
              const std::string& config_path, const std::string& cache_path,
              const std::string& features_dir, std::optional<std::uint32_t> iterations,
              std::optional<std::uint32_t> batch_size, std::optional<std::uint64_t> seed,
              const std::string& out_dir);

int cmd_infer(const std::string& features_path, const std::string& checkpoint_path,
              const std::string& config_path, const std::string& out_path,
              const std::string& merged_out_path);

int cmd_visualize(const std::string& plane_path, std::uint32_t component,
                  const std::string& mode, const std::string& out_path);

int cmd_gradcheck(const std::string& scale);

/// Desk-scale end-to-end gradient check: central finite differences of
/// the full training loss against the analytic gradients for every
/// trainable tensor (embeddings, background, both encoders, adapter
/// factors).
GradCheckReport register_pipeline_gradcheck(double h = 1e-6, double tolerance = 1e-4);

/// Synthetic feature file name inside a synth output directory.
std::string feature_file_name(std::size_t pose_index);

}  // namespace meshreg
