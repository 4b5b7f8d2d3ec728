#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "meshreg/featuremap.hpp"

namespace meshreg {

/// Negative-side slope of the leaky rectifier used between encoder layers.
inline constexpr double kLeakySlope = 0.01;

struct ConvLayerSpec {
  std::uint32_t in_channels = 0;
  std::uint32_t out_channels = 0;
  std::uint32_t kernel = 3;  // 1 or 3; stride 1, zero same-padding
  bool activated = true;     // leaky rectifier after conv+bias

  std::uint32_t pad() const { return kernel / 2; }
  void validate() const;
};

/// One convolution layer with its weights. Weight layout is
/// [out][in][ky][kx] row-major; bias is per output channel.
struct ConvLayer {
  ConvLayerSpec spec;
  std::vector<double> weights;
  std::vector<double> bias;

  std::size_t weight_count() const { return weights.size(); }
};

ConvLayer make_conv_layer(const ConvLayerSpec& spec, std::uint64_t seed);

/// Saved tensors a backward pass needs.
struct ConvContext {
  FeaturePlane input;
  FeaturePlane pre_activation;
};

/// Same-padded cross-correlation + bias + (optional) leaky rectifier.
/// Spatial dimensions are preserved. Pass `ctx` to retain what backward
/// needs.
FeaturePlane conv2d_forward(const FeaturePlane& input, const ConvLayer& layer,
                            ConvContext* ctx = nullptr);

struct ConvGrads {
  std::vector<double> weights;
  std::vector<double> bias;
};

/// Exact reverse-mode gradients of conv2d_forward. Returns grad wrt the
/// input; weight/bias gradients are written (not accumulated) to `grads`.
FeaturePlane conv2d_backward(const FeaturePlane& grad_output, const ConvLayer& layer,
                             const ConvContext& ctx, ConvGrads& grads);

/// A stack of conv layers; the last layer is linear (no activation).
struct Encoder {
  std::vector<ConvLayer> layers;

  std::uint32_t in_channels() const { return layers.front().spec.in_channels; }
  std::uint32_t out_channels() const { return layers.back().spec.out_channels; }
};

/// First-stage encoder: channel sizes [D, D, D_out, D_out], all 3x3.
Encoder make_encoder_stage1(std::uint32_t d_in, std::uint32_t d_out, std::uint64_t seed);

/// Second-stage encoder: four layers of D_out channels, kernels [3,3,3,1].
Encoder make_encoder_stage2(std::uint32_t d_out, std::uint64_t seed);

FeaturePlane encoder_forward(const Encoder& enc, const FeaturePlane& input,
                             std::vector<ConvContext>* ctxs = nullptr);

/// Returns grad wrt the encoder input; per-layer grads in layer order.
FeaturePlane encoder_backward(const Encoder& enc, const FeaturePlane& grad_output,
                              const std::vector<ConvContext>& ctxs,
                              std::vector<ConvGrads>& grads);

/// All trainable state of the register: vertex embeddings plus the two
/// encoders. `accesses` counts forward passes through the register so the
/// inference path can prove it never touches these parameters.
struct RegisterParams {
  VertexEmbeddings emb;
  Encoder stage1;
  Encoder stage2;
  mutable std::uint64_t accesses = 0;
};

RegisterParams make_register_params(std::uint32_t vertex_count, std::uint32_t d,
                                    std::uint32_t d_out, std::uint64_t seed);

void save_register_params(const RegisterParams& params, const std::string& path);
RegisterParams load_register_params(const std::string& path);

struct RegisterForward {
  FeaturePlane f_proc1;
  FeaturePlane f_reg;
  std::vector<ConvContext> ctx_stage1;
  std::vector<ConvContext> ctx_stage2;
};

/// f_proc1 = stage1(f_s); f_reg = stage2(f_src + f_proc1).
RegisterForward register_forward(const FeaturePlane& f_src, const FeaturePlane& f_s,
                                 const RegisterParams& params, bool keep_context = false);

struct RegisterGrads {
  FeaturePlane f_s;    // gradient wrt the constructed dense feature
  FeaturePlane f_src;  // gradient wrt the source feature plane
  std::vector<ConvGrads> stage1;
  std::vector<ConvGrads> stage2;
};

RegisterGrads register_backward(const FeaturePlane& grad_freg, const RegisterParams& params,
                                const RegisterForward& fwd);

/// Mean over all H*W*C elements of the squared difference.
double loss_feat(const FeaturePlane& f_dri, const FeaturePlane& f_reg);

/// Value plus gradient wrt f_reg.
double loss_feat_grad(const FeaturePlane& f_dri, const FeaturePlane& f_reg,
                      FeaturePlane& grad_freg);

/// Sum of off-diagonal entries of the row-wise cosine similarity matrix.
/// Throws on a zero row, naming it.
double pcos(const Eigen::MatrixXd& rows);

/// d pcos / d rows.
Eigen::MatrixXd pcos_grad(const Eigen::MatrixXd& rows);

/// pcos(e) / (n(n-1)); e_b is not regularized. Requires n >= 2.
double loss_reg(const VertexEmbeddings& emb);
double loss_reg_grad(const VertexEmbeddings& emb, Eigen::MatrixXd& grad_e);

struct LossWeights {
  double lambda_feat = 2.0;
  double lambda_reg = 20.0;
};

double loss_register(double l_feat, double l_reg, const LossWeights& w);

/// Zero-mean normal with std sqrt(2 / (fan_in + fan_out)), deterministic
/// per seed.
std::vector<double> xavier_init(std::uint32_t fan_in, std::uint32_t fan_out, std::size_t count,
                                std::uint64_t seed);

}  // namespace meshreg
