#include "meshreg/registers.hpp"

#include <cmath>
#include <stdexcept>

#include "meshreg/binio.hpp"
#include "meshreg/parallel.hpp"
#include "meshreg/rng.hpp"

namespace meshreg {

void ConvLayerSpec::validate() const {
  if (kernel != 1 && kernel != 3) {
    throw std::invalid_argument("ConvLayerSpec: kernel must be 1 or 3, got " +
                                std::to_string(kernel));
  }
  if (in_channels == 0 || out_channels == 0) {
    throw std::invalid_argument("ConvLayerSpec: channel counts must be positive");
  }
}

ConvLayer make_conv_layer(const ConvLayerSpec& spec, std::uint64_t seed) {
  spec.validate();
  ConvLayer layer;
  layer.spec = spec;
  const std::uint32_t taps = spec.kernel * spec.kernel;
  layer.weights = xavier_init(spec.in_channels * taps, spec.out_channels * taps,
                              static_cast<std::size_t>(spec.out_channels) * spec.in_channels * taps,
                              seed);
  layer.bias.assign(spec.out_channels, 0.0);
  return layer;
}

namespace {

double activate(double z, bool activated) {
  if (!activated) return z;
  return z >= 0 ? z : kLeakySlope * z;
}

double activate_grad(double z, bool activated) {
  if (!activated) return 1.0;
  return z >= 0 ? 1.0 : kLeakySlope;
}

}  // namespace

FeaturePlane conv2d_forward(const FeaturePlane& input, const ConvLayer& layer, ConvContext* ctx) {
  const ConvLayerSpec& spec = layer.spec;
  if (input.channels() != spec.in_channels) {
    throw std::invalid_argument("conv2d_forward: input has " + std::to_string(input.channels()) +
                                " channels, layer expects " + std::to_string(spec.in_channels));
  }
  const std::uint32_t h = input.height(), w = input.width();
  const std::uint32_t in_c = spec.in_channels, out_c = spec.out_channels, k = spec.kernel;
  const std::int32_t pad = static_cast<std::int32_t>(spec.pad());

  // weights transposed to [ky][kx][i][o] so the inner loop is contiguous
  std::vector<double> wt(static_cast<std::size_t>(k) * k * in_c * out_c);
  for (std::uint32_t o = 0; o < out_c; ++o) {
    for (std::uint32_t i = 0; i < in_c; ++i) {
      for (std::uint32_t ky = 0; ky < k; ++ky) {
        for (std::uint32_t kx = 0; kx < k; ++kx) {
          wt[((static_cast<std::size_t>(ky) * k + kx) * in_c + i) * out_c + o] =
              layer.weights[((static_cast<std::size_t>(o) * in_c + i) * k + ky) * k + kx];
        }
      }
    }
  }

  FeaturePlane pre(h, w, out_c);
  parallel_for(h, [&](std::size_t row) {
    const std::int32_t r = static_cast<std::int32_t>(row);
    std::vector<double> acc(out_c);
    for (std::int32_t c = 0; c < static_cast<std::int32_t>(w); ++c) {
      for (std::uint32_t o = 0; o < out_c; ++o) acc[o] = layer.bias[o];
      for (std::uint32_t ky = 0; ky < k; ++ky) {
        const std::int32_t rr = r + static_cast<std::int32_t>(ky) - pad;
        if (rr < 0 || rr >= static_cast<std::int32_t>(h)) continue;
        for (std::uint32_t kx = 0; kx < k; ++kx) {
          const std::int32_t cc = c + static_cast<std::int32_t>(kx) - pad;
          if (cc < 0 || cc >= static_cast<std::int32_t>(w)) continue;
          const double* in_px = input.pixel(rr, cc);
          const double* w_base = wt.data() + (static_cast<std::size_t>(ky) * k + kx) * in_c * out_c;
          for (std::uint32_t i = 0; i < in_c; ++i) {
            const double v = in_px[i];
            const double* w_row = w_base + static_cast<std::size_t>(i) * out_c;
            for (std::uint32_t o = 0; o < out_c; ++o) acc[o] += v * w_row[o];
          }
        }
      }
      double* dst = pre.pixel(r, c);
      for (std::uint32_t o = 0; o < out_c; ++o) dst[o] = acc[o];
    }
  });

  FeaturePlane out = pre;
  if (spec.activated) {
    for (double& v : out.data()) v = activate(v, true);
  }
  if (ctx) {
    ctx->input = input;
    ctx->pre_activation = std::move(pre);
  }
  return out;
}

FeaturePlane conv2d_backward(const FeaturePlane& grad_output, const ConvLayer& layer,
                             const ConvContext& ctx, ConvGrads& grads) {
  const ConvLayerSpec& spec = layer.spec;
  const FeaturePlane& input = ctx.input;
  if (!grad_output.same_shape(ctx.pre_activation)) {
    throw std::invalid_argument("conv2d_backward: gradient shape does not match the forward call");
  }
  const std::uint32_t h = input.height(), w = input.width();
  const std::uint32_t in_c = spec.in_channels, out_c = spec.out_channels, k = spec.kernel;
  const std::int32_t pad = static_cast<std::int32_t>(spec.pad());

  // gradient at the pre-activation
  FeaturePlane gz = grad_output;
  if (spec.activated) {
    const std::vector<double>& z = ctx.pre_activation.data();
    std::vector<double>& g = gz.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= activate_grad(z[i], true);
  }

  grads.bias.assign(out_c, 0.0);
  for (std::uint32_t r = 0; r < h; ++r) {
    for (std::uint32_t c = 0; c < w; ++c) {
      const double* g = gz.pixel(static_cast<std::int32_t>(r), static_cast<std::int32_t>(c));
      for (std::uint32_t o = 0; o < out_c; ++o) grads.bias[o] += g[o];
    }
  }

  // weight gradient accumulated in [ky][kx][o][i] then transposed back
  std::vector<double> gw(static_cast<std::size_t>(k) * k * out_c * in_c, 0.0);
  for (std::int32_t r = 0; r < static_cast<std::int32_t>(h); ++r) {
    for (std::int32_t c = 0; c < static_cast<std::int32_t>(w); ++c) {
      const double* g = gz.pixel(r, c);
      for (std::uint32_t ky = 0; ky < k; ++ky) {
        const std::int32_t rr = r + static_cast<std::int32_t>(ky) - pad;
        if (rr < 0 || rr >= static_cast<std::int32_t>(h)) continue;
        for (std::uint32_t kx = 0; kx < k; ++kx) {
          const std::int32_t cc = c + static_cast<std::int32_t>(kx) - pad;
          if (cc < 0 || cc >= static_cast<std::int32_t>(w)) continue;
          const double* in_px = input.pixel(rr, cc);
          double* gw_base = gw.data() + (static_cast<std::size_t>(ky) * k + kx) * out_c * in_c;
          for (std::uint32_t o = 0; o < out_c; ++o) {
            const double go = g[o];
            double* gw_row = gw_base + static_cast<std::size_t>(o) * in_c;
            for (std::uint32_t i = 0; i < in_c; ++i) gw_row[i] += go * in_px[i];
          }
        }
      }
    }
  }
  grads.weights.assign(layer.weights.size(), 0.0);
  for (std::uint32_t o = 0; o < out_c; ++o) {
    for (std::uint32_t i = 0; i < in_c; ++i) {
      for (std::uint32_t ky = 0; ky < k; ++ky) {
        for (std::uint32_t kx = 0; kx < k; ++kx) {
          grads.weights[((static_cast<std::size_t>(o) * in_c + i) * k + ky) * k + kx] =
              gw[((static_cast<std::size_t>(ky) * k + kx) * out_c + o) * in_c + i];
        }
      }
    }
  }

  // input gradient; weights transposed to [ky][kx][o][i] for contiguous i
  std::vector<double> wt(static_cast<std::size_t>(k) * k * out_c * in_c);
  for (std::uint32_t o = 0; o < out_c; ++o) {
    for (std::uint32_t i = 0; i < in_c; ++i) {
      for (std::uint32_t ky = 0; ky < k; ++ky) {
        for (std::uint32_t kx = 0; kx < k; ++kx) {
          wt[((static_cast<std::size_t>(ky) * k + kx) * out_c + o) * in_c + i] =
              layer.weights[((static_cast<std::size_t>(o) * in_c + i) * k + ky) * k + kx];
        }
      }
    }
  }
  FeaturePlane grad_in(h, w, in_c);
  parallel_for(h, [&](std::size_t row) {
    const std::int32_t ri = static_cast<std::int32_t>(row);
    for (std::int32_t ci = 0; ci < static_cast<std::int32_t>(w); ++ci) {
      double* dst = grad_in.pixel(ri, ci);
      for (std::uint32_t ky = 0; ky < k; ++ky) {
        const std::int32_t r = ri - static_cast<std::int32_t>(ky) + pad;
        if (r < 0 || r >= static_cast<std::int32_t>(h)) continue;
        for (std::uint32_t kx = 0; kx < k; ++kx) {
          const std::int32_t c = ci - static_cast<std::int32_t>(kx) + pad;
          if (c < 0 || c >= static_cast<std::int32_t>(w)) continue;
          const double* g = gz.pixel(r, c);
          const double* w_base = wt.data() + (static_cast<std::size_t>(ky) * k + kx) * out_c * in_c;
          for (std::uint32_t o = 0; o < out_c; ++o) {
            const double go = g[o];
            const double* w_row = w_base + static_cast<std::size_t>(o) * in_c;
            for (std::uint32_t i = 0; i < in_c; ++i) dst[i] += go * w_row[i];
          }
        }
      }
    }
  });
  return grad_in;
}

Encoder make_encoder_stage1(std::uint32_t d_in, std::uint32_t d_out, std::uint64_t seed) {
  Encoder enc;
  const std::uint32_t channels[4] = {d_in, d_in, d_out, d_out};
  std::uint32_t in_c = d_in;
  for (int l = 0; l < 4; ++l) {
    ConvLayerSpec spec;
    spec.in_channels = in_c;
    spec.out_channels = channels[l];
    spec.kernel = 3;
    spec.activated = l != 3;
    enc.layers.push_back(make_conv_layer(spec, derive_seed(seed, "stage1/" + std::to_string(l))));
    in_c = channels[l];
  }
  return enc;
}

Encoder make_encoder_stage2(std::uint32_t d_out, std::uint64_t seed) {
  Encoder enc;
  for (int l = 0; l < 4; ++l) {
    ConvLayerSpec spec;
    spec.in_channels = d_out;
    spec.out_channels = d_out;
    spec.kernel = l == 3 ? 1 : 3;
    spec.activated = l != 3;
    enc.layers.push_back(make_conv_layer(spec, derive_seed(seed, "stage2/" + std::to_string(l))));
  }
  return enc;
}

FeaturePlane encoder_forward(const Encoder& enc, const FeaturePlane& input,
                             std::vector<ConvContext>* ctxs) {
  if (ctxs) {
    ctxs->clear();
    ctxs->resize(enc.layers.size());
  }
  FeaturePlane x = input;
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    x = conv2d_forward(x, enc.layers[l], ctxs ? &(*ctxs)[l] : nullptr);
  }
  return x;
}

FeaturePlane encoder_backward(const Encoder& enc, const FeaturePlane& grad_output,
                              const std::vector<ConvContext>& ctxs,
                              std::vector<ConvGrads>& grads) {
  if (ctxs.size() != enc.layers.size()) {
    throw std::invalid_argument("encoder_backward: missing forward contexts");
  }
  grads.assign(enc.layers.size(), {});
  FeaturePlane g = grad_output;
  for (std::size_t l = enc.layers.size(); l-- > 0;) {
    g = conv2d_backward(g, enc.layers[l], ctxs[l], grads[l]);
  }
  return g;
}

RegisterParams make_register_params(std::uint32_t vertex_count, std::uint32_t d,
                                    std::uint32_t d_out, std::uint64_t seed) {
  RegisterParams params;
  // Xavier fans for an [n, D] matrix: fan_in = D (columns), fan_out = n.
  const std::vector<double> e_init =
      xavier_init(d, vertex_count, static_cast<std::size_t>(vertex_count) * d,
                  derive_seed(seed, "embeddings"));
  params.emb.e.resize(vertex_count, d);
  std::size_t idx = 0;
  for (std::uint32_t r = 0; r < vertex_count; ++r) {
    for (std::uint32_t c = 0; c < d; ++c) params.emb.e(r, c) = e_init[idx++];
  }
  const std::vector<double> eb_init =
      xavier_init(d, 1, d, derive_seed(seed, "background"));
  params.emb.e_b.resize(d);
  for (std::uint32_t c = 0; c < d; ++c) params.emb.e_b(c) = eb_init[c];

  params.stage1 = make_encoder_stage1(d, d_out, seed);
  params.stage2 = make_encoder_stage2(d_out, seed);
  return params;
}

RegisterForward register_forward(const FeaturePlane& f_src, const FeaturePlane& f_s,
                                 const RegisterParams& params, bool keep_context) {
  if (f_s.channels() != params.stage1.in_channels()) {
    throw std::invalid_argument("register_forward: f_s channel mismatch");
  }
  if (f_src.channels() != params.stage2.in_channels()) {
    throw std::invalid_argument("register_forward: f_src channel mismatch");
  }
  ++params.accesses;

  RegisterForward fwd;
  fwd.f_proc1 = encoder_forward(params.stage1, f_s, keep_context ? &fwd.ctx_stage1 : nullptr);

  FeaturePlane sum = fwd.f_proc1;
  if (!sum.same_shape(f_src)) {
    throw std::invalid_argument("register_forward: f_src spatial shape mismatch");
  }
  for (std::size_t i = 0; i < sum.size(); ++i) sum.data()[i] += f_src.data()[i];

  fwd.f_reg = encoder_forward(params.stage2, sum, keep_context ? &fwd.ctx_stage2 : nullptr);
  return fwd;
}

RegisterGrads register_backward(const FeaturePlane& grad_freg, const RegisterParams& params,
                                const RegisterForward& fwd) {
  RegisterGrads grads;
  const FeaturePlane grad_sum =
      encoder_backward(params.stage2, grad_freg, fwd.ctx_stage2, grads.stage2);
  grads.f_src = grad_sum;  // the sum node routes the gradient unchanged
  grads.f_s = encoder_backward(params.stage1, grad_sum, fwd.ctx_stage1, grads.stage1);
  return grads;
}

double loss_feat(const FeaturePlane& f_dri, const FeaturePlane& f_reg) {
  if (!f_dri.same_shape(f_reg)) {
    throw std::invalid_argument("loss_feat: plane shapes differ");
  }
  double acc = 0;
  for (std::size_t i = 0; i < f_dri.size(); ++i) {
    const double d = f_dri.data()[i] - f_reg.data()[i];
    acc += d * d;
  }
  return acc / static_cast<double>(f_dri.size());
}

double loss_feat_grad(const FeaturePlane& f_dri, const FeaturePlane& f_reg,
                      FeaturePlane& grad_freg) {
  if (!f_dri.same_shape(f_reg)) {
    throw std::invalid_argument("loss_feat: plane shapes differ");
  }
  grad_freg = FeaturePlane(f_reg.height(), f_reg.width(), f_reg.channels());
  const double inv_n = 1.0 / static_cast<double>(f_dri.size());
  double acc = 0;
  for (std::size_t i = 0; i < f_dri.size(); ++i) {
    const double d = f_reg.data()[i] - f_dri.data()[i];
    acc += d * d;
    grad_freg.data()[i] = 2.0 * d * inv_n;
  }
  return acc * inv_n;
}

namespace {

Eigen::MatrixXd normalized_rows(const Eigen::MatrixXd& rows) {
  Eigen::MatrixXd u = rows;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    const double norm = rows.row(i).norm();
    if (norm == 0.0) {
      throw std::invalid_argument("pcos: row " + std::to_string(i) + " is zero");
    }
    u.row(i) /= norm;
  }
  return u;
}

}  // namespace

double pcos(const Eigen::MatrixXd& rows) {
  const Eigen::MatrixXd u = normalized_rows(rows);
  const Eigen::VectorXd s = u.colwise().sum();
  return s.squaredNorm() - static_cast<double>(rows.rows());
}

Eigen::MatrixXd pcos_grad(const Eigen::MatrixXd& rows) {
  const Eigen::MatrixXd u = normalized_rows(rows);
  const Eigen::VectorXd s = u.colwise().sum();
  Eigen::MatrixXd grad(rows.rows(), rows.cols());
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    const double norm = rows.row(i).norm();
    const Eigen::VectorXd ui = u.row(i).transpose();
    grad.row(i) = (2.0 / norm) * (s - ui.dot(s) * ui).transpose();
  }
  return grad;
}

double loss_reg(const VertexEmbeddings& emb) {
  const Eigen::Index n = emb.e.rows();
  if (n < 2) throw std::invalid_argument("loss_reg: need at least 2 embedding rows");
  return pcos(emb.e) / (static_cast<double>(n) * (static_cast<double>(n) - 1.0));
}

double loss_reg_grad(const VertexEmbeddings& emb, Eigen::MatrixXd& grad_e) {
  const Eigen::Index n = emb.e.rows();
  if (n < 2) throw std::invalid_argument("loss_reg: need at least 2 embedding rows");
  const double denom = static_cast<double>(n) * (static_cast<double>(n) - 1.0);
  grad_e = pcos_grad(emb.e) / denom;
  return pcos(emb.e) / denom;
}

double loss_register(double l_feat, double l_reg, const LossWeights& w) {
  return w.lambda_feat * l_feat + w.lambda_reg * l_reg;
}

std::vector<double> xavier_init(std::uint32_t fan_in, std::uint32_t fan_out, std::size_t count,
                                std::uint64_t seed) {
  if (fan_in == 0 || fan_out == 0) {
    throw std::invalid_argument("xavier_init: fans must be positive");
  }
  const double stddev = std::sqrt(2.0 / (static_cast<double>(fan_in) + static_cast<double>(fan_out)));
  Rng rng(seed);
  std::vector<double> values(count);
  for (double& v : values) v = rng.normal(0.0, stddev);
  return values;
}

namespace {

void save_conv_layer(std::ostream& os, const ConvLayer& layer) {
  binio::write_u32(os, layer.spec.out_channels);
  binio::write_u32(os, layer.spec.in_channels);
  binio::write_u32(os, layer.spec.kernel);
  binio::write_f32_array(os, layer.weights.data(), layer.weights.size());
  binio::write_f32_array(os, layer.bias.data(), layer.bias.size());
}

ConvLayer load_conv_layer(std::istream& is, bool activated) {
  ConvLayer layer;
  layer.spec.out_channels = binio::read_u32(is);
  layer.spec.in_channels = binio::read_u32(is);
  layer.spec.kernel = binio::read_u32(is);
  layer.spec.activated = activated;
  layer.spec.validate();
  const std::size_t taps = static_cast<std::size_t>(layer.spec.kernel) * layer.spec.kernel;
  layer.weights.resize(static_cast<std::size_t>(layer.spec.out_channels) *
                       layer.spec.in_channels * taps);
  layer.bias.resize(layer.spec.out_channels);
  binio::read_f32_array(is, layer.weights.data(), layer.weights.size());
  binio::read_f32_array(is, layer.bias.data(), layer.bias.size());
  return layer;
}

}  // namespace

void save_register_params(const RegisterParams& params, const std::string& path) {
  auto os = binio::open_out(path);
  binio::write_magic(os, "RGPM");
  binio::write_u32(os, 1);
  save_vemb(params.emb, os);
  binio::write_u32(os, static_cast<std::uint32_t>(params.stage1.layers.size()));
  binio::write_u32(os, static_cast<std::uint32_t>(params.stage2.layers.size()));
  for (const ConvLayer& layer : params.stage1.layers) save_conv_layer(os, layer);
  for (const ConvLayer& layer : params.stage2.layers) save_conv_layer(os, layer);
  if (!os) throw std::runtime_error("failed writing RGPM: " + path);
}

RegisterParams load_register_params(const std::string& path) {
  auto is = binio::open_in(path);
  binio::expect_magic(is, "RGPM", path);
  binio::expect_version(is, 1, path);
  RegisterParams params;
  params.emb = load_vemb(is);
  const std::uint32_t n1 = binio::read_u32(is);
  const std::uint32_t n2 = binio::read_u32(is);
  for (std::uint32_t l = 0; l < n1; ++l) {
    params.stage1.layers.push_back(load_conv_layer(is, l + 1 != n1));
  }
  for (std::uint32_t l = 0; l < n2; ++l) {
    params.stage2.layers.push_back(load_conv_layer(is, l + 1 != n2));
  }
  return params;
}

}  // namespace meshreg
