#include "meshreg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "meshreg/alphashape.hpp"
#include "meshreg/binio.hpp"
#include "meshreg/rng.hpp"

namespace meshreg {

void AdaptConfig::validate() const {
  if (height < 2 || width < 2) throw std::invalid_argument("config: grid must be at least 2x2");
  if (d == 0 || d_out == 0) throw std::invalid_argument("config: d and d_out must be positive");
  if (k == 0) throw std::invalid_argument("config: k must be positive");
  if (alpha < 0) throw std::invalid_argument("config: alpha must be non-negative");
  if (rank == 0) throw std::invalid_argument("config: rank must be positive");
  if (lambda_feat < 0 || lambda_reg < 0) {
    throw std::invalid_argument("config: loss weights must be non-negative");
  }
  if (batch_size == 0) throw std::invalid_argument("config: batch_size must be positive");
  if (!(fov_deg > 0) || !(fov_deg < 180)) {
    throw std::invalid_argument("config: fov_deg must lie in (0, 180)");
  }
}

AdaptConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream buffer;
  buffer << is.rdbuf();
  const std::string text = buffer.str();

  AdaptConfig cfg;
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
    return cfg;  // empty document: all defaults
  }
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("config " + path + ": " + e.what());
  }

  const auto get = [&doc](const char* key, auto& field) {
    if (doc.contains(key)) field = doc.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("height", cfg.height);
  get("width", cfg.width);
  get("d", cfg.d);
  get("d_out", cfg.d_out);
  get("k", cfg.k);
  get("alpha", cfg.alpha);
  get("rank", cfg.rank);
  get("lambda_feat", cfg.lambda_feat);
  get("lambda_reg", cfg.lambda_reg);
  get("lr_lora", cfg.lr_lora);
  get("lr_register", cfg.lr_register);
  get("iterations", cfg.iterations);
  get("batch_size", cfg.batch_size);
  get("seed", cfg.seed);
  get("fov_deg", cfg.fov_deg);

  for (const auto& [key, value] : doc.items()) {
    static const std::set<std::string> known = {
        "height", "width", "d", "d_out", "k", "alpha", "rank", "lambda_feat", "lambda_reg",
        "lr_lora", "lr_register", "iterations", "batch_size", "seed", "fov_deg"};
    if (!known.count(key)) {
      throw std::runtime_error("config " + path + ": unknown key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

namespace {

class Fnv1a64 {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 1099511628211ULL;
    }
  }
  void f64(double v) { bytes(&v, sizeof(v)); }
  void u32(std::uint32_t v) { bytes(&v, sizeof(v)); }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 1469598103934665603ULL;
};

}  // namespace

std::uint64_t frame_fingerprint(const TriMesh& mesh, const CameraPose& pose,
                                const Intrinsics& intr, double alpha, std::uint32_t k) {
  Fnv1a64 h;
  h.u32(static_cast<std::uint32_t>(mesh.vertices.size()));
  for (const Vec3& v : mesh.vertices) {
    h.f64(v.x());
    h.f64(v.y());
    h.f64(v.z());
  }
  h.u32(static_cast<std::uint32_t>(mesh.faces.size()));
  for (const auto& f : mesh.faces) {
    h.u32(f[0]);
    h.u32(f[1]);
    h.u32(f[2]);
  }
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) h.f64(pose.rotation(r, c));
  }
  for (int i = 0; i < 3; ++i) h.f64(pose.translation(i));
  h.f64(intr.focal_x);
  h.f64(intr.focal_y);
  h.f64(intr.principal_x);
  h.f64(intr.principal_y);
  h.u32(intr.width);
  h.u32(intr.height);
  h.f64(alpha);
  h.u32(k);
  return h.value();
}

std::size_t PreprocessCache::valid_count() const {
  std::size_t n = 0;
  for (const CacheFrame& f : frames) n += f.valid ? 1 : 0;
  return n;
}

namespace {

/// Parity test along a fixed skew direction; odd crossing count means the
/// origin is enclosed by the surface.
bool point_inside_mesh(const TriMesh& mesh, const Vec3& point) {
  const Vec3 dir = Vec3(0.577350269189626, 0.711248624267394, 0.401237651217882).normalized();
  std::size_t crossings = 0;
  for (const auto& f : mesh.faces) {
    if (ray_triangle(point, dir, mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]])) {
      ++crossings;
    }
  }
  return crossings % 2 == 1;
}

CacheFrame preprocess_one(const TriMesh& mesh, const CameraPose& pose, const Intrinsics& intr,
                          const AdaptConfig& config, const Bvh& bvh) {
  CacheFrame frame;
  frame.geometry.fingerprint = frame_fingerprint(mesh, pose, intr, config.alpha, config.k);

  const Vec3 origin = pose.origin_world();
  if (point_inside_mesh(mesh, origin)) {
    frame.error = "camera origin lies inside the mesh";
    return frame;
  }

  frame.geometry.visible = visible_vertices(mesh, pose, bvh);

  std::vector<Vec3> positions;
  positions.reserve(frame.geometry.visible.size());
  for (std::uint32_t v : frame.geometry.visible) positions.push_back(mesh.vertices[v]);
  const auto projected = perspective_project(positions, pose, intr);

  frame.geometry.pixels.resize(projected.size());
  frame.geometry.depths.assign(projected.size(), 0.0);
  for (std::size_t i = 0; i < projected.size(); ++i) {
    if (!projected[i]) {
      frame.geometry.pixels[i] = std::nullopt;
      continue;
    }
    frame.geometry.pixels[i] = round_to_grid(projected[i]->xy, intr);
    frame.geometry.depths[i] = projected[i]->depth;
  }

  frame.geometry.occupied =
      depth_test_winners(frame.geometry.pixels, frame.geometry.depths, frame.geometry.visible);
  const std::size_t n_sites = frame.geometry.occupied.size();
  if (n_sites < 3) {
    frame.error = "degenerate projection: only " + std::to_string(n_sites) +
                  " distinct projected pixels (need at least 3)";
    return frame;
  }
  if (n_sites < config.k) {
    frame.error = "degenerate projection: " + std::to_string(n_sites) +
                  " projected pixels but k = " + std::to_string(config.k);
    return frame;
  }

  std::vector<Vec2> site_coords;
  site_coords.reserve(n_sites);
  for (const PixelCoord& pc : frame.geometry.occupied.pixels) {
    site_coords.emplace_back(static_cast<double>(pc.col), static_cast<double>(pc.row));
  }

  AlphaShapeInfo info;
  AlphaPolygon poly;
  try {
    poly = alpha_shape(site_coords, config.alpha, &info);
  } catch (const std::exception& e) {
    frame.error = e.what();
    return frame;
  }
  if (info.component_count > 1) {
    std::cerr << "preprocess: warning: alpha shape split into " << info.component_count
              << " components; keeping the largest (check the pose)\n";
  }

  frame.geometry.interior = interior_points(poly, intr, frame.geometry.occupied.pixels);

  std::vector<Vec2> queries;
  queries.reserve(frame.geometry.interior.size());
  for (const PixelCoord& pc : frame.geometry.interior) {
    queries.emplace_back(static_cast<double>(pc.col), static_cast<double>(pc.row));
  }
  try {
    frame.geometry.knn = knn_projected(site_coords, queries, config.k);
  } catch (const std::exception& e) {
    frame.error = e.what();
    return frame;
  }

  frame.valid = true;
  return frame;
}

}  // namespace

PreprocessCache preprocess_frames(const TriMesh& mesh, const CameraRig& rig,
                                  const AdaptConfig& config) {
  config.validate();
  mesh.validate();
  if (rig.poses.empty()) throw std::invalid_argument("preprocess: no poses");

  const Bvh bvh = build_bvh(mesh);
  PreprocessCache cache;
  cache.height = rig.intrinsics.height;
  cache.width = rig.intrinsics.width;
  cache.frames.resize(rig.poses.size());
  for (std::size_t i = 0; i < rig.poses.size(); ++i) {
    cache.frames[i] = preprocess_one(mesh, rig.poses[i], rig.intrinsics, config, bvh);
  }
  if (cache.valid_count() == 0) {
    std::string msg = "preprocess: every pose failed:";
    for (std::size_t i = 0; i < cache.frames.size(); ++i) {
      msg += "\n  pose " + std::to_string(i) + ": " + cache.frames[i].error;
    }
    throw std::runtime_error(msg);
  }
  return cache;
}

void save_cache(const PreprocessCache& cache, const std::string& path) {
  auto os = binio::open_out(path);
  binio::write_magic(os, "PCCH");
  binio::write_u32(os, 1);
  binio::write_u32(os, cache.height);
  binio::write_u32(os, cache.width);
  binio::write_u32(os, static_cast<std::uint32_t>(cache.frames.size()));
  for (const CacheFrame& frame : cache.frames) {
    binio::write_u32(os, frame.valid ? 1 : 0);
    binio::write_u64(os, frame.geometry.fingerprint);
    if (!frame.valid) {
      binio::write_u32(os, static_cast<std::uint32_t>(frame.error.size()));
      os.write(frame.error.data(), static_cast<std::streamsize>(frame.error.size()));
      continue;
    }
    const FrameGeometry& g = frame.geometry;
    binio::write_u32(os, static_cast<std::uint32_t>(g.visible.size()));
    for (std::uint32_t v : g.visible) binio::write_u32(os, v);
    for (std::size_t i = 0; i < g.visible.size(); ++i) {
      binio::write_i32(os, g.pixels[i] ? g.pixels[i]->row : -1);
      binio::write_i32(os, g.pixels[i] ? g.pixels[i]->col : -1);
      binio::write_f64(os, g.depths[i]);
    }
    binio::write_u32(os, static_cast<std::uint32_t>(g.occupied.size()));
    for (std::size_t i = 0; i < g.occupied.size(); ++i) {
      binio::write_i32(os, g.occupied.pixels[i].row);
      binio::write_i32(os, g.occupied.pixels[i].col);
      binio::write_u32(os, g.occupied.vertices[i]);
    }
    binio::write_u32(os, static_cast<std::uint32_t>(g.interior.size()));
    for (const PixelCoord& pc : g.interior) {
      binio::write_i32(os, pc.row);
      binio::write_i32(os, pc.col);
    }
    binio::write_u32(os, g.knn.k);
    for (std::size_t i = 0; i < g.knn.indices.size(); ++i) {
      binio::write_u32(os, g.knn.indices[i]);
      binio::write_f64(os, g.knn.distances[i]);
    }
  }
  if (!os) throw std::runtime_error("failed writing cache: " + path);
}

PreprocessCache load_cache(const std::string& path) {
  auto is = binio::open_in(path);
  binio::expect_magic(is, "PCCH", path);
  binio::expect_version(is, 1, path);
  PreprocessCache cache;
  cache.height = binio::read_u32(is);
  cache.width = binio::read_u32(is);
  const std::uint32_t n_frames = binio::read_u32(is);
  cache.frames.resize(n_frames);
  for (std::uint32_t fi = 0; fi < n_frames; ++fi) {
    CacheFrame& frame = cache.frames[fi];
    frame.valid = binio::read_u32(is) == 1;
    frame.geometry.fingerprint = binio::read_u64(is);
    if (!frame.valid) {
      const std::uint32_t len = binio::read_u32(is);
      frame.error.resize(len);
      is.read(frame.error.data(), len);
      continue;
    }
    FrameGeometry& g = frame.geometry;
    const std::uint32_t n_vis = binio::read_u32(is);
    g.visible.resize(n_vis);
    for (std::uint32_t& v : g.visible) v = binio::read_u32(is);
    g.pixels.resize(n_vis);
    g.depths.resize(n_vis);
    for (std::uint32_t i = 0; i < n_vis; ++i) {
      const std::int32_t row = binio::read_i32(is);
      const std::int32_t col = binio::read_i32(is);
      g.pixels[i] = row < 0 ? std::nullopt : std::make_optional(PixelCoord{row, col});
      g.depths[i] = binio::read_f64(is);
    }
    const std::uint32_t n_occ = binio::read_u32(is);
    g.occupied.pixels.resize(n_occ);
    g.occupied.vertices.resize(n_occ);
    for (std::uint32_t i = 0; i < n_occ; ++i) {
      g.occupied.pixels[i].row = binio::read_i32(is);
      g.occupied.pixels[i].col = binio::read_i32(is);
      g.occupied.vertices[i] = binio::read_u32(is);
    }
    const std::uint32_t n_int = binio::read_u32(is);
    g.interior.resize(n_int);
    for (std::uint32_t i = 0; i < n_int; ++i) {
      g.interior[i].row = binio::read_i32(is);
      g.interior[i].col = binio::read_i32(is);
    }
    g.knn.k = binio::read_u32(is);
    g.knn.indices.resize(static_cast<std::size_t>(n_int) * g.knn.k);
    g.knn.distances.resize(static_cast<std::size_t>(n_int) * g.knn.k);
    for (std::size_t i = 0; i < g.knn.indices.size(); ++i) {
      g.knn.indices[i] = binio::read_u32(is);
      g.knn.distances[i] = binio::read_f64(is);
    }
  }
  return cache;
}

std::vector<SynthChannel> make_synth_channels(std::uint32_t d_out, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "synth-channels"));
  std::vector<SynthChannel> channels(d_out);
  for (SynthChannel& ch : channels) {
    ch.omega = rng.uniform(0.3, 1.2);
    Vec3 n(rng.normal(), rng.normal(), rng.normal());
    if (n.norm() < 1e-12) n = Vec3::UnitZ();
    ch.normal = n.normalized();
    ch.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    ch.background = rng.uniform(-2.0, 2.0);
  }
  return channels;
}

FeaturePlane synth_feature_plane(const TriMesh& mesh, const FrameGeometry& frame,
                                 const Intrinsics& intr,
                                 const std::vector<SynthChannel>& channels) {
  const std::uint32_t d_out = static_cast<std::uint32_t>(channels.size());
  FeaturePlane plane(intr.height, intr.width, d_out);

  // background everywhere first; face pixels overwrite
  for (std::int32_t r = 0; r < static_cast<std::int32_t>(intr.height); ++r) {
    for (std::int32_t c = 0; c < static_cast<std::int32_t>(intr.width); ++c) {
      double* dst = plane.pixel(r, c);
      for (std::uint32_t ch = 0; ch < d_out; ++ch) dst[ch] = channels[ch].background;
    }
  }

  const auto write_point = [&](const PixelCoord& pc, const Vec3& x) {
    double* dst = plane.pixel(pc.row, pc.col);
    for (std::uint32_t ch = 0; ch < d_out; ++ch) {
      dst[ch] = std::sin(channels[ch].omega * channels[ch].normal.dot(x) + channels[ch].phase);
    }
  };

  for (std::size_t i = 0; i < frame.occupied.size(); ++i) {
    write_point(frame.occupied.pixels[i], mesh.vertices[frame.occupied.vertices[i]]);
  }

  const std::uint32_t k = frame.knn.k;
  for (std::size_t qi = 0; qi < frame.interior.size(); ++qi) {
    Vec3 blended = Vec3::Zero();
    double wsum = 0;
    for (std::uint32_t j = 0; j < k; ++j) {
      const double w = 1.0 / frame.knn.distances[qi * k + j];
      const std::uint32_t vertex = frame.occupied.vertices[frame.knn.indices[qi * k + j]];
      blended += w * mesh.vertices[vertex];
      wsum += w;
    }
    write_point(frame.interior[qi], blended / wsum);
  }
  return plane;
}

Eigen::MatrixXd make_head_weight(std::uint32_t d_out, std::uint64_t seed) {
  const std::vector<double> values =
      xavier_init(d_out, d_out, static_cast<std::size_t>(d_out) * d_out, seed);
  Eigen::MatrixXd w(d_out, d_out);
  std::size_t idx = 0;
  for (std::uint32_t r = 0; r < d_out; ++r) {
    for (std::uint32_t c = 0; c < d_out; ++c) w(r, c) = values[idx++];
  }
  return w;
}

namespace {

using PlaneMap = Eigen::Map<Eigen::MatrixXd>;
using ConstPlaneMap = Eigen::Map<const Eigen::MatrixXd>;

// channel-fastest planes are (C x N) column-major matrices, one pixel per
// column
ConstPlaneMap as_matrix(const FeaturePlane& plane) {
  return ConstPlaneMap(plane.data().data(), plane.channels(),
                       static_cast<Eigen::Index>(plane.size() / plane.channels()));
}

PlaneMap as_matrix(FeaturePlane& plane) {
  return PlaneMap(plane.data().data(), plane.channels(),
                  static_cast<Eigen::Index>(plane.size() / plane.channels()));
}

}  // namespace

FeaturePlane head_forward(const FeaturePlane& input, const LoraLayer<double>& head) {
  if (head.merged) throw std::logic_error("head_forward: layer is merged; use the merged path");
  if (input.channels() != head.cols()) {
    throw std::invalid_argument("head_forward: channel mismatch");
  }
  FeaturePlane out(input.height(), input.width(), head.rows());
  as_matrix(out).noalias() = head.W * as_matrix(input);
  as_matrix(out).noalias() += head.B * (head.A * as_matrix(input));
  return out;
}

FeaturePlane head_forward_merged(const FeaturePlane& input, const LoraLayer<double>& head) {
  if (!head.merged) throw std::logic_error("head_forward_merged: layer is not merged");
  if (input.channels() != head.cols()) {
    throw std::invalid_argument("head_forward_merged: channel mismatch");
  }
  FeaturePlane out(input.height(), input.width(), head.rows());
  as_matrix(out).noalias() = head.W * as_matrix(input);
  return out;
}

FeaturePlane head_backward(const FeaturePlane& grad_output, const FeaturePlane& input,
                           const LoraLayer<double>& head, Eigen::MatrixXd& grad_A,
                           Eigen::MatrixXd& grad_B) {
  const auto g = as_matrix(grad_output);
  const auto x = as_matrix(input);
  const Eigen::MatrixXd ax = head.A * x;  // r x N
  grad_B.noalias() += g * ax.transpose();
  grad_A.noalias() += (head.B.transpose() * g) * x.transpose();
  FeaturePlane grad_in(input.height(), input.width(), input.channels());
  as_matrix(grad_in).noalias() = head.W.transpose() * g;
  as_matrix(grad_in).noalias() += head.A.transpose() * (head.B.transpose() * g);
  return grad_in;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << "iter,lr_factor,l_feat,l_reg,l_register\n";
  char buf[256];
  for (const MetricsRow& row : rows) {
    std::snprintf(buf, sizeof(buf), "%u,%.17g,%.17g,%.17g,%.17g\n", row.iter, row.lr_factor,
                  row.l_feat, row.l_reg, row.l_register);
    os << buf;
  }
}

std::vector<ParamSpan> register_param_spans(RegisterParams& params) {
  std::vector<ParamSpan> spans;
  spans.push_back({"emb.e", params.emb.e.data(), static_cast<std::size_t>(params.emb.e.size())});
  spans.push_back(
      {"emb.e_b", params.emb.e_b.data(), static_cast<std::size_t>(params.emb.e_b.size())});
  const auto add_encoder = [&spans](const char* prefix, Encoder& enc) {
    for (std::size_t l = 0; l < enc.layers.size(); ++l) {
      ConvLayer& layer = enc.layers[l];
      spans.push_back({std::string(prefix) + "." + std::to_string(l) + ".weight",
                       layer.weights.data(), layer.weights.size()});
      spans.push_back({std::string(prefix) + "." + std::to_string(l) + ".bias",
                       layer.bias.data(), layer.bias.size()});
    }
  };
  add_encoder("stage1", params.stage1);
  add_encoder("stage2", params.stage2);
  return spans;
}

namespace {

struct RegisterGradAccumulator {
  Eigen::MatrixXd grad_e;
  Eigen::VectorXd grad_eb;
  std::vector<ConvGrads> stage1;
  std::vector<ConvGrads> stage2;

  explicit RegisterGradAccumulator(const RegisterParams& params) {
    grad_e = Eigen::MatrixXd::Zero(params.emb.e.rows(), params.emb.e.cols());
    grad_eb = Eigen::VectorXd::Zero(params.emb.e_b.size());
    const auto zero_like = [](const Encoder& enc) {
      std::vector<ConvGrads> grads(enc.layers.size());
      for (std::size_t l = 0; l < enc.layers.size(); ++l) {
        grads[l].weights.assign(enc.layers[l].weights.size(), 0.0);
        grads[l].bias.assign(enc.layers[l].bias.size(), 0.0);
      }
      return grads;
    };
    stage1 = zero_like(params.stage1);
    stage2 = zero_like(params.stage2);
  }

  void add_encoder_grads(std::vector<ConvGrads>& acc, const std::vector<ConvGrads>& grads) {
    for (std::size_t l = 0; l < grads.size(); ++l) {
      for (std::size_t i = 0; i < grads[l].weights.size(); ++i) {
        acc[l].weights[i] += grads[l].weights[i];
      }
      for (std::size_t i = 0; i < grads[l].bias.size(); ++i) acc[l].bias[i] += grads[l].bias[i];
    }
  }

  void scale(double factor) {
    grad_e *= factor;
    grad_eb *= factor;
    for (auto* stage : {&stage1, &stage2}) {
      for (ConvGrads& g : *stage) {
        for (double& v : g.weights) v *= factor;
        for (double& v : g.bias) v *= factor;
      }
    }
  }

  /// Flat layout matching register_param_spans.
  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.insert(flat.end(), grad_e.data(), grad_e.data() + grad_e.size());
    flat.insert(flat.end(), grad_eb.data(), grad_eb.data() + grad_eb.size());
    for (const auto* stage : {&stage1, &stage2}) {
      for (const ConvGrads& g : *stage) {
        flat.insert(flat.end(), g.weights.begin(), g.weights.end());
        flat.insert(flat.end(), g.bias.begin(), g.bias.end());
      }
    }
    return flat;
  }
};

std::vector<double> flatten_lora_grads(const Eigen::MatrixXd& grad_A,
                                       const Eigen::MatrixXd& grad_B) {
  std::vector<double> flat;
  flat.insert(flat.end(), grad_A.data(), grad_A.data() + grad_A.size());
  flat.insert(flat.end(), grad_B.data(), grad_B.data() + grad_B.size());
  return flat;
}

}  // namespace

AdaptArtifacts run_adaptation(const TriMesh& mesh, const CameraRig& rig,
                              const PreprocessCache& cache,
                              const std::vector<FeaturePlane>& features,
                              const AdaptConfig& config) {
  config.validate();
  mesh.validate();
  const Intrinsics& intr = rig.intrinsics;
  if (intr.height != config.height || intr.width != config.width) {
    throw std::invalid_argument("run_adaptation: config grid " + std::to_string(config.width) +
                                "x" + std::to_string(config.height) +
                                " disagrees with the camera rig");
  }
  if (cache.frames.size() != rig.poses.size() || features.size() != rig.poses.size()) {
    throw std::invalid_argument("run_adaptation: poses, cache frames and feature planes must "
                                "align one-to-one");
  }
  if (!cache.frames[0].valid) {
    throw std::invalid_argument("run_adaptation: source pose (index 0) failed preprocessing: " +
                                cache.frames[0].error);
  }

  // fingerprints recomputed from the actual inputs guard the cache
  std::vector<std::uint64_t> fingerprints(rig.poses.size());
  for (std::size_t i = 0; i < rig.poses.size(); ++i) {
    fingerprints[i] = frame_fingerprint(mesh, rig.poses[i], intr, config.alpha, config.k);
  }

  std::vector<std::size_t> pool;
  for (std::size_t i = 1; i < cache.frames.size(); ++i) {
    if (cache.frames[i].valid) pool.push_back(i);
  }
  if (pool.empty()) pool.push_back(0);

  const auto check_plane = [&](std::size_t i) {
    if (features[i].height() != intr.height || features[i].width() != intr.width ||
        features[i].channels() != config.d_out) {
      throw std::invalid_argument("run_adaptation: feature plane " + std::to_string(i) +
                                  " has the wrong shape");
    }
  };
  check_plane(0);
  for (std::size_t i : pool) check_plane(i);

  AdaptArtifacts art;
  art.params = make_register_params(static_cast<std::uint32_t>(mesh.vertices.size()), config.d,
                                    config.d_out, derive_seed(config.seed, "register-params"));
  art.frozen_head_weight = make_head_weight(config.d_out, derive_seed(config.seed, "adapter-head"));
  art.head = lora_init<double>(art.frozen_head_weight, config.rank,
                               derive_seed(config.seed, "adapter-lora"));

  Adam adam;
  adam.add_group("register", config.lr_register, register_param_spans(art.params));
  adam.add_group("lora", config.lr_lora,
                 {{"head.A", art.head.A.data(), static_cast<std::size_t>(art.head.A.size())},
                  {"head.B", art.head.B.data(), static_cast<std::size_t>(art.head.B.size())}});

  LinearSchedule sched;
  sched.total_iters = std::max<std::uint32_t>(config.iterations, 1);

  Rng sampler(derive_seed(config.seed, "batch-sampler"));
  const LossWeights weights{config.lambda_feat, config.lambda_reg};
  const FeaturePlane& f_src = features[0];

  const std::uint32_t rows_to_log = std::max<std::uint32_t>(config.iterations, 1);
  for (std::uint32_t iter = 0; iter < rows_to_log; ++iter) {
    const double factor = schedule_factor(iter, sched);

    std::vector<std::size_t> batch(config.batch_size);
    for (std::size_t& b : batch) b = pool[sampler.uniform_index(pool.size())];

    RegisterGradAccumulator acc(art.params);
    Eigen::MatrixXd grad_A = Eigen::MatrixXd::Zero(art.head.A.rows(), art.head.A.cols());
    Eigen::MatrixXd grad_B = Eigen::MatrixXd::Zero(art.head.B.rows(), art.head.B.cols());

    double l_feat_sum = 0;
    for (const std::size_t di : batch) {
      const FrameGeometry& frame = cache.frames[di].geometry;
      const DenseFeature df =
          build_dense_feature(frame, art.params.emb, intr, fingerprints[di]);
      const RegisterForward fwd = register_forward(f_src, df.plane, art.params, true);
      const FeaturePlane y = head_forward(fwd.f_reg, art.head);

      FeaturePlane grad_y;
      l_feat_sum += loss_feat_grad(features[di], y, grad_y);

      const FeaturePlane grad_freg = head_backward(grad_y, fwd.f_reg, art.head, grad_A, grad_B);
      const RegisterGrads rg = register_backward(grad_freg, art.params, fwd);
      accumulate_embedding_grads(rg.f_s, frame, acc.grad_e, acc.grad_eb);
      acc.add_encoder_grads(acc.stage1, rg.stage1);
      acc.add_encoder_grads(acc.stage2, rg.stage2);
    }

    const double batch_scale = config.lambda_feat / static_cast<double>(config.batch_size);
    acc.scale(batch_scale);
    grad_A *= batch_scale;
    grad_B *= batch_scale;

    Eigen::MatrixXd grad_reg_e;
    const double l_reg_val = loss_reg_grad(art.params.emb, grad_reg_e);
    acc.grad_e += config.lambda_reg * grad_reg_e;

    const double l_feat_mean = l_feat_sum / static_cast<double>(config.batch_size);
    const double l_register = loss_register(l_feat_mean, l_reg_val, weights);
    art.metrics.push_back({iter, factor, l_feat_mean, l_reg_val, l_register});

    if (iter < config.iterations) {
      adam.step({acc.flatten(), flatten_lora_grads(grad_A, grad_B)}, factor);
    }
  }
  return art;
}

InferResult infer_merged(const FeaturePlane& f_src, LoraLayer<double> head) {
  lora_merge(head);
  InferResult result;
  result.output = head_forward_merged(f_src, head);
  result.parameter_count = head.parameter_count();
  return result;
}

Visualization visualize_pca(const FeaturePlane& plane, std::uint32_t component,
                            VisualizeMode mode) {
  const std::uint32_t channels = plane.channels();
  if (component + 1 > channels) {
    throw std::invalid_argument("visualize_pca: component " + std::to_string(component) +
                                " out of range for " + std::to_string(channels) + " channels");
  }
  const Eigen::Index n_pixels = static_cast<Eigen::Index>(plane.size() / channels);
  const auto x = ConstPlaneMap(plane.data().data(), channels, n_pixels);

  const Eigen::VectorXd mean = x.rowwise().mean();
  Eigen::MatrixXd cov = (x * x.transpose()) / static_cast<double>(n_pixels);
  cov.noalias() -= mean * mean.transpose();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("visualize_pca: eigendecomposition failed");
  }
  // Eigen sorts eigenvalues ascending; component 0 is the largest.
  Eigen::VectorXd axis = solver.eigenvectors().col(channels - 1 - component);
  Eigen::Index max_idx = 0;
  axis.cwiseAbs().maxCoeff(&max_idx);
  if (axis(max_idx) < 0) axis = -axis;  // deterministic sign

  Eigen::VectorXd projection = (axis.transpose() * x).transpose();
  projection.array() -= axis.dot(mean);

  const double proj_mean = projection.mean();
  const double var = (projection.array() - proj_mean).square().sum() /
                     static_cast<double>(n_pixels);
  if (var <= 1e-20) {
    throw std::runtime_error("visualize_pca: zero variance along the requested component "
                             "(constant plane?)");
  }
  const double inv_std = 1.0 / std::sqrt(var);

  Visualization vis;
  vis.width = plane.width();
  vis.height = plane.height();
  vis.clip = mode == VisualizeMode::Dino ? 3.0 : 1.0;
  vis.standardized.resize(static_cast<std::size_t>(n_pixels));
  vis.rgb.resize(static_cast<std::size_t>(n_pixels) * 3);

  for (Eigen::Index i = 0; i < n_pixels; ++i) {
    const double s = (projection(i) - proj_mean) * inv_std;
    vis.standardized[static_cast<std::size_t>(i)] = s;
    const double clipped = std::clamp(s, -vis.clip, vis.clip);
    const double u = (clipped + vis.clip) / (2.0 * vis.clip);
    const int level = static_cast<int>(std::lround(u * 255.0));  // 256-level colormap
    std::uint8_t r, g, b;
    if (level < 128) {
      const double t = static_cast<double>(level) / 127.0;  // blue -> white
      r = static_cast<std::uint8_t>(std::lround(255.0 * t));
      g = static_cast<std::uint8_t>(std::lround(255.0 * t));
      b = 255;
    } else {
      const double t = static_cast<double>(level - 128) / 127.0;  // white -> red
      r = 255;
      g = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - t)));
      b = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - t)));
    }
    vis.rgb[static_cast<std::size_t>(i) * 3 + 0] = r;
    vis.rgb[static_cast<std::size_t>(i) * 3 + 1] = g;
    vis.rgb[static_cast<std::size_t>(i) * 3 + 2] = b;
  }
  return vis;
}

void write_ppm(const Visualization& vis, const std::string& path) {
  auto os = binio::open_out(path);
  os << "P6\n" << vis.width << ' ' << vis.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(vis.rgb.data()),
           static_cast<std::streamsize>(vis.rgb.size()));
  if (!os) throw std::runtime_error("failed writing PPM: " + path);
}

std::string feature_file_name(std::size_t pose_index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "feat_%04zu.fpln", pose_index);
  return buf;
}

// ---------------------------------------------------------------------
// CLI command bodies.

int cmd_preprocess(const std::string& mesh_path, const std::string& poses_path,
                   const std::string& config_path, const std::string& out_path,
                   bool check_visibility) {
  const TriMesh mesh = load_obj(mesh_path);
  const CameraRig rig = load_camera_rig(poses_path);
  const AdaptConfig config = load_config(config_path);

  const PreprocessCache cache = preprocess_frames(mesh, rig, config);

  if (check_visibility) {
    for (std::size_t i = 0; i < rig.poses.size(); ++i) {
      if (!cache.frames[i].valid) continue;
      const VisibleSet oracle = brute_force_visible(mesh, rig.poses[i]);
      if (oracle != cache.frames[i].geometry.visible) {
        std::cerr << "preprocess: visibility oracle mismatch at pose " << i << "\n";
        return 1;
      }
    }
    std::cout << "visibility oracle: all poses agree\n";
  }

  save_cache(cache, out_path);
  for (std::size_t i = 0; i < cache.frames.size(); ++i) {
    if (!cache.frames[i].valid) {
      std::cerr << "preprocess: pose " << i << " failed: " << cache.frames[i].error << "\n";
    }
  }
  std::cout << "preprocess: " << cache.valid_count() << "/" << cache.frames.size()
            << " poses cached to " << out_path << "\n";
  return 0;
}

int cmd_synth(const std::string& mesh_path, const std::string& poses_path,
              const std::string& config_path, const std::string& cache_path,
              std::optional<std::uint64_t> seed, const std::string& out_dir) {
  const TriMesh mesh = load_obj(mesh_path);
  const CameraRig rig = load_camera_rig(poses_path);
  const AdaptConfig config = load_config(config_path);
  const PreprocessCache cache = load_cache(cache_path);
  if (cache.frames.size() != rig.poses.size()) {
    throw std::runtime_error("synth: cache and pose list disagree on frame count");
  }

  std::filesystem::create_directories(out_dir);
  const std::vector<SynthChannel> channels =
      make_synth_channels(config.d_out, seed.value_or(config.seed));
  std::size_t written = 0;
  for (std::size_t i = 0; i < cache.frames.size(); ++i) {
    if (!cache.frames[i].valid) {
      std::cerr << "synth: skipping pose " << i << " (" << cache.frames[i].error << ")\n";
      continue;
    }
    const FeaturePlane plane =
        synth_feature_plane(mesh, cache.frames[i].geometry, rig.intrinsics, channels);
    save_fpln(plane, out_dir + "/" + feature_file_name(i));
    ++written;
  }
  std::cout << "synth: wrote " << written << " feature planes to " << out_dir << "\n";
  return 0;
}

int cmd_adapt(const std::string& mesh_path, const std::string& poses_path,
              const std::string& config_path, const std::string& cache_path,
              const std::string& features_dir, std::optional<std::uint32_t> iterations,
              std::optional<std::uint32_t> batch_size, std::optional<std::uint64_t> seed,
              const std::string& out_dir) {
  const TriMesh mesh = load_obj(mesh_path);
  const CameraRig rig = load_camera_rig(poses_path);
  AdaptConfig config = load_config(config_path);
  if (iterations) config.iterations = *iterations;
  if (batch_size) config.batch_size = *batch_size;
  if (seed) config.seed = *seed;
  const PreprocessCache cache = load_cache(cache_path);

  std::vector<FeaturePlane> features(rig.poses.size());
  for (std::size_t i = 0; i < rig.poses.size(); ++i) {
    if (cache.frames.size() > i && cache.frames[i].valid) {
      features[i] = load_fpln(features_dir + "/" + feature_file_name(i));
    }
  }

  const AdaptArtifacts art = run_adaptation(mesh, rig, cache, features, config);

  std::filesystem::create_directories(out_dir);
  save_register_params(art.params, out_dir + "/register.rgpm");
  save_lora({art.head}, out_dir + "/head.lora");
  write_metrics_csv(art.metrics, out_dir + "/metrics.csv");
  std::cout << "adapt: " << art.metrics.size() << " iterations logged; final l_register = "
            << art.metrics.back().l_register << "\n";
  return 0;
}

int cmd_infer(const std::string& features_path, const std::string& checkpoint_path,
              const std::string& config_path, const std::string& out_path,
              const std::string& merged_out_path) {
  const AdaptConfig config = load_config(config_path);
  const FeaturePlane f_src = load_fpln(features_path);

  const Eigen::MatrixXd frozen =
      make_head_weight(config.d_out, derive_seed(config.seed, "adapter-head"));
  std::vector<LoraLayer<double>> layers = load_lora(checkpoint_path, {frozen});

  LoraLayer<double> head = std::move(layers[0]);
  lora_merge(head);
  const FeaturePlane out = head_forward_merged(f_src, head);
  save_fpln(out, out_path);
  if (!merged_out_path.empty()) {
    save_dense_weights({head.W}, merged_out_path);
  }
  std::cout << "infer: adapter parameters after merge: " << head.parameter_count()
            << " (equals the unadapted head's " << head.W.size() << ")\n";
  return 0;
}

int cmd_visualize(const std::string& plane_path, std::uint32_t component, const std::string& mode,
                  const std::string& out_path) {
  const FeaturePlane plane = load_fpln(plane_path);
  VisualizeMode m;
  if (mode == "dino") {
    m = VisualizeMode::Dino;
  } else if (mode == "register") {
    m = VisualizeMode::Register;
  } else {
    throw std::invalid_argument("visualize: mode must be 'dino' or 'register', got '" + mode + "'");
  }
  const Visualization vis = visualize_pca(plane, component, m);
  write_ppm(vis, out_path);
  std::cout << "visualize: wrote " << vis.width << "x" << vis.height << " PPM to " << out_path
            << " (clip +-" << vis.clip << " sigma)\n";
  return 0;
}

GradCheckReport register_pipeline_gradcheck(double h, double tolerance) {
  // Desk-scale instance: icosahedron, two poses, 8x8 grid.
  const TriMesh mesh = make_icosphere(0);
  const CameraRig rig = make_ring_rig(2, 4.0, 8, 8, 30.0);

  AdaptConfig config;
  config.height = config.width = 8;
  config.d = 6;
  config.d_out = 4;
  config.k = 3;
  config.rank = 2;
  config.seed = 42;

  const PreprocessCache cache = preprocess_frames(mesh, rig, config);
  if (!cache.frames[0].valid || !cache.frames[1].valid) {
    throw std::runtime_error("gradcheck: desk-scale preprocessing failed");
  }
  const std::vector<SynthChannel> channels = make_synth_channels(config.d_out, 5);
  const FeaturePlane f_src =
      synth_feature_plane(mesh, cache.frames[0].geometry, rig.intrinsics, channels);
  const FeaturePlane f_dri =
      synth_feature_plane(mesh, cache.frames[1].geometry, rig.intrinsics, channels);

  RegisterParams params =
      make_register_params(static_cast<std::uint32_t>(mesh.vertices.size()), config.d,
                           config.d_out, derive_seed(config.seed, "register-params"));
  const Eigen::MatrixXd frozen =
      make_head_weight(config.d_out, derive_seed(config.seed, "adapter-head"));
  LoraLayer<double> head =
      lora_init<double>(frozen, config.rank, derive_seed(config.seed, "adapter-lora"));
  // a nonzero B exercises the grad_A path (B = 0 would zero it)
  {
    Rng rng(derive_seed(config.seed, "adapter-b-probe"));
    for (Eigen::Index i = 0; i < head.B.size(); ++i) head.B.data()[i] = rng.normal(0.0, 0.2);
  }

  std::vector<ParamSpan> spans = register_param_spans(params);
  spans.push_back({"head.A", head.A.data(), static_cast<std::size_t>(head.A.size())});
  spans.push_back({"head.B", head.B.data(), static_cast<std::size_t>(head.B.size())});

  const FrameGeometry& frame = cache.frames[1].geometry;
  const std::uint64_t fp =
      frame_fingerprint(mesh, rig.poses[1], rig.intrinsics, config.alpha, config.k);
  const LossWeights weights{config.lambda_feat, config.lambda_reg};

  const auto loss_value = [&]() {
    const DenseFeature df = build_dense_feature(frame, params.emb, rig.intrinsics, fp);
    const RegisterForward fwd = register_forward(f_src, df.plane, params, false);
    const FeaturePlane y = head_forward(fwd.f_reg, head);
    return loss_register(loss_feat(f_dri, y), loss_reg(params.emb), weights);
  };

  // analytic gradient, assembled the same way the training loop does it
  std::vector<double> analytic;
  {
    const DenseFeature df = build_dense_feature(frame, params.emb, rig.intrinsics, fp);
    const RegisterForward fwd = register_forward(f_src, df.plane, params, true);
    const FeaturePlane y = head_forward(fwd.f_reg, head);
    FeaturePlane grad_y;
    loss_feat_grad(f_dri, y, grad_y);
    for (double& v : grad_y.data()) v *= weights.lambda_feat;

    Eigen::MatrixXd grad_A = Eigen::MatrixXd::Zero(head.A.rows(), head.A.cols());
    Eigen::MatrixXd grad_B = Eigen::MatrixXd::Zero(head.B.rows(), head.B.cols());
    const FeaturePlane grad_freg = head_backward(grad_y, fwd.f_reg, head, grad_A, grad_B);
    const RegisterGrads rg = register_backward(grad_freg, params, fwd);

    RegisterGradAccumulator acc(params);
    accumulate_embedding_grads(rg.f_s, frame, acc.grad_e, acc.grad_eb);
    acc.add_encoder_grads(acc.stage1, rg.stage1);
    acc.add_encoder_grads(acc.stage2, rg.stage2);

    Eigen::MatrixXd grad_reg_e;
    loss_reg_grad(params.emb, grad_reg_e);
    acc.grad_e += weights.lambda_reg * grad_reg_e;

    analytic = acc.flatten();
    const std::vector<double> lora_flat = flatten_lora_grads(grad_A, grad_B);
    analytic.insert(analytic.end(), lora_flat.begin(), lora_flat.end());
  }

  const std::vector<double> theta0 = gather(spans);
  const auto loss_fn = [&](const std::vector<double>& theta) {
    scatter(spans, theta);
    const double value = loss_value();
    return value;
  };
  GradCheckReport report = gradcheck(loss_fn, theta0, analytic, h, tolerance);
  scatter(spans, theta0);  // restore
  return report;
}

int cmd_gradcheck(const std::string& scale) {
  if (scale != "desk") {
    throw std::invalid_argument("gradcheck: only the 'desk' scale is available, got '" + scale +
                                "'");
  }
  const GradCheckReport report = register_pipeline_gradcheck();
  std::cout << "gradcheck(desk): coords=" << report.coords_checked
            << " max_rel_err=" << report.max_rel_err << " mean_rel_err=" << report.mean_rel_err
            << " -> " << (report.pass ? "PASS" : "FAIL") << "\n";
  return report.pass ? 0 : 1;
}

}  // namespace meshreg
