#include "meshreg/featuremap.hpp"

#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include "meshreg/binio.hpp"
#include "meshreg/parallel.hpp"

namespace meshreg {

void FeaturePlane::check_finite(const std::string& what) const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw std::runtime_error(what + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

void save_fpln(const FeaturePlane& plane, const std::string& path) {
  auto os = binio::open_out(path);
  binio::write_magic(os, "FPLN");
  binio::write_u32(os, 1);
  binio::write_u32(os, plane.height());
  binio::write_u32(os, plane.width());
  binio::write_u32(os, plane.channels());
  binio::write_f32_array(os, plane.data().data(), plane.size());
  if (!os) throw std::runtime_error("failed writing FPLN: " + path);
}

FeaturePlane load_fpln(const std::string& path) {
  auto is = binio::open_in(path);
  binio::expect_magic(is, "FPLN", path);
  binio::expect_version(is, 1, path);
  const std::uint32_t h = binio::read_u32(is);
  const std::uint32_t w = binio::read_u32(is);
  const std::uint32_t c = binio::read_u32(is);
  FeaturePlane plane(h, w, c);
  binio::read_f32_array(is, plane.data().data(), plane.size());
  return plane;
}

void VertexEmbeddings::check_valid(std::uint32_t mesh_vertex_count) const {
  if (vertex_count() != mesh_vertex_count) {
    throw std::invalid_argument("VertexEmbeddings: row count " + std::to_string(vertex_count()) +
                                " does not match mesh vertex count " +
                                std::to_string(mesh_vertex_count));
  }
  if (e_b.size() != e.cols()) {
    throw std::invalid_argument("VertexEmbeddings: e_b dimension mismatch");
  }
  if (!e.allFinite() || !e_b.allFinite()) {
    throw std::invalid_argument("VertexEmbeddings: non-finite entries");
  }
}

void save_vemb(const VertexEmbeddings& emb, std::ostream& os) {
  binio::write_magic(os, "VEMB");
  binio::write_u32(os, 1);
  binio::write_u32(os, emb.vertex_count());
  binio::write_u32(os, emb.dim());
  for (Eigen::Index r = 0; r < emb.e.rows(); ++r) {
    for (Eigen::Index c = 0; c < emb.e.cols(); ++c) binio::write_f32(os, static_cast<float>(emb.e(r, c)));
  }
  for (Eigen::Index c = 0; c < emb.e_b.size(); ++c) binio::write_f32(os, static_cast<float>(emb.e_b(c)));
}

void save_vemb(const VertexEmbeddings& emb, const std::string& path) {
  auto os = binio::open_out(path);
  save_vemb(emb, os);
  if (!os) throw std::runtime_error("failed writing VEMB: " + path);
}

VertexEmbeddings load_vemb(std::istream& is) {
  binio::expect_magic(is, "VEMB", "VEMB block");
  binio::expect_version(is, 1, "VEMB block");
  const std::uint32_t n = binio::read_u32(is);
  const std::uint32_t d = binio::read_u32(is);
  VertexEmbeddings emb;
  emb.e.resize(n, d);
  for (std::uint32_t r = 0; r < n; ++r) {
    for (std::uint32_t c = 0; c < d; ++c) emb.e(r, c) = static_cast<double>(binio::read_f32(is));
  }
  emb.e_b.resize(d);
  for (std::uint32_t c = 0; c < d; ++c) emb.e_b(c) = static_cast<double>(binio::read_f32(is));
  return emb;
}

VertexEmbeddings load_vemb(const std::string& path) {
  auto is = binio::open_in(path);
  return load_vemb(is);
}

OccupiedPixels depth_test_winners(const std::vector<std::optional<PixelCoord>>& pixels,
                                  const std::vector<double>& depths,
                                  const std::vector<std::uint32_t>& vertex_ids) {
  if (pixels.size() != depths.size() || pixels.size() != vertex_ids.size()) {
    throw std::invalid_argument("depth_test_winners: parallel arrays differ in length");
  }
  // nearest depth wins; ties resolve to the smaller vertex index
  std::map<PixelCoord, std::pair<double, std::uint32_t>> winner;
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (!pixels[i]) continue;
    const std::pair<double, std::uint32_t> cand{depths[i], vertex_ids[i]};
    const auto [it, inserted] = winner.insert({*pixels[i], cand});
    if (!inserted && cand < it->second) it->second = cand;
  }
  OccupiedPixels occ;
  occ.pixels.reserve(winner.size());
  occ.vertices.reserve(winner.size());
  for (const auto& [pc, dv] : winner) {
    occ.pixels.push_back(pc);
    occ.vertices.push_back(dv.second);
  }
  return occ;
}

OccupiedPixels scatter_embeddings(FeaturePlane& plane,
                                  const std::vector<std::optional<PixelCoord>>& pixels,
                                  const std::vector<double>& depths,
                                  const std::vector<std::uint32_t>& vertex_ids,
                                  const VertexEmbeddings& emb) {
  if (plane.channels() != emb.dim()) {
    throw std::invalid_argument("scatter_embeddings: plane has " +
                                std::to_string(plane.channels()) + " channels but embeddings are " +
                                std::to_string(emb.dim()) + "-dimensional");
  }
  const OccupiedPixels occ = depth_test_winners(pixels, depths, vertex_ids);
  for (std::size_t i = 0; i < occ.size(); ++i) {
    const PixelCoord pc = occ.pixels[i];
    if (pc.row < 0 || pc.col < 0 || pc.row >= static_cast<std::int32_t>(plane.height()) ||
        pc.col >= static_cast<std::int32_t>(plane.width())) {
      throw std::invalid_argument("scatter_embeddings: pixel out of bounds");
    }
    double* dst = plane.pixel(pc.row, pc.col);
    for (std::uint32_t ch = 0; ch < plane.channels(); ++ch) dst[ch] = emb.e(occ.vertices[i], ch);
  }
  return occ;
}

void idw_fill(FeaturePlane& plane, const std::vector<PixelCoord>& interior, const KnnTable& knn,
              const VertexEmbeddings& emb, const OccupiedPixels& occupied) {
  if (knn.query_count() != interior.size()) {
    throw std::invalid_argument("idw_fill: knn table covers " + std::to_string(knn.query_count()) +
                                " queries but there are " + std::to_string(interior.size()) +
                                " interior pixels");
  }
  const std::uint32_t k = knn.k;
  const std::uint32_t channels = plane.channels();
  std::vector<char> zero_distance(interior.size(), 0);
  parallel_for(interior.size(), [&](std::size_t qi) {
    double wsum = 0;
    double* dst = plane.pixel(interior[qi].row, interior[qi].col);
    for (std::uint32_t ch = 0; ch < channels; ++ch) dst[ch] = 0;
    for (std::uint32_t j = 0; j < k; ++j) {
      const double d = knn.distances[qi * k + j];
      if (d <= 0.0) {
        zero_distance[qi] = 1;
        return;
      }
      const double w = 1.0 / d;
      const std::uint32_t vertex = occupied.vertices[knn.indices[qi * k + j]];
      wsum += w;
      for (std::uint32_t ch = 0; ch < channels; ++ch) dst[ch] += w * emb.e(vertex, ch);
    }
    for (std::uint32_t ch = 0; ch < channels; ++ch) dst[ch] /= wsum;
  });
  for (std::size_t qi = 0; qi < interior.size(); ++qi) {
    if (zero_distance[qi]) {
      throw std::runtime_error("idw_fill: zero distance at interior pixel " + std::to_string(qi) +
                               " (projected pixels must be excluded)");
    }
  }
}

void background_fill(FeaturePlane& plane, const std::vector<PixelCoord>& mask,
                     const Eigen::VectorXd& e_b) {
  if (e_b.size() != plane.channels()) {
    throw std::invalid_argument("background_fill: e_b dimension mismatch");
  }
  for (const PixelCoord& pc : mask) {
    double* dst = plane.pixel(pc.row, pc.col);
    for (std::uint32_t ch = 0; ch < plane.channels(); ++ch) dst[ch] = e_b(ch);
  }
}

namespace {

std::vector<PixelCoord> background_mask(const FrameGeometry& frame, const Intrinsics& intr) {
  std::vector<char> taken(static_cast<std::size_t>(intr.height) * intr.width, 0);
  const auto mark = [&](const PixelCoord& pc) {
    taken[static_cast<std::size_t>(pc.row) * intr.width + static_cast<std::size_t>(pc.col)] = 1;
  };
  for (const PixelCoord& pc : frame.occupied.pixels) mark(pc);
  for (const PixelCoord& pc : frame.interior) mark(pc);
  std::vector<PixelCoord> mask;
  mask.reserve(taken.size() - frame.occupied.size() - frame.interior.size());
  for (std::int32_t r = 0; r < static_cast<std::int32_t>(intr.height); ++r) {
    for (std::int32_t c = 0; c < static_cast<std::int32_t>(intr.width); ++c) {
      if (!taken[static_cast<std::size_t>(r) * intr.width + static_cast<std::size_t>(c)]) {
        mask.push_back({r, c});
      }
    }
  }
  return mask;
}

}  // namespace

DenseFeature build_dense_feature(const FrameGeometry& frame, const VertexEmbeddings& emb,
                                 const Intrinsics& intr, std::uint64_t expected_fingerprint) {
  if (frame.fingerprint != expected_fingerprint) {
    throw std::runtime_error("build_dense_feature: cache fingerprint mismatch (cache was built "
                             "for different mesh/pose/config)");
  }

  DenseFeature out;
  out.plane = FeaturePlane(intr.height, intr.width, emb.dim());

  const OccupiedPixels occ =
      scatter_embeddings(out.plane, frame.pixels, frame.depths, frame.visible, emb);
  if (occ.pixels != frame.occupied.pixels || occ.vertices != frame.occupied.vertices) {
    throw std::runtime_error("build_dense_feature: cached occupied pixels disagree with scatter");
  }

  idw_fill(out.plane, frame.interior, frame.knn, emb, occ);

  const std::vector<PixelCoord> mask = background_mask(frame, intr);
  background_fill(out.plane, mask, emb.e_b);

  out.occupied_count = occ.size();
  out.interior_count = frame.interior.size();
  out.background_count = mask.size();
  out.plane.check_finite("build_dense_feature");
  return out;
}

void accumulate_embedding_grads(const FeaturePlane& plane_grad, const FrameGeometry& frame,
                                Eigen::MatrixXd& grad_e, Eigen::VectorXd& grad_eb) {
  const std::uint32_t channels = plane_grad.channels();

  for (std::size_t i = 0; i < frame.occupied.size(); ++i) {
    const PixelCoord pc = frame.occupied.pixels[i];
    const double* src = plane_grad.pixel(pc.row, pc.col);
    for (std::uint32_t ch = 0; ch < channels; ++ch) {
      grad_e(frame.occupied.vertices[i], ch) += src[ch];
    }
  }

  const std::uint32_t k = frame.knn.k;
  for (std::size_t qi = 0; qi < frame.interior.size(); ++qi) {
    const PixelCoord pc = frame.interior[qi];
    const double* src = plane_grad.pixel(pc.row, pc.col);
    double wsum = 0;
    for (std::uint32_t j = 0; j < k; ++j) wsum += 1.0 / frame.knn.distances[qi * k + j];
    for (std::uint32_t j = 0; j < k; ++j) {
      const double w = (1.0 / frame.knn.distances[qi * k + j]) / wsum;
      const std::uint32_t vertex = frame.occupied.vertices[frame.knn.indices[qi * k + j]];
      for (std::uint32_t ch = 0; ch < channels; ++ch) grad_e(vertex, ch) += w * src[ch];
    }
  }

  // background = every pixel not occupied and not interior
  std::vector<char> taken(static_cast<std::size_t>(plane_grad.height()) * plane_grad.width(), 0);
  for (const PixelCoord& pc : frame.occupied.pixels) {
    taken[static_cast<std::size_t>(pc.row) * plane_grad.width() + static_cast<std::size_t>(pc.col)] = 1;
  }
  for (const PixelCoord& pc : frame.interior) {
    taken[static_cast<std::size_t>(pc.row) * plane_grad.width() + static_cast<std::size_t>(pc.col)] = 1;
  }
  for (std::int32_t r = 0; r < static_cast<std::int32_t>(plane_grad.height()); ++r) {
    for (std::int32_t c = 0; c < static_cast<std::int32_t>(plane_grad.width()); ++c) {
      if (taken[static_cast<std::size_t>(r) * plane_grad.width() + static_cast<std::size_t>(c)]) continue;
      const double* src = plane_grad.pixel(r, c);
      for (std::uint32_t ch = 0; ch < channels; ++ch) grad_eb(ch) += src[ch];
    }
  }
}

}  // namespace meshreg
