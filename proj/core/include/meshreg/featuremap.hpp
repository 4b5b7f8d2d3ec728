#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "meshreg/alphashape.hpp"
#include "meshreg/geometry.hpp"

namespace meshreg {

/// Dense H x W x C scalar grid, channel-fastest, row-major. Values live in
/// 64-bit memory and cross the disk boundary (FPLN) as 32-bit floats.
class FeaturePlane {
 public:
  FeaturePlane() = default;
  FeaturePlane(std::uint32_t height, std::uint32_t width, std::uint32_t channels)
      : height_(height), width_(width), channels_(channels),
        data_(static_cast<std::size_t>(height) * width * channels, 0.0) {}

  std::uint32_t height() const { return height_; }
  std::uint32_t width() const { return width_; }
  std::uint32_t channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }

  double* pixel(std::int32_t row, std::int32_t col) {
    return data_.data() + (static_cast<std::size_t>(row) * width_ + static_cast<std::size_t>(col)) * channels_;
  }
  const double* pixel(std::int32_t row, std::int32_t col) const {
    return data_.data() + (static_cast<std::size_t>(row) * width_ + static_cast<std::size_t>(col)) * channels_;
  }
  double& at(std::int32_t row, std::int32_t col, std::uint32_t ch) { return pixel(row, col)[ch]; }
  double at(std::int32_t row, std::int32_t col, std::uint32_t ch) const { return pixel(row, col)[ch]; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const FeaturePlane& other) const {
    return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
  }

  /// Throws if any value is NaN or infinite.
  void check_finite(const std::string& what) const;

 private:
  std::uint32_t height_ = 0, width_ = 0, channels_ = 0;
  std::vector<double> data_;
};

void save_fpln(const FeaturePlane& plane, const std::string& path);
FeaturePlane load_fpln(const std::string& path);

/// Learnable per-vertex embedding rows plus the background vector.
struct VertexEmbeddings {
  Eigen::MatrixXd e;    // n(V) x D
  Eigen::VectorXd e_b;  // D

  std::uint32_t dim() const { return static_cast<std::uint32_t>(e.cols()); }
  std::uint32_t vertex_count() const { return static_cast<std::uint32_t>(e.rows()); }
  void check_valid(std::uint32_t mesh_vertex_count) const;
};

void save_vemb(const VertexEmbeddings& emb, const std::string& path);
void save_vemb(const VertexEmbeddings& emb, std::ostream& os);
VertexEmbeddings load_vemb(const std::string& path);
VertexEmbeddings load_vemb(std::istream& is);

/// Pixels that received a vertex embedding directly, with the vertex that
/// won the depth test; row-major pixel order.
struct OccupiedPixels {
  std::vector<PixelCoord> pixels;
  std::vector<std::uint32_t> vertices;
  std::size_t size() const { return pixels.size(); }
};

/// Depth test alone: which vertex owns each pixel. Collisions keep the
/// smallest depth (ties: smaller vertex index). Entries with no pixel
/// (behind camera / off grid) are skipped.
OccupiedPixels depth_test_winners(const std::vector<std::optional<PixelCoord>>& pixels,
                                  const std::vector<double>& depths,
                                  const std::vector<std::uint32_t>& vertex_ids);

/// Writes each projected vertex's embedding row at its pixel, using the
/// depth-test winners.
OccupiedPixels scatter_embeddings(FeaturePlane& plane,
                                  const std::vector<std::optional<PixelCoord>>& pixels,
                                  const std::vector<double>& depths,
                                  const std::vector<std::uint32_t>& vertex_ids,
                                  const VertexEmbeddings& emb);

/// Inverse-distance-weighted interpolation over the interior pixels.
/// knn indices refer to `occupied`; weights are 1/d normalized to sum 1.
void idw_fill(FeaturePlane& plane, const std::vector<PixelCoord>& interior, const KnnTable& knn,
              const VertexEmbeddings& emb, const OccupiedPixels& occupied);

/// Writes e_b at every masked pixel.
void background_fill(FeaturePlane& plane, const std::vector<PixelCoord>& mask,
                     const Eigen::VectorXd& e_b);

/// Per-pose geometry needed to assemble (and differentiate) the dense
/// feature: everything the preprocessing stage caches for one frame.
struct FrameGeometry {
  std::uint64_t fingerprint = 0;
  std::vector<std::uint32_t> visible;                // sorted vertex indices
  std::vector<std::optional<PixelCoord>> pixels;     // per visible vertex
  std::vector<double> depths;                        // per visible vertex
  OccupiedPixels occupied;                           // depth-test winners
  std::vector<PixelCoord> interior;                  // row-major
  KnnTable knn;                                      // queries == interior
};

struct DenseFeature {
  FeaturePlane plane;
  std::size_t occupied_count = 0;
  std::size_t interior_count = 0;
  std::size_t background_count = 0;
};

/// Assembles f = scatter + IDW interior + background, exactly the linear
/// map of (e, e_b) the frame geometry defines. `expected_fingerprint`
/// guards against a cache built for different inputs.
DenseFeature build_dense_feature(const FrameGeometry& frame, const VertexEmbeddings& emb,
                                 const Intrinsics& intr, std::uint64_t expected_fingerprint);

/// Transpose of the linear map: scatters a plane-sized gradient back onto
/// grad_e / grad_eb (accumulating).
void accumulate_embedding_grads(const FeaturePlane& plane_grad, const FrameGeometry& frame,
                                Eigen::MatrixXd& grad_e, Eigen::VectorXd& grad_eb);

}  // namespace meshreg
