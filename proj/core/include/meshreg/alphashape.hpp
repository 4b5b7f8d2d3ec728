#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "meshreg/geometry.hpp"

namespace meshreg {

/// Delaunay triangulation of a 2D point set. `points` is the processed
/// input: exact duplicates removed, near-duplicates (< 1e-9 apart)
/// deterministically jittered by at most 1e-9. Triangles are CCW.
struct Triangulation2D {
  std::vector<Vec2> points;
  std::vector<std::array<std::uint32_t, 3>> triangles;
};

/// Incremental Bowyer-Watson with lexicographic insertion order followed
/// by a Lawson flip cleanup pass. Throws if fewer than 3 distinct points
/// remain or all points are collinear.
Triangulation2D delaunay_2d(const std::vector<Vec2>& points);

/// Circumcenter and circumradius of a triangle; nullopt for degenerate
/// (collinear) triangles.
std::optional<std::pair<Vec2, double>> circumcircle(const Vec2& a, const Vec2& b, const Vec2& c);

/// One simple closed CCW contour; closure is implied (first vertex is not
/// repeated at the end).
struct AlphaPolygon {
  std::vector<Vec2> vertices;
};

double polygon_area(const AlphaPolygon& poly);

/// Diagnostics filled by alpha_shape.
struct AlphaShapeInfo {
  std::size_t kept_triangles = 0;
  std::size_t component_count = 0;
  double min_circumradius = 0;
};

/// Alpha shape: keep Delaunay triangles with circumradius < 1/alpha
/// (alpha = 0 keeps everything, degenerating to the convex hull), then
/// trace the boundary of the largest-area kept component into a contour.
/// Throws when no triangle survives, naming the smallest circumradius.
AlphaPolygon alpha_shape(const std::vector<Vec2>& points, double alpha,
                         AlphaShapeInfo* info = nullptr);

enum class PolygonLocation { Inside, Boundary, Outside };

/// Even-odd ray-crossing test. Points within 1e-9 of an edge classify as
/// Boundary.
PolygonLocation point_in_polygon(const AlphaPolygon& poly, const Vec2& p);

/// All lattice points of the intrinsics grid that are inside or on the
/// polygon, minus `exclude`, in row-major order. Rows are classified in
/// parallel. Lattice point (row, col) corresponds to the continuous
/// coordinate (x = col, y = row).
std::vector<PixelCoord> interior_points(const AlphaPolygon& poly, const Intrinsics& intr,
                                        const std::vector<PixelCoord>& exclude);

/// Exact k-nearest-neighbor table: for each query, k site indices and
/// Euclidean distances in ascending (distance, index) order.
struct KnnTable {
  std::uint32_t k = 0;
  std::vector<std::uint32_t> indices;  // query-major, k per query
  std::vector<double> distances;

  std::size_t query_count() const { return k == 0 ? 0 : indices.size() / k; }
};

/// 2D kd-tree (median split, alternating axes) with deterministic
/// construction; ties on query distance break toward the smaller site
/// index. Throws if |sites| < k or a query coincides with a site.
KnnTable knn_projected(const std::vector<Vec2>& sites, const std::vector<Vec2>& queries,
                       std::uint32_t k);

}  // namespace meshreg
