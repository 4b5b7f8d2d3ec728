#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "meshreg/geometry.hpp"

namespace meshreg {

/// Offset below a segment's far end within which a triangle does not
/// occlude; the epsilon keeps a vertex's own incident triangles (and exact
/// silhouette grazes) from hiding the vertex. Scaled by the mesh bounding
/// box diagonal.
inline constexpr double kVisEpsScale = 1e-4;

/// Minimum ray parameter accepted as a hit.
inline constexpr double kRayEps = 1e-7;

struct RayHit {
  std::uint32_t triangle = 0;
  double t = 0;
};

/// Axis-aligned bounding-box tree over mesh triangles. Construction is a
/// deterministic median split on the longest axis; leaves hold at most 4
/// triangles, and every triangle sits in exactly one leaf.
class Bvh {
 public:
  static constexpr std::uint32_t kLeafSize = 4;

  struct Node {
    Vec3 box_min, box_max;
    // interior: children indices; leaf: [first, first+count) into triangle order
    std::int32_t left = -1, right = -1;
    std::uint32_t first = 0, count = 0;
    bool is_leaf() const { return count > 0; }
  };

  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<std::uint32_t>& triangle_order() const { return order_; }

  /// Nearest intersection with t > kRayEps, or nullopt. Ties on t resolve
  /// to the smaller triangle index so traversal order cannot leak through.
  std::optional<RayHit> first_hit(const Vec3& origin, const Vec3& unit_dir) const;

  /// True if any triangle intersects the ray with t in (kRayEps, t_max).
  bool any_hit_before(const Vec3& origin, const Vec3& unit_dir, double t_max) const;

  friend Bvh build_bvh(const TriMesh& mesh);

 private:
  struct Triangle {
    Vec3 a, b, c;
  };

  std::vector<Node> nodes_;
  std::vector<std::uint32_t> order_;
  std::vector<Triangle> triangles_;  // in `order_` order
};

Bvh build_bvh(const TriMesh& mesh);

/// Moller-Trumbore ray/triangle test; returns t or nullopt.
std::optional<double> ray_triangle(const Vec3& origin, const Vec3& dir, const Vec3& a,
                                   const Vec3& b, const Vec3& c);

/// Nearest hit among all triangles; throws if `dir` is not unit length
/// within 1e-9.
std::optional<RayHit> ray_first_hit(const Bvh& bvh, const Vec3& origin, const Vec3& dir);

/// Sorted distinct vertex indices visible from the camera origin.
using VisibleSet = std::vector<std::uint32_t>;

/// A vertex is visible iff the segment from the camera origin to it meets
/// no triangle at t < |segment| - eps_vis, with eps_vis = kVisEpsScale *
/// bbox diagonal.
VisibleSet visible_vertices(const TriMesh& mesh, const CameraPose& pose, const Bvh& bvh);

/// Same contract via exhaustive triangle iteration. Testing oracle only.
VisibleSet brute_force_visible(const TriMesh& mesh, const CameraPose& pose);

}  // namespace meshreg
