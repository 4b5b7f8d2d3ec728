#include "meshreg/visibility.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "meshreg/parallel.hpp"

namespace meshreg {

namespace {

struct BuildEntry {
  std::uint32_t index;
  Vec3 centroid;
  Vec3 box_min, box_max;
};

void grow(Vec3& lo, Vec3& hi, const Vec3& p) {
  lo = lo.cwiseMin(p);
  hi = hi.cwiseMax(p);
}

// slab test against an AABB; returns false when the ray misses or the box
// lies beyond t_max
bool ray_box(const Vec3& origin, const Vec3& inv_dir, const Vec3& lo, const Vec3& hi,
             double t_max) {
  double t0 = 0.0, t1 = t_max;
  for (int axis = 0; axis < 3; ++axis) {
    const double inv = inv_dir[axis];
    double near = (lo[axis] - origin[axis]) * inv;
    double far = (hi[axis] - origin[axis]) * inv;
    if (inv < 0.0) std::swap(near, far);
    t0 = std::max(t0, near);
    t1 = std::min(t1, far);
    if (t0 > t1) return false;
  }
  return true;
}

void check_unit(const Vec3& dir) {
  if (std::abs(dir.norm() - 1.0) > 1e-9) {
    throw std::invalid_argument("ray direction must be unit length within 1e-9, |dir| = " +
                                std::to_string(dir.norm()));
  }
}

}  // namespace

std::optional<double> ray_triangle(const Vec3& origin, const Vec3& dir, const Vec3& a,
                                   const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a;
  const Vec3 e2 = c - a;
  const Vec3 pvec = dir.cross(e2);
  const double det = e1.dot(pvec);
  if (std::abs(det) < 1e-14) return std::nullopt;  // parallel to the plane
  const double inv_det = 1.0 / det;
  const Vec3 tvec = origin - a;
  const double u = tvec.dot(pvec) * inv_det;
  if (u < 0.0 || u > 1.0) return std::nullopt;
  const Vec3 qvec = tvec.cross(e1);
  const double v = dir.dot(qvec) * inv_det;
  if (v < 0.0 || u + v > 1.0) return std::nullopt;
  const double t = e2.dot(qvec) * inv_det;
  if (t <= kRayEps) return std::nullopt;
  return t;
}

Bvh build_bvh(const TriMesh& mesh) {
  mesh.validate();
  if (mesh.faces.empty()) throw std::invalid_argument("build_bvh: mesh has no faces");

  std::vector<BuildEntry> entries(mesh.faces.size());
  for (std::uint32_t i = 0; i < mesh.faces.size(); ++i) {
    const auto& f = mesh.faces[i];
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3& b = mesh.vertices[f[1]];
    const Vec3& c = mesh.vertices[f[2]];
    BuildEntry e;
    e.index = i;
    e.centroid = (a + b + c) / 3.0;
    e.box_min = a.cwiseMin(b).cwiseMin(c);
    e.box_max = a.cwiseMax(b).cwiseMax(c);
    entries[i] = e;
  }

  Bvh bvh;
  bvh.nodes_.reserve(2 * entries.size());

  // recursive median split; ranges refer to `entries`
  auto build = [&](auto&& self, std::size_t lo, std::size_t hi) -> std::int32_t {
    Vec3 box_min = entries[lo].box_min, box_max = entries[lo].box_max;
    for (std::size_t i = lo + 1; i < hi; ++i) {
      grow(box_min, box_max, entries[i].box_min);
      grow(box_min, box_max, entries[i].box_max);
    }
    const std::int32_t node_id = static_cast<std::int32_t>(bvh.nodes_.size());
    bvh.nodes_.push_back({});
    bvh.nodes_[node_id].box_min = box_min;
    bvh.nodes_[node_id].box_max = box_max;

    const std::size_t count = hi - lo;
    if (count <= Bvh::kLeafSize) {
      bvh.nodes_[node_id].first = static_cast<std::uint32_t>(bvh.order_.size());
      bvh.nodes_[node_id].count = static_cast<std::uint32_t>(count);
      for (std::size_t i = lo; i < hi; ++i) bvh.order_.push_back(entries[i].index);
      return node_id;
    }

    const Vec3 extent = box_max - box_min;
    int axis = 0;
    if (extent.y() > extent.x()) axis = 1;
    if (extent.z() > extent[axis]) axis = 2;

    const std::size_t mid = lo + count / 2;
    std::nth_element(entries.begin() + static_cast<std::ptrdiff_t>(lo),
                     entries.begin() + static_cast<std::ptrdiff_t>(mid),
                     entries.begin() + static_cast<std::ptrdiff_t>(hi),
                     [axis](const BuildEntry& x, const BuildEntry& y) {
                       if (x.centroid[axis] != y.centroid[axis])
                         return x.centroid[axis] < y.centroid[axis];
                       return x.index < y.index;  // total order keeps the build deterministic
                     });

    const std::int32_t left = self(self, lo, mid);
    const std::int32_t right = self(self, mid, hi);
    bvh.nodes_[node_id].left = left;
    bvh.nodes_[node_id].right = right;
    return node_id;
  };
  build(build, 0, entries.size());

  bvh.triangles_.resize(bvh.order_.size());
  for (std::size_t i = 0; i < bvh.order_.size(); ++i) {
    const auto& f = mesh.faces[bvh.order_[i]];
    bvh.triangles_[i] = {mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]};
  }
  return bvh;
}

std::optional<RayHit> Bvh::first_hit(const Vec3& origin, const Vec3& unit_dir) const {
  const Vec3 inv_dir = unit_dir.cwiseInverse();
  std::optional<RayHit> best;
  double best_t = std::numeric_limits<double>::infinity();

  std::int32_t stack[64];
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const Node& node = nodes_[static_cast<std::size_t>(stack[--top])];
    if (!ray_box(origin, inv_dir, node.box_min, node.box_max, best_t)) continue;
    if (node.is_leaf()) {
      for (std::uint32_t i = node.first; i < node.first + node.count; ++i) {
        const Triangle& tri = triangles_[i];
        if (auto t = ray_triangle(origin, unit_dir, tri.a, tri.b, tri.c)) {
          const std::uint32_t tri_index = order_[i];
          if (*t < best_t || (*t == best_t && best && tri_index < best->triangle)) {
            best_t = *t;
            best = RayHit{tri_index, *t};
          }
        }
      }
    } else {
      stack[top++] = node.left;
      stack[top++] = node.right;
    }
  }
  return best;
}

bool Bvh::any_hit_before(const Vec3& origin, const Vec3& unit_dir, double t_max) const {
  const Vec3 inv_dir = unit_dir.cwiseInverse();
  std::int32_t stack[64];
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const Node& node = nodes_[static_cast<std::size_t>(stack[--top])];
    if (!ray_box(origin, inv_dir, node.box_min, node.box_max, t_max)) continue;
    if (node.is_leaf()) {
      for (std::uint32_t i = node.first; i < node.first + node.count; ++i) {
        const Triangle& tri = triangles_[i];
        if (auto t = ray_triangle(origin, unit_dir, tri.a, tri.b, tri.c)) {
          if (*t < t_max) return true;
        }
      }
    } else {
      stack[top++] = node.left;
      stack[top++] = node.right;
    }
  }
  return false;
}

std::optional<RayHit> ray_first_hit(const Bvh& bvh, const Vec3& origin, const Vec3& dir) {
  check_unit(dir);
  return bvh.first_hit(origin, dir);
}

namespace {

// Shared visibility rule for the BVH path and the brute-force oracle: the
// only difference between them is how candidate triangles are enumerated.
template <typename Occluded>
VisibleSet visible_impl(const TriMesh& mesh, const CameraPose& pose, Occluded&& occluded) {
  const Vec3 origin = pose.origin_world();
  const double eps_vis = kVisEpsScale * mesh.bbox_diagonal();

  std::vector<char> visible(mesh.vertices.size(), 0);
  parallel_for(mesh.vertices.size(), [&](std::size_t i) {
    const Vec3 to_vertex = mesh.vertices[i] - origin;
    const double dist = to_vertex.norm();
    if (dist < 1e-12) return;  // camera sitting on the vertex
    const Vec3 dir = to_vertex / dist;
    visible[i] = occluded(origin, dir, dist - eps_vis) ? 0 : 1;
  });

  VisibleSet out;
  for (std::uint32_t i = 0; i < visible.size(); ++i) {
    if (visible[i]) out.push_back(i);
  }
  return out;
}

}  // namespace

VisibleSet visible_vertices(const TriMesh& mesh, const CameraPose& pose, const Bvh& bvh) {
  return visible_impl(mesh, pose, [&](const Vec3& o, const Vec3& d, double t_max) {
    return bvh.any_hit_before(o, d, t_max);
  });
}

VisibleSet brute_force_visible(const TriMesh& mesh, const CameraPose& pose) {
  return visible_impl(mesh, pose, [&](const Vec3& o, const Vec3& d, double t_max) {
    for (const auto& f : mesh.faces) {
      if (auto t = ray_triangle(o, d, mesh.vertices[f[0]], mesh.vertices[f[1]],
                                mesh.vertices[f[2]])) {
        if (*t < t_max) return true;
      }
    }
    return false;
  });
}

}  // namespace meshreg
