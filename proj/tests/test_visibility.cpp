#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "meshreg/visibility.hpp"
#include "support/testutil.hpp"

using namespace meshreg;

namespace {

TriMesh single_triangle() {
  TriMesh mesh;
  mesh.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  mesh.faces = {{0, 1, 2}};
  return mesh;
}

/// Nearest hit by exhaustive iteration; ties go to the smaller triangle
/// index, matching the BVH contract.
std::optional<RayHit> brute_first_hit(const TriMesh& mesh, const Vec3& origin, const Vec3& dir) {
  std::optional<RayHit> best;
  for (std::uint32_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& face = mesh.faces[f];
    const auto t = ray_triangle(origin, dir, mesh.vertices[face[0]], mesh.vertices[face[1]],
                                mesh.vertices[face[2]]);
    if (!t) continue;
    if (!best || *t < best->t || (*t == best->t && f < best->triangle)) {
      best = RayHit{f, *t};
    }
  }
  return best;
}

void check_box_containment(const Bvh& bvh, std::int32_t node_id) {
  const auto& node = bvh.nodes()[static_cast<std::size_t>(node_id)];
  if (node.is_leaf()) return;
  for (const std::int32_t child : {node.left, node.right}) {
    const auto& c = bvh.nodes()[static_cast<std::size_t>(child)];
    for (int axis = 0; axis < 3; ++axis) {
      CHECK(c.box_min[axis] >= node.box_min[axis] - 1e-12);
      CHECK(c.box_max[axis] <= node.box_max[axis] + 1e-12);
    }
    check_box_containment(bvh, child);
  }
}

}  // namespace

TEST_CASE("build_bvh: one triangle gives a single leaf") {
  const Bvh bvh = build_bvh(single_triangle());
  REQUIRE(bvh.nodes().size() == 1);
  CHECK(bvh.nodes()[0].is_leaf());
  CHECK(bvh.nodes()[0].count == 1);
}

TEST_CASE("build_bvh: every triangle lands in exactly one leaf") {
  const TriMesh ico = make_icosphere(0);  // 20 triangles
  const Bvh bvh = build_bvh(ico);
  std::vector<std::uint32_t> order = bvh.triangle_order();
  std::sort(order.begin(), order.end());
  std::vector<std::uint32_t> expected(ico.faces.size());
  std::iota(expected.begin(), expected.end(), 0u);
  CHECK(order == expected);

  std::size_t leaf_total = 0;
  for (const auto& node : bvh.nodes()) {
    if (node.is_leaf()) {
      CHECK(node.count <= Bvh::kLeafSize);
      leaf_total += node.count;
    }
  }
  CHECK(leaf_total == ico.faces.size());
  check_box_containment(bvh, 0);
}

TEST_CASE("build_bvh rejects empty meshes") {
  TriMesh empty;
  empty.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  CHECK_THROWS_AS(build_bvh(empty), std::invalid_argument);
}

TEST_CASE("ray_first_hit: perpendicular ray through a centroid") {
  const TriMesh mesh = single_triangle();
  const Bvh bvh = build_bvh(mesh);
  const Vec3 origin(1.0 / 3, 1.0 / 3, 5.0);
  const auto hit = ray_first_hit(bvh, origin, Vec3(0, 0, -1));
  REQUIRE(hit.has_value());
  CHECK(hit->triangle == 0);
  CHECK(hit->t == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("ray_first_hit: ray parallel to the triangle plane misses") {
  const Bvh bvh = build_bvh(single_triangle());
  CHECK_FALSE(ray_first_hit(bvh, {0.2, 0.2, 1.0}, Vec3(1, 0, 0)).has_value());
}

TEST_CASE("ray_first_hit rejects non-unit directions") {
  const Bvh bvh = build_bvh(single_triangle());
  CHECK_THROWS_AS(ray_first_hit(bvh, {0, 0, 5}, Vec3(0, 0, -2)), std::invalid_argument);
}

TEST_CASE("ray queries agree with the brute-force oracle on an icosphere") {
  const TriMesh sphere = make_icosphere(3);  // 1280 triangles
  const Bvh bvh = build_bvh(sphere);
  Rng rng(2024);
  std::size_t hits = 0;
  for (int i = 0; i < 1000; ++i) {
    Vec3 origin(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
    if (origin.norm() < 1.2) origin *= 3.0;  // keep origins outside
    Vec3 dir(rng.normal(), rng.normal(), rng.normal());
    dir.normalize();
    const auto fast = ray_first_hit(bvh, origin, dir);
    const auto slow = brute_first_hit(sphere, origin, dir);
    REQUIRE(fast.has_value() == slow.has_value());
    if (fast) {
      CHECK(fast->triangle == slow->triangle);
      CHECK(fast->t == slow->t);
      ++hits;
    }
  }
  CHECK(hits > 100);  // the sample actually exercises intersections
}

TEST_CASE("visible_vertices: lone triangle facing the camera") {
  const TriMesh mesh = single_triangle();
  const Bvh bvh = build_bvh(mesh);
  const CameraPose pose = look_at({0, 0, 2}, {0.3, 0.3, 0});
  const VisibleSet visible = visible_vertices(mesh, pose, bvh);
  CHECK(visible == VisibleSet{0, 1, 2});
  CHECK(visible == brute_force_visible(mesh, pose));
}

TEST_CASE("visible_vertices: near quad occludes a small far quad") {
  TriMesh mesh;
  // near quad at z=1 spanning [-0.5,0.5]^2, far quad at z=0 spanning [-0.2,0.2]^2
  mesh.vertices = {{-0.5, -0.5, 1}, {0.5, -0.5, 1}, {0.5, 0.5, 1}, {-0.5, 0.5, 1},
                   {-0.2, -0.2, 0}, {0.2, -0.2, 0}, {0.2, 0.2, 0}, {-0.2, 0.2, 0}};
  mesh.faces = {{0, 1, 2}, {0, 2, 3}, {4, 5, 6}, {4, 6, 7}};
  const CameraPose pose = look_at({0, 0, 3}, {0, 0, 0});
  const Bvh bvh = build_bvh(mesh);

  const VisibleSet visible = visible_vertices(mesh, pose, bvh);
  CHECK(visible == brute_force_visible(mesh, pose));
  // near quad fully visible, far quad fully hidden behind it
  CHECK(visible == VisibleSet{0, 1, 2, 3});
}

TEST_CASE("visible_vertices: icosphere from +z matches the oracle and the front cap") {
  const TriMesh sphere = make_icosphere(2);  // 162 vertices
  const Bvh bvh = build_bvh(sphere);
  const CameraPose pose = look_at({0, 0, 3}, {0, 0, 0});

  const VisibleSet visible = visible_vertices(sphere, pose, bvh);
  CHECK(visible == brute_force_visible(sphere, pose));

  // approximately the +z cap: from distance 3 the horizon sits at z = 1/3
  std::vector<char> is_visible(sphere.vertices.size(), 0);
  for (std::uint32_t v : visible) is_visible[v] = 1;
  for (std::size_t i = 0; i < sphere.vertices.size(); ++i) {
    if (sphere.vertices[i].z() > 0.45) CHECK(is_visible[i]);
    if (sphere.vertices[i].z() < 0.20) CHECK_FALSE(is_visible[i]);
  }
}

TEST_CASE("visible_vertices equals brute_force_visible on random poses") {
  const TriMesh sphere = make_icosphere(2);
  const Bvh bvh = build_bvh(sphere);
  const CameraRig rig = testutil::random_rig(6, 3.5, 64, 64, 30.0, 99);
  for (const CameraPose& pose : rig.poses) {
    CHECK(visible_vertices(sphere, pose, bvh) == brute_force_visible(sphere, pose));
  }
}

TEST_CASE("deleting triangles never shrinks the visible set") {
  const TriMesh sphere = make_icosphere(1);
  const Bvh bvh = build_bvh(sphere);
  const CameraPose pose = look_at({0.5, 0.8, 3.0}, {0, 0, 0});
  const VisibleSet base = visible_vertices(sphere, pose, bvh);

  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    TriMesh pruned = sphere;
    pruned.faces.erase(pruned.faces.begin() +
                       static_cast<std::ptrdiff_t>(rng.uniform_index(pruned.faces.size())));
    const VisibleSet after = visible_vertices(pruned, pose, build_bvh(pruned));
    CHECK(std::includes(after.begin(), after.end(), base.begin(), base.end()));
  }
}

TEST_CASE("visibility is deterministic across repeated runs") {
  const TriMesh sphere = make_icosphere(2);
  const Bvh bvh = build_bvh(sphere);
  const CameraPose pose = look_at({1.2, -0.7, 3.1}, {0, 0, 0});
  const VisibleSet a = visible_vertices(sphere, pose, bvh);
  const VisibleSet b = visible_vertices(sphere, pose, bvh);
  const VisibleSet c = visible_vertices(sphere, pose, build_bvh(sphere));
  CHECK(a == b);
  CHECK(a == c);
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());
}
