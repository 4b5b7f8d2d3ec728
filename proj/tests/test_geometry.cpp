#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "meshreg/geometry.hpp"
#include "support/testutil.hpp"

using namespace meshreg;

TEST_CASE("load_obj: minimal triangle") {
  testutil::TempDir tmp("obj");
  {
    std::ofstream os(tmp.file("tri.obj"));
    os << "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n";
  }
  const TriMesh mesh = load_obj(tmp.file("tri.obj"));
  CHECK(mesh.vertices.size() == 3);
  REQUIRE(mesh.faces.size() == 1);
  CHECK(mesh.faces[0] == std::array<std::uint32_t, 3>{0, 1, 2});
}

TEST_CASE("load_obj: quad faces fan-triangulate") {
  testutil::TempDir tmp("obj");
  {
    std::ofstream os(tmp.file("quad.obj"));
    os << "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n";
    os << "# a comment line\n";
    os << "f 1 2 3 4\n";
  }
  const TriMesh mesh = load_obj(tmp.file("quad.obj"));
  CHECK(mesh.vertices.size() == 4);
  REQUIRE(mesh.faces.size() == 2);
  CHECK(mesh.faces[0] == std::array<std::uint32_t, 3>{0, 1, 2});
  CHECK(mesh.faces[1] == std::array<std::uint32_t, 3>{0, 2, 3});
}

TEST_CASE("load_obj: icosphere counts match a line-count oracle") {
  testutil::TempDir tmp("obj");
  const TriMesh sphere = make_icosphere(3);
  save_obj(sphere, tmp.file("sphere.obj"));

  // oracle: count records straight off the file
  std::ifstream is(tmp.file("sphere.obj"));
  std::size_t v_lines = 0, f_lines = 0;
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("v ", 0) == 0) ++v_lines;
    if (line.rfind("f ", 0) == 0) ++f_lines;
  }
  CHECK(v_lines == 642);
  CHECK(f_lines == 1280);

  const TriMesh loaded = load_obj(tmp.file("sphere.obj"));
  CHECK(loaded.vertices.size() == v_lines);
  CHECK(loaded.faces.size() == f_lines);
}

TEST_CASE("load_obj: diagnostics carry the line number") {
  testutil::TempDir tmp("obj");
  SUBCASE("malformed vertex") {
    std::ofstream(tmp.file("bad.obj")) << "v 0 0 0\nv 1 0\n";
    CHECK_THROWS_WITH_AS(load_obj(tmp.file("bad.obj")), doctest::Contains(":2:"),
                         std::runtime_error);
  }
  SUBCASE("face index out of range") {
    std::ofstream(tmp.file("bad.obj")) << "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n";
    CHECK_THROWS_WITH_AS(load_obj(tmp.file("bad.obj")), doctest::Contains(":4:"),
                         std::runtime_error);
  }
  SUBCASE("unsupported record") {
    std::ofstream(tmp.file("bad.obj")) << "v 0 0 0\nvn 0 0 1\n";
    CHECK_THROWS_AS(load_obj(tmp.file("bad.obj")), std::runtime_error);
  }
}

TEST_CASE("TriMesh invariants") {
  TriMesh mesh;
  mesh.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  mesh.faces = {{0, 1, 2}};
  CHECK_NOTHROW(mesh.validate());

  SUBCASE("face index out of range") {
    mesh.faces = {{0, 1, 3}};
    CHECK_THROWS_AS(mesh.validate(), std::invalid_argument);
  }
  SUBCASE("repeated face index") {
    mesh.faces = {{0, 1, 1}};
    CHECK_THROWS_AS(mesh.validate(), std::invalid_argument);
  }
  SUBCASE("too few vertices") {
    mesh.vertices.resize(2);
    mesh.faces.clear();
    CHECK_THROWS_AS(mesh.validate(), std::invalid_argument);
  }
}

TEST_CASE("make_intrinsics") {
  SUBCASE("90 degrees on a 296 grid") {
    const Intrinsics intr = make_intrinsics(296, 296, 90.0);
    CHECK(intr.focal_x == doctest::Approx(148.0).epsilon(1e-12));
    CHECK(intr.focal_y == doctest::Approx(148.0).epsilon(1e-12));
    CHECK(intr.principal_x == 147.5);
    CHECK(intr.principal_y == 147.5);
  }
  SUBCASE("53.13 degrees gives focal near 296") {
    const Intrinsics intr = make_intrinsics(296, 296, 53.13);
    const double expected = 148.0 / std::tan(53.13 / 2.0 * std::numbers::pi / 180.0);
    CHECK(intr.focal_x == doctest::Approx(expected).epsilon(1e-12));
    CHECK(std::abs(intr.focal_x - 296.0) < 0.01);
  }
  SUBCASE("64 grid at 90 degrees") {
    CHECK(make_intrinsics(64, 64, 90.0).focal_x == doctest::Approx(32.0).epsilon(1e-12));
  }
  SUBCASE("fov domain") {
    CHECK_THROWS_AS(make_intrinsics(64, 64, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(make_intrinsics(64, 64, 180.0), std::invalid_argument);
    CHECK_THROWS_AS(make_intrinsics(64, 64, -30.0), std::invalid_argument);
  }
}

TEST_CASE("perspective_project: on-axis point lands on the principal point") {
  const Intrinsics intr = make_intrinsics(128, 96, 47.0);
  const CameraPose pose;  // identity
  const auto out = perspective_project({{0, 0, 5}}, pose, intr);
  REQUIRE(out.size() == 1);
  REQUIRE(out[0].has_value());
  CHECK(out[0]->xy.x() == intr.principal_x);
  CHECK(out[0]->xy.y() == intr.principal_y);
  CHECK(out[0]->depth == 5.0);
}

TEST_CASE("perspective_project: hand-evaluated pinhole oracle") {
  // camera at (0,0,3) looking at the origin: right=(1,0,0), down=(0,-1,0),
  // forward=(0,0,-1); point (0.5,0,0) sits at camera coords (0.5,0,3)
  const CameraPose pose = look_at({0, 0, 3}, {0, 0, 0});
  const Intrinsics intr = make_intrinsics(296, 296, 90.0);
  const auto out = perspective_project({{0.5, 0, 0}}, pose, intr);
  REQUIRE(out[0].has_value());
  CHECK(out[0]->xy.x() == doctest::Approx(148.0 * 0.5 / 3.0 + 147.5).epsilon(1e-12));
  CHECK(out[0]->xy.y() == doctest::Approx(147.5).epsilon(1e-12));
  CHECK(out[0]->depth == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("perspective_project: non-positive depth is a per-point marker") {
  const CameraPose pose = look_at({0, 0, 3}, {0, 0, 0});
  const Intrinsics intr = make_intrinsics(64, 64, 60.0);
  const auto out = perspective_project({{0, 0, 3}, {0, 0, 5}, {0, 0, 0}}, pose, intr);
  CHECK_FALSE(out[0].has_value());  // exactly at the camera, z_cam = 0
  CHECK_FALSE(out[1].has_value());  // behind
  CHECK(out[2].has_value());
}

TEST_CASE("projection is invariant under a shared rigid transform") {
  const Intrinsics intr = make_intrinsics(296, 296, 40.0);
  const TriMesh sphere = make_icosphere(1);
  const CameraPose pose = look_at({0.3, -0.2, 3.2}, {0, 0, 0});

  const auto base = perspective_project(sphere.vertices, pose, intr);

  for (std::uint64_t seed : {11u, 12u, 13u}) {
    const Mat3 rot = testutil::random_rotation(seed);
    Rng rng(seed ^ 0xabcdu);
    const Vec3 shift(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));

    std::vector<Vec3> moved(sphere.vertices.size());
    for (std::size_t i = 0; i < moved.size(); ++i) moved[i] = rot * sphere.vertices[i] + shift;

    CameraPose moved_pose;
    moved_pose.rotation = pose.rotation * rot.transpose();
    moved_pose.translation = pose.translation - pose.rotation * rot.transpose() * shift;
    moved_pose.validate();

    const auto out = perspective_project(moved, moved_pose, intr);
    REQUIRE(out.size() == base.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      REQUIRE(out[i].has_value() == base[i].has_value());
      if (!out[i]) continue;
      CHECK(out[i]->xy.x() == doctest::Approx(base[i]->xy.x()).epsilon(1e-9));
      CHECK(out[i]->xy.y() == doctest::Approx(base[i]->xy.y()).epsilon(1e-9));
    }
  }
}

TEST_CASE("round_to_grid") {
  const Intrinsics intr = make_intrinsics(296, 296, 30.0);
  SUBCASE("nearest integer") {
    const auto pc = round_to_grid({10.4, 20.6}, intr);
    REQUIRE(pc.has_value());
    CHECK(pc->col == 10);
    CHECK(pc->row == 21);
  }
  SUBCASE("half rounds away from zero") {
    const auto pc = round_to_grid({10.5, 20.5}, intr);
    REQUIRE(pc.has_value());
    CHECK(pc->col == 11);
    CHECK(pc->row == 21);
  }
  SUBCASE("below bounds is out-of-grid") {
    CHECK_FALSE(round_to_grid({-0.6, 5.0}, intr).has_value());
    CHECK_FALSE(round_to_grid({5.0, 295.6}, intr).has_value());
  }
  SUBCASE("edge pixels stay in range") {
    const auto pc = round_to_grid({-0.4, 295.4}, intr);
    REQUIRE(pc.has_value());
    CHECK(pc->col == 0);
    CHECK(pc->row == 295);
  }
}

TEST_CASE("projected pixels always satisfy the PixelCoord bounds") {
  const Intrinsics intr = make_intrinsics(96, 80, 35.0);
  const TriMesh sphere = make_icosphere(2);
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    const CameraRig rig = testutil::random_rig(1, 4.0, 96, 80, 35.0, seed);
    const auto projected = perspective_project(sphere.vertices, rig.poses[0], intr);
    for (const auto& p : projected) {
      if (!p) continue;
      const auto pc = round_to_grid(p->xy, intr);
      if (!pc) continue;
      CHECK(pc->row >= 0);
      CHECK(pc->row < 80);
      CHECK(pc->col >= 0);
      CHECK(pc->col < 96);
    }
  }
}

TEST_CASE("round_to_grid o perspective_project is deterministic") {
  const Intrinsics intr = make_intrinsics(296, 296, 30.0);
  const TriMesh sphere = make_icosphere(2);
  const CameraPose pose = look_at({0, 0.4, 3.8}, {0, 0, 0});
  const auto a = perspective_project(sphere.vertices, pose, intr);
  const auto b = perspective_project(sphere.vertices, pose, intr);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].has_value() == b[i].has_value());
    if (!a[i]) continue;
    CHECK(a[i]->xy == b[i]->xy);
    const auto pa = round_to_grid(a[i]->xy, intr);
    const auto pb = round_to_grid(b[i]->xy, intr);
    CHECK(pa == pb);
  }
}

TEST_CASE("camera rig document round trip and validation") {
  testutil::TempDir tmp("rig");
  const CameraRig rig = make_ring_rig(4, 3.0, 128, 96, 42.0);
  save_camera_rig(rig, tmp.file("rig.json"));
  const CameraRig loaded = load_camera_rig(tmp.file("rig.json"));
  CHECK(loaded.poses.size() == 4);
  CHECK(loaded.intrinsics.width == 128);
  CHECK(loaded.intrinsics.height == 96);
  CHECK(loaded.fov_deg == 42.0);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK((loaded.poses[i].rotation - rig.poses[i].rotation).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((loaded.poses[i].translation - rig.poses[i].translation).cwiseAbs().maxCoeff() < 1e-15);
  }

  SUBCASE("non-orthonormal rotation is rejected") {
    std::ofstream os(tmp.file("bad.json"));
    os << R"({"fov_deg": 30, "width": 64, "height": 64,
             "poses": [{"rotation": [1,0,0, 0,2,0, 0,0,1], "translation": [0,0,0]}]})";
    os.close();
    CHECK_THROWS_AS(load_camera_rig(tmp.file("bad.json")), std::invalid_argument);
  }
}

TEST_CASE("look_at produces a proper rotation looking at the target") {
  for (std::uint64_t seed : {5u, 6u, 7u}) {
    Rng rng(seed);
    const Vec3 eye(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(2, 5));
    const Vec3 target(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const CameraPose pose = look_at(eye, target);
    CHECK_NOTHROW(pose.validate());
    // the target must land on the optical axis with positive depth
    const Vec3 cam = pose.to_camera(target);
    CHECK(std::abs(cam.x()) < 1e-12);
    CHECK(std::abs(cam.y()) < 1e-12);
    CHECK(cam.z() > 0);
    CHECK((pose.origin_world() - eye).norm() < 1e-12);
  }
}
