#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <set>

#include "meshreg/featuremap.hpp"
#include "meshreg/pipeline.hpp"
#include "support/testutil.hpp"

using namespace meshreg;

namespace {

/// Desk-scale icosphere preprocessing shared by the assembly tests.
struct Scene {
  TriMesh mesh = make_icosphere(2);
  CameraRig rig = make_ring_rig(2, 4.0, 48, 48, 30.0);
  AdaptConfig config;
  PreprocessCache cache;

  Scene() {
    config.height = config.width = 48;
    config.d = 5;
    config.d_out = 4;
    config.k = 4;
    cache = preprocess_frames(mesh, rig, config);
    REQUIRE(cache.frames[0].valid);
  }

  const FrameGeometry& frame() const { return cache.frames[0].geometry; }
  std::uint64_t fingerprint() const {
    return frame_fingerprint(mesh, rig.poses[0], rig.intrinsics, config.alpha, config.k);
  }
};

}  // namespace

TEST_CASE("scatter_embeddings: one vertex writes its row") {
  FeaturePlane plane(8, 8, 3);
  const VertexEmbeddings emb = testutil::random_embeddings(5, 3, 1);
  const std::vector<std::optional<PixelCoord>> pixels = {PixelCoord{2, 6}};
  const auto occ = scatter_embeddings(plane, pixels, {1.5}, {4}, emb);
  REQUIRE(occ.size() == 1);
  CHECK(occ.pixels[0] == PixelCoord{2, 6});
  CHECK(occ.vertices[0] == 4);
  for (std::uint32_t ch = 0; ch < 3; ++ch) {
    CHECK(plane.at(2, 6, ch) == emb.e(4, ch));
  }
}

TEST_CASE("scatter_embeddings: colliding vertices keep the nearer depth") {
  FeaturePlane plane(8, 8, 2);
  const VertexEmbeddings emb = testutil::random_embeddings(3, 2, 2);
  const std::vector<std::optional<PixelCoord>> pixels = {PixelCoord{3, 3}, PixelCoord{3, 3}};
  const auto occ = scatter_embeddings(plane, pixels, {2.0, 1.0}, {0, 1}, emb);
  REQUIRE(occ.size() == 1);
  CHECK(occ.vertices[0] == 1);
  CHECK(plane.at(3, 3, 0) == emb.e(1, 0));

  SUBCASE("equal depths resolve to the smaller vertex index") {
    FeaturePlane plane2(8, 8, 2);
    const auto occ2 = scatter_embeddings(plane2, pixels, {2.0, 2.0}, {2, 1}, emb);
    CHECK(occ2.vertices[0] == 1);
  }
}

TEST_CASE("scatter_embeddings: channel mismatch is an error") {
  FeaturePlane plane(8, 8, 2);
  const VertexEmbeddings emb = testutil::random_embeddings(3, 5, 3);
  CHECK_THROWS_AS(scatter_embeddings(plane, {PixelCoord{0, 0}}, {1.0}, {0}, emb),
                  std::invalid_argument);
}

TEST_CASE("scatter on an icosphere projection: every occupied vector is a vertex row") {
  const Scene scene;
  const VertexEmbeddings emb =
      testutil::random_embeddings(static_cast<std::uint32_t>(scene.mesh.vertices.size()), 5, 4);
  FeaturePlane plane(48, 48, 5);
  const auto occ = scatter_embeddings(plane, scene.frame().pixels, scene.frame().depths,
                                      scene.frame().visible, emb);
  CHECK(occ.size() > 50);
  for (std::size_t i = 0; i < occ.size(); ++i) {
    const double* px = plane.pixel(occ.pixels[i].row, occ.pixels[i].col);
    for (std::uint32_t ch = 0; ch < 5; ++ch) {
      CHECK(px[ch] == emb.e(occ.vertices[i], ch));
    }
  }
}

TEST_CASE("idw_fill: identical neighbor embeddings reproduce the value") {
  VertexEmbeddings emb;
  emb.e = Eigen::MatrixXd::Zero(3, 2);
  emb.e << 0.5, -0.25, 0.5, -0.25, 0.5, -0.25;  // binary values keep the blend exact
  emb.e_b = Eigen::VectorXd::Zero(2);

  OccupiedPixels occ;
  occ.pixels = {{0, 0}, {0, 2}, {2, 1}};
  occ.vertices = {0, 1, 2};

  KnnTable knn;
  knn.k = 3;
  knn.indices = {0, 1, 2};
  knn.distances = {1.0, 2.0, 4.0};

  FeaturePlane plane(4, 4, 2);
  idw_fill(plane, {{1, 1}}, knn, emb, occ);
  CHECK(plane.at(1, 1, 0) == 0.5);
  CHECK(plane.at(1, 1, 1) == -0.25);

  // general values stay a convex combination of equal rows within roundoff
  emb.e.setConstant(0.7);
  idw_fill(plane, {{1, 1}}, knn, emb, occ);
  CHECK(plane.at(1, 1, 0) == doctest::Approx(0.7).epsilon(1e-14));
}

TEST_CASE("idw_fill: two equidistant neighbors average exactly") {
  VertexEmbeddings emb;
  emb.e = Eigen::MatrixXd::Zero(2, 2);
  emb.e << 1, 0, 0, 1;
  emb.e_b = Eigen::VectorXd::Zero(2);

  OccupiedPixels occ;
  occ.pixels = {{0, 0}, {0, 2}};
  occ.vertices = {0, 1};
  KnnTable knn;
  knn.k = 2;
  knn.indices = {0, 1};
  knn.distances = {1.0, 1.0};

  FeaturePlane plane(4, 4, 2);
  idw_fill(plane, {{0, 1}}, knn, emb, occ);
  CHECK(plane.at(0, 1, 0) == 0.5);
  CHECK(plane.at(0, 1, 1) == 0.5);
}

TEST_CASE("idw_fill: random configuration matches the direct formula") {
  const Scene scene;
  const auto& frame = scene.frame();
  const VertexEmbeddings emb =
      testutil::random_embeddings(static_cast<std::uint32_t>(scene.mesh.vertices.size()), 5, 6);

  FeaturePlane plane(48, 48, 5);
  idw_fill(plane, frame.interior, frame.knn, emb, frame.occupied);

  for (std::size_t qi = 0; qi < frame.interior.size(); qi += 97) {
    const auto expected = testutil::oracle::direct_idw(frame.occupied.vertices, frame.knn, qi, emb.e);
    const double* got = plane.pixel(frame.interior[qi].row, frame.interior[qi].col);
    for (std::uint32_t ch = 0; ch < 5; ++ch) {
      CHECK(std::abs(got[ch] - expected[ch]) < 1e-12);
    }
  }
}

TEST_CASE("idw_fill: zero distance is a hard error") {
  VertexEmbeddings emb = testutil::random_embeddings(2, 2, 7);
  OccupiedPixels occ;
  occ.pixels = {{0, 0}, {0, 1}};
  occ.vertices = {0, 1};
  KnnTable knn;
  knn.k = 2;
  knn.indices = {0, 1};
  knn.distances = {0.0, 1.0};
  FeaturePlane plane(4, 4, 2);
  CHECK_THROWS_AS(idw_fill(plane, {{1, 1}}, knn, emb, occ), std::runtime_error);
}

TEST_CASE("background_fill writes e_b bitwise") {
  FeaturePlane plane(6, 6, 3);
  Eigen::VectorXd e_b(3);
  e_b << 0.123456789, -4.2, 1e-7;
  std::vector<PixelCoord> mask;
  for (std::int32_t r = 0; r < 6; ++r) mask.push_back({r, 0});
  background_fill(plane, mask, e_b);
  for (const PixelCoord& pc : mask) {
    for (std::uint32_t ch = 0; ch < 3; ++ch) CHECK(plane.at(pc.row, pc.col, ch) == e_b(ch));
  }
  // zero vector case
  background_fill(plane, mask, Eigen::VectorXd::Zero(3));
  for (const PixelCoord& pc : mask) {
    for (std::uint32_t ch = 0; ch < 3; ++ch) CHECK(plane.at(pc.row, pc.col, ch) == 0.0);
  }
}

TEST_CASE("build_dense_feature: occupied + interior + background partition the grid") {
  const Scene scene;
  const VertexEmbeddings emb =
      testutil::random_embeddings(static_cast<std::uint32_t>(scene.mesh.vertices.size()), 5, 8);
  const DenseFeature df =
      build_dense_feature(scene.frame(), emb, scene.rig.intrinsics, scene.fingerprint());
  CHECK(df.occupied_count + df.interior_count + df.background_count == 48u * 48u);
  CHECK(df.occupied_count == scene.frame().occupied.size());
  CHECK(df.interior_count == scene.frame().interior.size());
  df.plane.check_finite("test");
}

TEST_CASE("build_dense_feature: fingerprint mismatch is refused") {
  const Scene scene;
  const VertexEmbeddings emb =
      testutil::random_embeddings(static_cast<std::uint32_t>(scene.mesh.vertices.size()), 5, 9);
  CHECK_THROWS_AS(
      build_dense_feature(scene.frame(), emb, scene.rig.intrinsics, scene.fingerprint() ^ 1u),
      std::runtime_error);
}

TEST_CASE("build_dense_feature from a reloaded cache is bitwise identical") {
  const Scene scene;
  const VertexEmbeddings emb =
      testutil::random_embeddings(static_cast<std::uint32_t>(scene.mesh.vertices.size()), 5, 10);

  const DenseFeature fresh =
      build_dense_feature(scene.frame(), emb, scene.rig.intrinsics, scene.fingerprint());

  testutil::TempDir tmp("cache");
  save_cache(scene.cache, tmp.file("c.pcch"));
  const PreprocessCache loaded = load_cache(tmp.file("c.pcch"));
  const DenseFeature cached = build_dense_feature(loaded.frames[0].geometry, emb,
                                                  scene.rig.intrinsics, scene.fingerprint());

  REQUIRE(fresh.plane.size() == cached.plane.size());
  CHECK(std::memcmp(fresh.plane.data().data(), cached.plane.data().data(),
                    fresh.plane.size() * sizeof(double)) == 0);
}

TEST_CASE("changing one embedding row touches only pixels that reference it") {
  const Scene scene;
  const auto& frame = scene.frame();
  const std::uint32_t n = static_cast<std::uint32_t>(scene.mesh.vertices.size());
  VertexEmbeddings emb = testutil::random_embeddings(n, 5, 11);

  const DenseFeature before =
      build_dense_feature(frame, emb, scene.rig.intrinsics, scene.fingerprint());

  const std::uint32_t target = frame.occupied.vertices[frame.occupied.size() / 2];
  emb.e.row(target).array() += 0.75;
  const DenseFeature after =
      build_dense_feature(frame, emb, scene.rig.intrinsics, scene.fingerprint());

  // pixels allowed to change: the occupied pixel of `target` plus interior
  // pixels whose knn references its site
  std::set<PixelCoord> may_change;
  std::set<std::uint32_t> target_sites;
  for (std::size_t i = 0; i < frame.occupied.size(); ++i) {
    if (frame.occupied.vertices[i] == target) {
      may_change.insert(frame.occupied.pixels[i]);
      target_sites.insert(static_cast<std::uint32_t>(i));
    }
  }
  for (std::size_t qi = 0; qi < frame.interior.size(); ++qi) {
    for (std::uint32_t j = 0; j < frame.knn.k; ++j) {
      if (target_sites.count(frame.knn.indices[qi * frame.knn.k + j])) {
        may_change.insert(frame.interior[qi]);
        break;
      }
    }
  }

  std::size_t changed = 0;
  for (std::int32_t r = 0; r < 48; ++r) {
    for (std::int32_t c = 0; c < 48; ++c) {
      bool diff = false;
      for (std::uint32_t ch = 0; ch < 5; ++ch) {
        if (before.plane.at(r, c, ch) != after.plane.at(r, c, ch)) diff = true;
      }
      if (diff) {
        ++changed;
        CHECK(may_change.count({r, c}) == 1);
      }
    }
  }
  CHECK(changed > 0);
}

TEST_CASE("build_dense_feature is linear in (e, e_b)") {
  const Scene scene;
  const std::uint32_t n = static_cast<std::uint32_t>(scene.mesh.vertices.size());
  const VertexEmbeddings e1 = testutil::random_embeddings(n, 5, 12);
  const VertexEmbeddings e2 = testutil::random_embeddings(n, 5, 13);
  const double a = 1.7, b = -0.6;

  VertexEmbeddings mixed;
  mixed.e = a * e1.e + b * e2.e;
  mixed.e_b = a * e1.e_b + b * e2.e_b;

  const auto p1 = build_dense_feature(scene.frame(), e1, scene.rig.intrinsics, scene.fingerprint());
  const auto p2 = build_dense_feature(scene.frame(), e2, scene.rig.intrinsics, scene.fingerprint());
  const auto pm =
      build_dense_feature(scene.frame(), mixed, scene.rig.intrinsics, scene.fingerprint());

  for (std::size_t i = 0; i < pm.plane.size(); ++i) {
    const double expected = a * p1.plane.data()[i] + b * p2.plane.data()[i];
    CHECK(std::abs(pm.plane.data()[i] - expected) < 1e-9);
  }
}

TEST_CASE("accumulate_embedding_grads is the transpose of the linear map") {
  const Scene scene;
  const auto& frame = scene.frame();
  const std::uint32_t n = static_cast<std::uint32_t>(scene.mesh.vertices.size());
  VertexEmbeddings emb = testutil::random_embeddings(n, 5, 14);

  // loss = <G, plane>, a generic linear functional
  const FeaturePlane g = testutil::random_plane(48, 48, 5, 15);
  const auto loss = [&](const VertexEmbeddings& e) {
    const DenseFeature df = build_dense_feature(frame, e, scene.rig.intrinsics, scene.fingerprint());
    double acc = 0;
    for (std::size_t i = 0; i < df.plane.size(); ++i) acc += g.data()[i] * df.plane.data()[i];
    return acc;
  };

  Eigen::MatrixXd grad_e = Eigen::MatrixXd::Zero(n, 5);
  Eigen::VectorXd grad_eb = Eigen::VectorXd::Zero(5);
  accumulate_embedding_grads(g, frame, grad_e, grad_eb);

  const double h = 1e-6;
  Rng pick(16);
  for (int trial = 0; trial < 24; ++trial) {
    const std::uint32_t row = static_cast<std::uint32_t>(pick.uniform_index(n));
    const std::uint32_t col = static_cast<std::uint32_t>(pick.uniform_index(5));
    const double saved = emb.e(row, col);
    emb.e(row, col) = saved + h;
    const double plus = loss(emb);
    emb.e(row, col) = saved - h;
    const double minus = loss(emb);
    emb.e(row, col) = saved;
    const double numeric = (plus - minus) / (2 * h);
    const double analytic = grad_e(row, col);
    CHECK(std::abs(analytic - numeric) <=
          1e-6 * std::max({std::abs(analytic), std::abs(numeric), 1e-3}));
  }
  for (std::uint32_t col = 0; col < 5; ++col) {
    const double saved = emb.e_b(col);
    emb.e_b(col) = saved + h;
    const double plus = loss(emb);
    emb.e_b(col) = saved - h;
    const double minus = loss(emb);
    emb.e_b(col) = saved;
    const double numeric = (plus - minus) / (2 * h);
    CHECK(std::abs(grad_eb(col) - numeric) <=
          1e-6 * std::max({std::abs(grad_eb(col)), std::abs(numeric), 1e-3}));
  }
}

TEST_CASE("FPLN round trip stores f32 values") {
  testutil::TempDir tmp("fpln");
  const FeaturePlane plane = testutil::random_plane(7, 9, 3, 17);
  save_fpln(plane, tmp.file("p.fpln"));
  const FeaturePlane loaded = load_fpln(tmp.file("p.fpln"));
  REQUIRE(loaded.height() == 7);
  REQUIRE(loaded.width() == 9);
  REQUIRE(loaded.channels() == 3);
  for (std::size_t i = 0; i < plane.size(); ++i) {
    CHECK(loaded.data()[i] == static_cast<double>(static_cast<float>(plane.data()[i])));
  }
}

TEST_CASE("VEMB round trip") {
  testutil::TempDir tmp("vemb");
  const VertexEmbeddings emb = testutil::random_embeddings(11, 4, 18);
  save_vemb(emb, tmp.file("e.vemb"));
  const VertexEmbeddings loaded = load_vemb(tmp.file("e.vemb"));
  REQUIRE(loaded.vertex_count() == 11);
  REQUIRE(loaded.dim() == 4);
  for (Eigen::Index r = 0; r < 11; ++r) {
    for (Eigen::Index c = 0; c < 4; ++c) {
      CHECK(loaded.e(r, c) == static_cast<double>(static_cast<float>(emb.e(r, c))));
    }
  }
  for (Eigen::Index c = 0; c < 4; ++c) {
    CHECK(loaded.e_b(c) == static_cast<double>(static_cast<float>(emb.e_b(c))));
  }
}
