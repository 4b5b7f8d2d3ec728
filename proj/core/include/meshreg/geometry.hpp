#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace meshreg {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Mat3 = Eigen::Matrix3d;

/// Triangle mesh: vertex positions in world units plus vertex-index triples.
/// The edge set is implicit in the faces; nothing downstream consumes it.
struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::uint32_t, 3>> faces;

  /// Throws if any face index is out of range, a face repeats an index,
  /// or the mesh has fewer than 3 vertices.
  void validate() const;

  /// Length of the axis-aligned bounding box diagonal.
  double bbox_diagonal() const;
};

/// World-to-camera rigid transform. `rotation` rows are the camera axes
/// expressed in world coordinates; +z looks into the scene, image rows
/// grow with +y.
struct CameraPose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  /// Orthonormality and det(+1) within 1e-9.
  void validate() const;

  Vec3 to_camera(const Vec3& p_world) const { return rotation * p_world + translation; }

  /// Camera origin expressed in world coordinates.
  Vec3 origin_world() const { return -rotation.transpose() * translation; }
};

/// Camera placed at `eye` looking at `target`, world up hint `up`.
CameraPose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3(0, 1, 0));

/// Pinhole intrinsics over a discrete H x W grid.
struct Intrinsics {
  double focal_x = 0, focal_y = 0;
  double principal_x = 0, principal_y = 0;
  std::uint32_t width = 0, height = 0;

  void validate() const;
};

/// Square-pixel intrinsics from a horizontal field of view.
/// focal = (width/2)/tan(fov/2); principal point at ((W-1)/2, (H-1)/2)
/// so the continuous pixel lattice is centered.
Intrinsics make_intrinsics(std::uint32_t width, std::uint32_t height, double fov_deg);

/// Integer grid location, row in [0, H), col in [0, W).
struct PixelCoord {
  std::int32_t row = 0;
  std::int32_t col = 0;

  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
  friend auto operator<=>(const PixelCoord&, const PixelCoord&) = default;
};

/// Continuous projection of one point: x ~ column axis, y ~ row axis,
/// depth = camera-space z.
struct ProjectedPoint {
  Vec2 xy = Vec2::Zero();
  double depth = 0;
};

/// Perspective projection of a point list. Points with camera-space depth
/// <= 0 yield an empty slot rather than a clamped value.
std::vector<std::optional<ProjectedPoint>> perspective_project(const std::vector<Vec3>& points,
                                                               const CameraPose& pose,
                                                               const Intrinsics& intr);

/// Round-half-away-from-zero per axis; out-of-grid coordinates map to nullopt.
std::optional<PixelCoord> round_to_grid(const Vec2& coord, const Intrinsics& intr);

/// Wavefront OBJ subset loader: `v` and `f` records, `#` comments,
/// 1-based indices, polygon faces fan-triangulated. Parse errors carry
/// the offending line number.
TriMesh load_obj(const std::string& path);

void save_obj(const TriMesh& mesh, const std::string& path);

/// Camera rig document: shared intrinsics (fov/width/height) plus a pose
/// list, each pose a row-major 3x3 rotation and a translation.
struct CameraRig {
  Intrinsics intrinsics;
  double fov_deg = 0;
  std::vector<CameraPose> poses;
};

CameraRig load_camera_rig(const std::string& path);
void save_camera_rig(const CameraRig& rig, const std::string& path);

/// Unit icosphere: subdivided icosahedron re-projected to the sphere.
/// Subdivision 0 is the icosahedron (12 vertices); 3 gives 642 vertices.
TriMesh make_icosphere(int subdivisions);

/// Cameras on a horizontal ring of the given radius, all looking at the
/// origin. Pose 0 sits on +z.
CameraRig make_ring_rig(std::size_t pose_count, double radius, std::uint32_t width,
                        std::uint32_t height, double fov_deg);

}  // namespace meshreg
