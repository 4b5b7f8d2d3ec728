#include "meshreg/geometry.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace meshreg {

namespace {

[[noreturn]] void parse_fail(const std::string& path, std::size_t line_no, const std::string& msg) {
  throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + msg);
}

}  // namespace

void TriMesh::validate() const {
  if (vertices.size() < 3) {
    throw std::invalid_argument("TriMesh: need at least 3 vertices, have " +
                                std::to_string(vertices.size()));
  }
  const std::uint32_t n = static_cast<std::uint32_t>(vertices.size());
  for (std::size_t f = 0; f < faces.size(); ++f) {
    const auto& face = faces[f];
    for (std::uint32_t idx : face) {
      if (idx >= n) {
        throw std::invalid_argument("TriMesh: face " + std::to_string(f) + " references vertex " +
                                    std::to_string(idx) + " but mesh has " + std::to_string(n));
      }
    }
    if (face[0] == face[1] || face[1] == face[2] || face[0] == face[2]) {
      throw std::invalid_argument("TriMesh: face " + std::to_string(f) +
                                  " repeats a vertex index");
    }
  }
}

double TriMesh::bbox_diagonal() const {
  if (vertices.empty()) return 0.0;
  Vec3 lo = vertices.front(), hi = vertices.front();
  for (const Vec3& v : vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  return (hi - lo).norm();
}

void CameraPose::validate() const {
  const Mat3 gram = rotation.transpose() * rotation;
  if ((gram - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9) {
    throw std::invalid_argument("CameraPose: rotation is not orthonormal within 1e-9");
  }
  if (std::abs(rotation.determinant() - 1.0) > 1e-9) {
    throw std::invalid_argument("CameraPose: rotation determinant is not +1 within 1e-9");
  }
}

CameraPose look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up);
  if (right.norm() < 1e-12) {
    // Looking straight along the up hint; pick any perpendicular axis.
    right = forward.cross(Vec3(1, 0, 0));
    if (right.norm() < 1e-12) right = forward.cross(Vec3(0, 0, 1));
  }
  right.normalize();
  const Vec3 down = forward.cross(right);  // +y grows with image rows

  CameraPose pose;
  pose.rotation.row(0) = right.transpose();
  pose.rotation.row(1) = down.transpose();
  pose.rotation.row(2) = forward.transpose();
  pose.translation = -pose.rotation * eye;
  return pose;
}

void Intrinsics::validate() const {
  if (!(focal_x > 0) || !(focal_y > 0)) {
    throw std::invalid_argument("Intrinsics: focal lengths must be positive");
  }
  if (principal_x < 0 || principal_x >= static_cast<double>(width) || principal_y < 0 ||
      principal_y >= static_cast<double>(height)) {
    throw std::invalid_argument("Intrinsics: principal point outside the grid");
  }
}

Intrinsics make_intrinsics(std::uint32_t width, std::uint32_t height, double fov_deg) {
  if (!(fov_deg > 0.0) || !(fov_deg < 180.0)) {
    throw std::invalid_argument("make_intrinsics: fov must lie in (0, 180) degrees, got " +
                                std::to_string(fov_deg));
  }
  const double half = fov_deg * std::numbers::pi / 360.0;
  Intrinsics intr;
  intr.focal_x = intr.focal_y = (static_cast<double>(width) / 2.0) / std::tan(half);
  intr.principal_x = (static_cast<double>(width) - 1.0) / 2.0;
  intr.principal_y = (static_cast<double>(height) - 1.0) / 2.0;
  intr.width = width;
  intr.height = height;
  intr.validate();
  return intr;
}

std::vector<std::optional<ProjectedPoint>> perspective_project(const std::vector<Vec3>& points,
                                                               const CameraPose& pose,
                                                               const Intrinsics& intr) {
  std::vector<std::optional<ProjectedPoint>> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3 cam = pose.to_camera(points[i]);
    if (!(cam.z() > 0.0)) {
      out[i] = std::nullopt;
      continue;
    }
    ProjectedPoint p;
    p.xy.x() = intr.focal_x * cam.x() / cam.z() + intr.principal_x;
    p.xy.y() = intr.focal_y * cam.y() / cam.z() + intr.principal_y;
    p.depth = cam.z();
    out[i] = p;
  }
  return out;
}

namespace {

// round-half-away-from-zero
double round_away(double v) { return std::round(v); }

}  // namespace

std::optional<PixelCoord> round_to_grid(const Vec2& coord, const Intrinsics& intr) {
  const double col = round_away(coord.x());
  const double row = round_away(coord.y());
  if (col < 0 || col >= static_cast<double>(intr.width) || row < 0 ||
      row >= static_cast<double>(intr.height)) {
    return std::nullopt;
  }
  return PixelCoord{static_cast<std::int32_t>(row), static_cast<std::int32_t>(col)};
}

TriMesh load_obj(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open OBJ file: " + path);

  TriMesh mesh;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    // strip comments and surrounding whitespace
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag)) continue;

    if (tag == "v") {
      Vec3 v;
      if (!(ss >> v.x() >> v.y() >> v.z())) {
        parse_fail(path, line_no, "malformed vertex record");
      }
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<std::uint32_t> poly;
      std::string tok;
      while (ss >> tok) {
        // accept v, v/vt, v/vt/vn forms; only the vertex index is used
        const std::string head = tok.substr(0, tok.find('/'));
        long idx = 0;
        try {
          idx = std::stol(head);
        } catch (const std::exception&) {
          parse_fail(path, line_no, "malformed face index '" + tok + "'");
        }
        if (idx < 1 || static_cast<std::size_t>(idx) > mesh.vertices.size()) {
          parse_fail(path, line_no,
                     "face index " + std::to_string(idx) + " out of range (have " +
                         std::to_string(mesh.vertices.size()) + " vertices)");
        }
        poly.push_back(static_cast<std::uint32_t>(idx - 1));
      }
      if (poly.size() < 3) parse_fail(path, line_no, "face with fewer than 3 vertices");
      for (std::size_t k = 1; k + 1 < poly.size(); ++k) {
        mesh.faces.push_back({poly[0], poly[k], poly[k + 1]});
      }
    } else {
      parse_fail(path, line_no, "unsupported record '" + tag + "' (only v/f are accepted)");
    }
  }
  mesh.validate();
  return mesh;
}

void save_obj(const TriMesh& mesh, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.precision(17);
  for (const Vec3& v : mesh.vertices) {
    os << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  }
  for (const auto& f : mesh.faces) {
    os << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  }
}

CameraRig load_camera_rig(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open camera rig file: " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("camera rig " + path + ": " + e.what());
  }

  CameraRig rig;
  rig.fov_deg = doc.at("fov_deg").get<double>();
  const auto width = doc.at("width").get<std::uint32_t>();
  const auto height = doc.at("height").get<std::uint32_t>();
  rig.intrinsics = make_intrinsics(width, height, rig.fov_deg);

  for (const auto& p : doc.at("poses")) {
    const auto rot = p.at("rotation").get<std::vector<double>>();
    const auto trans = p.at("translation").get<std::vector<double>>();
    if (rot.size() != 9 || trans.size() != 3) {
      throw std::runtime_error("camera rig " + path +
                               ": pose needs 9 rotation and 3 translation numbers");
    }
    CameraPose pose;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) pose.rotation(r, c) = rot[static_cast<std::size_t>(3 * r + c)];
    pose.translation = Vec3(trans[0], trans[1], trans[2]);
    pose.validate();
    rig.poses.push_back(pose);
  }
  return rig;
}

TriMesh make_icosphere(int subdivisions) {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  TriMesh mesh;
  mesh.vertices = {{-1, phi, 0}, {1, phi, 0},  {-1, -phi, 0}, {1, -phi, 0},
                   {0, -1, phi}, {0, 1, phi},  {0, -1, -phi}, {0, 1, -phi},
                   {phi, 0, -1}, {phi, 0, 1},  {-phi, 0, -1}, {-phi, 0, 1}};
  for (Vec3& v : mesh.vertices) v.normalize();
  mesh.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};

  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> midpoint;
    const auto mid = [&](std::uint32_t a, std::uint32_t b) -> std::uint32_t {
      const auto key = a < b ? std::make_pair(a, b) : std::make_pair(b, a);
      const auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      const Vec3 m = (mesh.vertices[a] + mesh.vertices[b]).normalized();
      mesh.vertices.push_back(m);
      const std::uint32_t idx = static_cast<std::uint32_t>(mesh.vertices.size() - 1);
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<std::array<std::uint32_t, 3>> faces;
    faces.reserve(mesh.faces.size() * 4);
    for (const auto& f : mesh.faces) {
      const std::uint32_t ab = mid(f[0], f[1]);
      const std::uint32_t bc = mid(f[1], f[2]);
      const std::uint32_t ca = mid(f[2], f[0]);
      faces.push_back({f[0], ab, ca});
      faces.push_back({f[1], bc, ab});
      faces.push_back({f[2], ca, bc});
      faces.push_back({ab, bc, ca});
    }
    mesh.faces = std::move(faces);
  }
  return mesh;
}

CameraRig make_ring_rig(std::size_t pose_count, double radius, std::uint32_t width,
                        std::uint32_t height, double fov_deg) {
  CameraRig rig;
  rig.fov_deg = fov_deg;
  rig.intrinsics = make_intrinsics(width, height, fov_deg);
  for (std::size_t i = 0; i < pose_count; ++i) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(i) /
                         static_cast<double>(pose_count);
    const Vec3 eye(radius * std::sin(angle), 0.0, radius * std::cos(angle));
    rig.poses.push_back(look_at(eye, Vec3::Zero()));
  }
  return rig;
}

void save_camera_rig(const CameraRig& rig, const std::string& path) {
  nlohmann::json doc;
  doc["fov_deg"] = rig.fov_deg;
  doc["width"] = rig.intrinsics.width;
  doc["height"] = rig.intrinsics.height;
  doc["poses"] = nlohmann::json::array();
  for (const CameraPose& pose : rig.poses) {
    std::vector<double> rot(9);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) rot[static_cast<std::size_t>(3 * r + c)] = pose.rotation(r, c);
    doc["poses"].push_back({{"rotation", rot},
                            {"translation", {pose.translation.x(), pose.translation.y(),
                                             pose.translation.z()}}});
  }
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << doc.dump(2) << '\n';
}

}  // namespace meshreg
