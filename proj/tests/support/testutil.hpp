#pragma once

#include <Eigen/Geometry>
#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "meshreg/alphashape.hpp"
#include "meshreg/featuremap.hpp"
#include "meshreg/geometry.hpp"
#include "meshreg/registers.hpp"
#include "meshreg/rng.hpp"

namespace testutil {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<unsigned> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("meshreg_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  std::string dir() const { return path_.string(); }

 private:
  std::filesystem::path path_;
};

inline std::vector<char> read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline bool same_file_bytes(const std::string& a, const std::string& b) {
  return read_bytes(a) == read_bytes(b);
}

inline meshreg::FeaturePlane random_plane(std::uint32_t h, std::uint32_t w, std::uint32_t c,
                                          std::uint64_t seed, double scale = 1.0) {
  meshreg::FeaturePlane plane(h, w, c);
  meshreg::Rng rng(seed);
  for (double& v : plane.data()) v = rng.normal(0.0, scale);
  return plane;
}

inline Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed,
                                     double scale = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  meshreg::Rng rng(seed);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal(0.0, scale);
  }
  return m;
}

inline meshreg::VertexEmbeddings random_embeddings(std::uint32_t n, std::uint32_t d,
                                                   std::uint64_t seed) {
  meshreg::VertexEmbeddings emb;
  emb.e = random_matrix(n, d, seed);
  emb.e_b = random_matrix(d, 1, seed ^ 0x9e3779b9ULL).col(0);
  return emb;
}

// ----------------------------------------------------------------------
// Independent oracles. These re-derive expected values through a
// different code path than the implementation under test.

namespace oracle {

/// Plain six-loop cross-correlation with zero padding, bias and optional
/// leaky activation; summation order differs from the production kernel.
inline meshreg::FeaturePlane naive_conv(const meshreg::FeaturePlane& input,
                                        const meshreg::ConvLayer& layer) {
  const auto& spec = layer.spec;
  const std::int32_t h = static_cast<std::int32_t>(input.height());
  const std::int32_t w = static_cast<std::int32_t>(input.width());
  const std::int32_t k = static_cast<std::int32_t>(spec.kernel);
  const std::int32_t pad = static_cast<std::int32_t>(spec.pad());
  meshreg::FeaturePlane out(input.height(), input.width(), spec.out_channels);
  for (std::int32_t r = 0; r < h; ++r) {
    for (std::int32_t c = 0; c < w; ++c) {
      for (std::uint32_t o = 0; o < spec.out_channels; ++o) {
        long double acc = layer.bias[o];
        for (std::uint32_t i = 0; i < spec.in_channels; ++i) {
          for (std::int32_t ky = 0; ky < k; ++ky) {
            for (std::int32_t kx = 0; kx < k; ++kx) {
              const std::int32_t rr = r + ky - pad;
              const std::int32_t cc = c + kx - pad;
              if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
              acc += static_cast<long double>(input.at(rr, cc, i)) *
                     layer.weights[((static_cast<std::size_t>(o) * spec.in_channels + i) *
                                        spec.kernel +
                                    static_cast<std::uint32_t>(ky)) *
                                       spec.kernel +
                                   static_cast<std::uint32_t>(kx)];
            }
          }
        }
        double v = static_cast<double>(acc);
        if (spec.activated && v < 0) v *= meshreg::kLeakySlope;
        out.at(r, c, o) = v;
      }
    }
  }
  return out;
}

/// O(n^2) k-nearest-neighbor scan, ties broken by smaller site index.
inline meshreg::KnnTable exhaustive_knn(const std::vector<meshreg::Vec2>& sites,
                                        const std::vector<meshreg::Vec2>& queries,
                                        std::uint32_t k) {
  meshreg::KnnTable table;
  table.k = k;
  table.indices.resize(queries.size() * k);
  table.distances.resize(queries.size() * k);
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    std::vector<std::pair<double, std::uint32_t>> all(sites.size());
    for (std::size_t s = 0; s < sites.size(); ++s) {
      all[s] = {(queries[qi] - sites[s]).squaredNorm(), static_cast<std::uint32_t>(s)};
    }
    std::sort(all.begin(), all.end());
    for (std::uint32_t j = 0; j < k; ++j) {
      table.indices[qi * k + j] = all[j].second;
      table.distances[qi * k + j] = std::sqrt(all[j].first);
    }
  }
  return table;
}

/// Direct inverse-distance-weighted blend in long double.
inline std::vector<double> direct_idw(const std::vector<std::uint32_t>& site_vertices,
                                      const meshreg::KnnTable& knn, std::size_t query,
                                      const Eigen::MatrixXd& e) {
  const std::uint32_t k = knn.k;
  std::vector<long double> acc(static_cast<std::size_t>(e.cols()), 0.0L);
  long double wsum = 0;
  for (std::uint32_t j = 0; j < k; ++j) {
    const long double w = 1.0L / knn.distances[query * k + j];
    const std::uint32_t vertex = site_vertices[knn.indices[query * k + j]];
    wsum += w;
    for (Eigen::Index c = 0; c < e.cols(); ++c) {
      acc[static_cast<std::size_t>(c)] += w * static_cast<long double>(e(vertex, c));
    }
  }
  std::vector<double> out(acc.size());
  for (std::size_t c = 0; c < acc.size(); ++c) out[c] = static_cast<double>(acc[c] / wsum);
  return out;
}

/// Scalar Adam re-implementation for trajectory comparison.
struct ScalarAdam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<double> m, v;
  std::uint64_t t = 0;

  explicit ScalarAdam(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grads, double lr) {
    ++t;
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1 - beta1) * grads[i];
      v[i] = beta2 * v[i] + (1 - beta2) * grads[i] * grads[i];
      const double mh = m[i] / (1 - std::pow(beta1, static_cast<double>(t)));
      const double vh = v[i] / (1 - std::pow(beta2, static_cast<double>(t)));
      params[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
};

/// Convex hull area by monotone chain + shoelace.
inline double convex_hull_area(std::vector<meshreg::Vec2> pts) {
  std::sort(pts.begin(), pts.end(), [](const meshreg::Vec2& a, const meshreg::Vec2& b) {
    return a.x() != b.x() ? a.x() < b.x() : a.y() < b.y();
  });
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](const meshreg::Vec2& a, const meshreg::Vec2& b) {
                          return a.x() == b.x() && a.y() == b.y();
                        }),
            pts.end());
  const auto cross = [](const meshreg::Vec2& o, const meshreg::Vec2& a, const meshreg::Vec2& b) {
    return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
  };
  std::vector<meshreg::Vec2> hull(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  const std::size_t lower = k + 1;
  for (std::size_t i = pts.size() - 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k > 0 ? k - 1 : 0);
  double area = 0;
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const auto& p = hull[i];
    const auto& q = hull[(i + 1) % hull.size()];
    area += p.x() * q.y() - q.x() * p.y();
  }
  return 0.5 * std::abs(area);
}

}  // namespace oracle

/// Random rotation from a quaternion with normal components.
inline meshreg::Mat3 random_rotation(std::uint64_t seed) {
  meshreg::Rng rng(seed);
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q.toRotationMatrix();
}

/// Poses scattered on a sphere of the given radius, all looking at the
/// origin (deterministic in the seed).
inline meshreg::CameraRig random_rig(std::size_t pose_count, double radius, std::uint32_t width,
                                     std::uint32_t height, double fov_deg, std::uint64_t seed) {
  meshreg::CameraRig rig;
  rig.fov_deg = fov_deg;
  rig.intrinsics = meshreg::make_intrinsics(width, height, fov_deg);
  meshreg::Rng rng(seed);
  while (rig.poses.size() < pose_count) {
    meshreg::Vec3 dir(rng.normal(), rng.normal(), rng.normal());
    if (dir.norm() < 1e-6) continue;
    dir.normalize();
    rig.poses.push_back(meshreg::look_at(radius * dir, meshreg::Vec3::Zero()));
  }
  return rig;
}

struct PpmImage {
  std::uint32_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;
};

inline PpmImage read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::string magic;
  is >> magic;
  if (magic != "P6") throw std::runtime_error("not a P6 PPM: " + path);
  PpmImage img;
  unsigned maxval = 0;
  is >> img.width >> img.height >> maxval;
  is.get();  // single whitespace after header
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!is) throw std::runtime_error("truncated PPM: " + path);
  return img;
}

}  // namespace testutil
