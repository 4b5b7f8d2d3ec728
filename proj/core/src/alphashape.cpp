#include "meshreg/alphashape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <set>
#include <stdexcept>

#include "meshreg/parallel.hpp"
#include "meshreg/rng.hpp"

namespace meshreg {

namespace {

using Tri = std::array<std::uint32_t, 3>;

long double cross2(const Vec2& o, const Vec2& a, const Vec2& b) {
  const long double ax = static_cast<long double>(a.x()) - o.x();
  const long double ay = static_cast<long double>(a.y()) - o.y();
  const long double bx = static_cast<long double>(b.x()) - o.x();
  const long double by = static_cast<long double>(b.y()) - o.y();
  return ax * by - ay * bx;
}

/// Positive when p lies strictly inside the circumcircle of CCW (a, b, c).
long double incircle_det(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& p) {
  const long double adx = static_cast<long double>(a.x()) - p.x();
  const long double ady = static_cast<long double>(a.y()) - p.y();
  const long double bdx = static_cast<long double>(b.x()) - p.x();
  const long double bdy = static_cast<long double>(b.y()) - p.y();
  const long double cdx = static_cast<long double>(c.x()) - p.x();
  const long double cdy = static_cast<long double>(c.y()) - p.y();
  const long double ad = adx * adx + ady * ady;
  const long double bd = bdx * bdx + bdy * bdy;
  const long double cd = cdx * cdx + cdy * cdy;
  return adx * (bdy * cd - cdy * bd) - ady * (bdx * cd - cdx * bd) + ad * (bdx * cdy - cdx * bdy);
}

struct EdgeKey {
  std::uint32_t a, b;  // a < b
  friend auto operator<=>(const EdgeKey&, const EdgeKey&) = default;
};

EdgeKey edge_key(std::uint32_t a, std::uint32_t b) {
  return a < b ? EdgeKey{a, b} : EdgeKey{b, a};
}

void orient_ccw(std::vector<Vec2>& pts, Tri& t) {
  if (cross2(pts[t[0]], pts[t[1]], pts[t[2]]) < 0) std::swap(t[1], t[2]);
}

/// Removes exact duplicates; points closer than 1e-9 get a deterministic
/// sub-1e-9 jitter so the triangulation never sees coincident sites.
std::vector<Vec2> prepare_points(const std::vector<Vec2>& input) {
  std::vector<Vec2> pts;
  pts.reserve(input.size());
  std::set<std::pair<double, double>> seen;
  for (const Vec2& p : input) {
    if (seen.insert({p.x(), p.y()}).second) pts.push_back(p);
  }
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if ((pts[i] - pts[j]).norm() < 1e-9) {
        Rng rng(derive_seed(0x9d2c6f1bULL, "near-duplicate-jitter") ^ (i * 0x100000001b3ULL));
        pts[i].x() += rng.uniform(0.25e-9, 0.9e-9);
        pts[i].y() += rng.uniform(0.25e-9, 0.9e-9);
        break;
      }
    }
  }
  return pts;
}

struct Adjacency {
  // edge -> incident triangle indices (1 or 2 for a valid triangulation)
  std::map<EdgeKey, std::vector<std::uint32_t>> edges;
};

Adjacency build_adjacency(const std::vector<Tri>& tris, const std::vector<char>& alive) {
  Adjacency adj;
  for (std::uint32_t t = 0; t < tris.size(); ++t) {
    if (!alive.empty() && !alive[t]) continue;
    for (int e = 0; e < 3; ++e) {
      adj.edges[edge_key(tris[t][e], tris[t][(e + 1) % 3])].push_back(t);
    }
  }
  return adj;
}

}  // namespace

std::optional<std::pair<Vec2, double>> circumcircle(const Vec2& a, const Vec2& b, const Vec2& c) {
  const long double bx = static_cast<long double>(b.x()) - a.x();
  const long double by = static_cast<long double>(b.y()) - a.y();
  const long double cx = static_cast<long double>(c.x()) - a.x();
  const long double cy = static_cast<long double>(c.y()) - a.y();
  const long double d = 2.0L * (bx * cy - by * cx);
  if (d == 0.0L) return std::nullopt;
  const long double b2 = bx * bx + by * by;
  const long double c2 = cx * cx + cy * cy;
  const long double ux = (cy * b2 - by * c2) / d;
  const long double uy = (bx * c2 - cx * b2) / d;
  const double r = static_cast<double>(std::sqrt(ux * ux + uy * uy));
  return std::make_pair(Vec2(a.x() + static_cast<double>(ux), a.y() + static_cast<double>(uy)), r);
}

Triangulation2D delaunay_2d(const std::vector<Vec2>& input) {
  std::vector<Vec2> pts = prepare_points(input);
  if (pts.size() < 3) {
    throw std::invalid_argument("delaunay_2d: need at least 3 distinct points, have " +
                                std::to_string(pts.size()));
  }

  // deterministic insertion order
  std::sort(pts.begin(), pts.end(), [](const Vec2& p, const Vec2& q) {
    return p.x() != q.x() ? p.x() < q.x() : p.y() < q.y();
  });

  // collinearity check against the line through the two lexicographic extremes
  {
    const Vec2& p0 = pts.front();
    const Vec2& p1 = pts.back();
    const double scale = std::max((p1 - p0).norm(), 1.0);
    bool spanning = false;
    for (const Vec2& p : pts) {
      if (std::abs(static_cast<double>(cross2(p0, p1, p))) > 1e-12 * scale * scale) {
        spanning = true;
        break;
      }
    }
    if (!spanning) throw std::invalid_argument("delaunay_2d: all points are collinear");
  }

  // super-triangle well outside the data
  Vec2 lo = pts.front(), hi = pts.front();
  for (const Vec2& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const Vec2 center = 0.5 * (lo + hi);
  const double radius = std::max((hi - lo).norm(), 1.0) * 1e4;
  const std::uint32_t n_real = static_cast<std::uint32_t>(pts.size());
  std::vector<Vec2> work = pts;
  work.push_back(center + radius * Vec2(0.0, 2.2));
  work.push_back(center + radius * Vec2(-2.0, -1.3));
  work.push_back(center + radius * Vec2(2.0, -1.3));

  std::vector<Tri> tris;
  tris.push_back({n_real, n_real + 1, n_real + 2});
  orient_ccw(work, tris.back());

  for (std::uint32_t ip = 0; ip < n_real; ++ip) {
    const Vec2& p = work[ip];

    // cavity: triangles whose circumcircle strictly contains p
    std::vector<std::uint32_t> bad;
    for (std::uint32_t t = 0; t < tris.size(); ++t) {
      const Tri& tr = tris[t];
      if (incircle_det(work[tr[0]], work[tr[1]], work[tr[2]], p) > 0.0L) bad.push_back(t);
    }

    // boundary = edges used by exactly one cavity triangle
    std::map<EdgeKey, int> edge_use;
    std::map<EdgeKey, std::pair<std::uint32_t, std::uint32_t>> directed;
    for (std::uint32_t t : bad) {
      for (int e = 0; e < 3; ++e) {
        const std::uint32_t a = tris[t][e];
        const std::uint32_t b = tris[t][(e + 1) % 3];
        ++edge_use[edge_key(a, b)];
        directed[edge_key(a, b)] = {a, b};
      }
    }

    std::vector<char> is_bad(tris.size(), 0);
    for (std::uint32_t t : bad) is_bad[t] = 1;
    std::vector<Tri> next;
    next.reserve(tris.size() + 2);
    for (std::uint32_t t = 0; t < tris.size(); ++t) {
      if (!is_bad[t]) next.push_back(tris[t]);
    }
    for (const auto& [key, uses] : edge_use) {
      if (uses != 1) continue;
      const auto [a, b] = directed.at(key);
      Tri t{a, b, ip};
      orient_ccw(work, t);
      next.push_back(t);
    }
    tris = std::move(next);
  }

  // drop triangles touching the super vertices
  std::vector<Tri> real_tris;
  for (const Tri& t : tris) {
    if (t[0] < n_real && t[1] < n_real && t[2] < n_real) real_tris.push_back(t);
  }

  // Lawson cleanup: flip any interior edge whose opposite vertex lands
  // strictly inside a circumcircle. Bowyer-Watson already leaves this
  // near-empty; the pass guarantees the empty-circumcircle property.
  for (int pass = 0; pass < 256; ++pass) {
    bool flipped = false;
    const Adjacency adj = build_adjacency(real_tris, {});
    for (const auto& [key, owners] : adj.edges) {
      if (owners.size() != 2) continue;
      Tri& t1 = real_tris[owners[0]];
      Tri& t2 = real_tris[owners[1]];
      auto opposite = [&](const Tri& t) -> std::uint32_t {
        for (std::uint32_t v : t) {
          if (v != key.a && v != key.b) return v;
        }
        return t[0];
      };
      const std::uint32_t p = opposite(t1);
      const std::uint32_t q = opposite(t2);
      if (p == q) continue;
      Tri probe{key.a, key.b, p};
      orient_ccw(work, probe);
      const long double det = incircle_det(work[probe[0]], work[probe[1]], work[probe[2]], work[q]);
      // require a margin so cocircular quads are left alone
      const auto cc = circumcircle(work[probe[0]], work[probe[1]], work[probe[2]]);
      if (!cc) continue;
      const double inside_by = cc->second - (work[q] - cc->first).norm();
      if (det > 0.0L && inside_by > 1e-12 * cc->second) {
        // flip: (a,b,p),(b,a,q) -> (p,q,a),(q,p,b)
        Tri n1{p, q, key.a};
        Tri n2{q, p, key.b};
        // reject flips that would create degenerate/inverted triangles
        if (std::abs(cross2(work[n1[0]], work[n1[1]], work[n1[2]])) == 0.0L ||
            std::abs(cross2(work[n2[0]], work[n2[1]], work[n2[2]])) == 0.0L) {
          continue;
        }
        orient_ccw(work, n1);
        orient_ccw(work, n2);
        t1 = n1;
        t2 = n2;
        flipped = true;
        break;  // adjacency is stale after a flip; rebuild
      }
    }
    if (!flipped) break;
  }

  Triangulation2D out;
  out.points.assign(work.begin(), work.begin() + n_real);
  out.triangles = std::move(real_tris);
  return out;
}

double polygon_area(const AlphaPolygon& poly) {
  const auto& v = poly.vertices;
  double acc = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const Vec2& p = v[i];
    const Vec2& q = v[(i + 1) % v.size()];
    acc += p.x() * q.y() - q.x() * p.y();
  }
  return 0.5 * acc;
}

namespace {

double loop_area(const std::vector<Vec2>& pts, const std::vector<std::uint32_t>& loop) {
  double acc = 0;
  for (std::size_t i = 0; i < loop.size(); ++i) {
    const Vec2& p = pts[loop[i]];
    const Vec2& q = pts[loop[(i + 1) % loop.size()]];
    acc += p.x() * q.y() - q.x() * p.y();
  }
  return 0.5 * acc;
}

bool segments_properly_intersect(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d) {
  const auto sgn = [](long double v) { return v > 0 ? 1 : (v < 0 ? -1 : 0); };
  const int d1 = sgn(cross2(a, b, c));
  const int d2 = sgn(cross2(a, b, d));
  const int d3 = sgn(cross2(c, d, a));
  const int d4 = sgn(cross2(c, d, b));
  return d1 * d2 < 0 && d3 * d4 < 0;
}

}  // namespace

AlphaPolygon alpha_shape(const std::vector<Vec2>& points, double alpha, AlphaShapeInfo* info) {
  if (alpha < 0) throw std::invalid_argument("alpha_shape: alpha must be non-negative");
  const Triangulation2D tri = delaunay_2d(points);

  const double radius_limit =
      alpha == 0 ? std::numeric_limits<double>::infinity() : 1.0 / alpha;

  std::vector<char> kept(tri.triangles.size(), 0);
  double min_radius = std::numeric_limits<double>::infinity();
  std::size_t kept_count = 0;
  for (std::size_t t = 0; t < tri.triangles.size(); ++t) {
    const Tri& tr = tri.triangles[t];
    const auto cc = circumcircle(tri.points[tr[0]], tri.points[tr[1]], tri.points[tr[2]]);
    if (!cc) continue;
    min_radius = std::min(min_radius, cc->second);
    if (cc->second < radius_limit) {
      kept[t] = 1;
      ++kept_count;
    }
  }
  if (kept_count == 0) {
    throw std::runtime_error(
        "alpha_shape: no triangle has circumradius below 1/alpha = " + std::to_string(radius_limit) +
        "; smallest circumradius found is " + std::to_string(min_radius) +
        " (alpha too large)");
  }

  // connected components of the kept region (triangles sharing an edge)
  std::vector<std::int32_t> component(tri.triangles.size(), -1);
  std::int32_t n_components = 0;
  {
    const Adjacency adj = build_adjacency(tri.triangles, kept);
    for (std::size_t seed = 0; seed < tri.triangles.size(); ++seed) {
      if (!kept[seed] || component[seed] >= 0) continue;
      std::vector<std::uint32_t> stack{static_cast<std::uint32_t>(seed)};
      component[seed] = n_components;
      while (!stack.empty()) {
        const std::uint32_t t = stack.back();
        stack.pop_back();
        for (int e = 0; e < 3; ++e) {
          const auto& owners =
              adj.edges.at(edge_key(tri.triangles[t][e], tri.triangles[t][(e + 1) % 3]));
          for (std::uint32_t o : owners) {
            if (component[o] < 0) {
              component[o] = n_components;
              stack.push_back(o);
            }
          }
        }
      }
      ++n_components;
    }
  }

  // largest component by area
  std::vector<double> areas(static_cast<std::size_t>(n_components), 0.0);
  for (std::size_t t = 0; t < tri.triangles.size(); ++t) {
    if (!kept[t]) continue;
    const Tri& tr = tri.triangles[t];
    areas[static_cast<std::size_t>(component[t])] +=
        0.5 * std::abs(static_cast<double>(cross2(tri.points[tr[0]], tri.points[tr[1]],
                                                  tri.points[tr[2]])));
  }
  const std::int32_t chosen = static_cast<std::int32_t>(
      std::max_element(areas.begin(), areas.end()) - areas.begin());

  if (info) {
    info->kept_triangles = kept_count;
    info->component_count = static_cast<std::size_t>(n_components);
    info->min_circumradius = min_radius;
  }

  // directed boundary edges of the chosen component (interior on the left)
  std::map<EdgeKey, int> use_count;
  for (std::size_t t = 0; t < tri.triangles.size(); ++t) {
    if (!kept[t] || component[t] != chosen) continue;
    for (int e = 0; e < 3; ++e) {
      ++use_count[edge_key(tri.triangles[t][e], tri.triangles[t][(e + 1) % 3])];
    }
  }
  std::map<std::uint32_t, std::vector<std::uint32_t>> outgoing;
  std::size_t n_boundary = 0;
  for (std::size_t t = 0; t < tri.triangles.size(); ++t) {
    if (!kept[t] || component[t] != chosen) continue;
    for (int e = 0; e < 3; ++e) {
      const std::uint32_t a = tri.triangles[t][e];
      const std::uint32_t b = tri.triangles[t][(e + 1) % 3];
      if (use_count.at(edge_key(a, b)) == 1) {
        outgoing[a].push_back(b);
        ++n_boundary;
      }
    }
  }
  for (auto& [v, nexts] : outgoing) std::sort(nexts.begin(), nexts.end());

  // walk closed loops; the outer contour is the loop with the largest area
  std::set<std::pair<std::uint32_t, std::uint32_t>> used;
  std::vector<std::vector<std::uint32_t>> loops;
  for (const auto& [start, nexts] : outgoing) {
    for (std::uint32_t first_next : nexts) {
      if (used.count({start, first_next})) continue;
      std::vector<std::uint32_t> loop;
      std::uint32_t prev = start;
      std::uint32_t cur = first_next;
      used.insert({start, first_next});
      loop.push_back(start);
      while (cur != start) {
        loop.push_back(cur);
        const auto it = outgoing.find(cur);
        if (it == outgoing.end()) {
          throw std::runtime_error("alpha_shape: boundary walk ran into a dead end");
        }
        // At a pinch vertex take the most counterclockwise continuation:
        // the walk then closes each lobe as its own loop instead of
        // threading them into one non-simple contour.
        std::uint32_t next = cur;
        double best_angle = -std::numeric_limits<double>::infinity();
        const Vec2 in_dir = (tri.points[cur] - tri.points[prev]).normalized();
        for (std::uint32_t cand : it->second) {
          if (used.count({cur, cand})) continue;
          const Vec2 out_dir = (tri.points[cand] - tri.points[cur]).normalized();
          const double ang = std::atan2(in_dir.x() * out_dir.y() - in_dir.y() * out_dir.x(),
                                        in_dir.dot(out_dir));
          if (ang > best_angle) {
            best_angle = ang;
            next = cand;
          }
        }
        if (next == cur) {
          throw std::runtime_error("alpha_shape: boundary walk could not close a loop");
        }
        used.insert({cur, next});
        prev = cur;
        cur = next;
        if (loop.size() > n_boundary + 1) {
          throw std::runtime_error("alpha_shape: boundary walk exceeded the edge budget");
        }
      }
      loops.push_back(std::move(loop));
    }
  }
  if (loops.empty()) throw std::runtime_error("alpha_shape: kept region has no boundary");

  std::size_t best_loop = 0;
  double best_area = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < loops.size(); ++i) {
    const double a = std::abs(loop_area(tri.points, loops[i]));
    if (a > best_area) {
      best_area = a;
      best_loop = i;
    }
  }

  AlphaPolygon poly;
  poly.vertices.reserve(loops[best_loop].size());
  for (std::uint32_t idx : loops[best_loop]) poly.vertices.push_back(tri.points[idx]);
  if (polygon_area(poly) < 0) std::reverse(poly.vertices.begin(), poly.vertices.end());

  // simplicity: repeated vertices or crossing edges invalidate the contour
  {
    std::set<std::pair<double, double>> uniq;
    for (const Vec2& v : poly.vertices) {
      if (!uniq.insert({v.x(), v.y()}).second) {
        throw std::runtime_error("alpha_shape: contour is not simple (repeated vertex)");
      }
    }
    const std::size_t m = poly.vertices.size();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = i + 1; j < m; ++j) {
        if (j == i || (j + 1) % m == i || (i + 1) % m == j) continue;
        if (segments_properly_intersect(poly.vertices[i], poly.vertices[(i + 1) % m],
                                        poly.vertices[j], poly.vertices[(j + 1) % m])) {
          throw std::runtime_error("alpha_shape: contour is not simple (crossing edges)");
        }
      }
    }
  }
  return poly;
}

namespace {

double point_segment_distance(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 == 0) return (p - a).norm();
  const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

}  // namespace

PolygonLocation point_in_polygon(const AlphaPolygon& poly, const Vec2& p) {
  const auto& v = poly.vertices;
  const std::size_t n = v.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (point_segment_distance(p, v[i], v[(i + 1) % n]) < 1e-9) {
      return PolygonLocation::Boundary;
    }
  }
  bool inside = false;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const bool straddles = (v[i].y() > p.y()) != (v[j].y() > p.y());
    if (straddles) {
      const double x_cross =
          v[i].x() + (p.y() - v[i].y()) / (v[j].y() - v[i].y()) * (v[j].x() - v[i].x());
      if (p.x() < x_cross) inside = !inside;
    }
  }
  return inside ? PolygonLocation::Inside : PolygonLocation::Outside;
}

std::vector<PixelCoord> interior_points(const AlphaPolygon& poly, const Intrinsics& intr,
                                        const std::vector<PixelCoord>& exclude) {
  Vec2 lo = poly.vertices.front(), hi = poly.vertices.front();
  for (const Vec2& v : poly.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  const std::int32_t row_lo = std::max<std::int32_t>(0, static_cast<std::int32_t>(std::floor(lo.y())));
  const std::int32_t row_hi =
      std::min<std::int32_t>(static_cast<std::int32_t>(intr.height) - 1,
                             static_cast<std::int32_t>(std::ceil(hi.y())));
  const std::int32_t col_lo = std::max<std::int32_t>(0, static_cast<std::int32_t>(std::floor(lo.x())));
  const std::int32_t col_hi =
      std::min<std::int32_t>(static_cast<std::int32_t>(intr.width) - 1,
                             static_cast<std::int32_t>(std::ceil(hi.x())));

  std::set<PixelCoord> excluded(exclude.begin(), exclude.end());

  const std::size_t n_rows = row_hi >= row_lo ? static_cast<std::size_t>(row_hi - row_lo + 1) : 0;
  std::vector<std::vector<PixelCoord>> per_row(n_rows);
  parallel_for(n_rows, [&](std::size_t r) {
    const std::int32_t row = row_lo + static_cast<std::int32_t>(r);
    for (std::int32_t col = col_lo; col <= col_hi; ++col) {
      const PixelCoord pc{row, col};
      if (excluded.count(pc)) continue;
      const PolygonLocation loc =
          point_in_polygon(poly, Vec2(static_cast<double>(col), static_cast<double>(row)));
      if (loc != PolygonLocation::Outside) per_row[r].push_back(pc);
    }
  });

  std::vector<PixelCoord> out;
  for (const auto& row : per_row) out.insert(out.end(), row.begin(), row.end());
  return out;
}

namespace {

class KdTree2 {
 public:
  explicit KdTree2(const std::vector<Vec2>& pts) : pts_(pts) {
    ids_.resize(pts.size());
    std::iota(ids_.begin(), ids_.end(), 0u);
    build(0, pts_.size(), 0);
  }

  void knn(const Vec2& q, std::uint32_t k,
           std::vector<std::pair<double, std::uint32_t>>& heap) const {
    heap.clear();
    search(0, pts_.size(), 0, q, k, heap);
    std::sort(heap.begin(), heap.end());
  }

 private:
  // in-place kd-tree over ids_[lo, hi): median element is the node
  void build(std::size_t lo, std::size_t hi, int depth) {
    if (hi - lo <= 1) return;
    const int axis = depth % 2;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(ids_.begin() + static_cast<std::ptrdiff_t>(lo),
                     ids_.begin() + static_cast<std::ptrdiff_t>(mid),
                     ids_.begin() + static_cast<std::ptrdiff_t>(hi),
                     [&](std::uint32_t a, std::uint32_t b) {
                       if (pts_[a][axis] != pts_[b][axis]) return pts_[a][axis] < pts_[b][axis];
                       return a < b;
                     });
    build(lo, mid, depth + 1);
    build(mid + 1, hi, depth + 1);
  }

  void consider(const Vec2& q, std::uint32_t id, std::uint32_t k,
                std::vector<std::pair<double, std::uint32_t>>& heap) const {
    const double d2 = (pts_[id] - q).squaredNorm();
    const std::pair<double, std::uint32_t> cand{d2, id};
    if (heap.size() < k) {
      heap.push_back(cand);
      std::push_heap(heap.begin(), heap.end());
    } else if (cand < heap.front()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = cand;
      std::push_heap(heap.begin(), heap.end());
    }
  }

  void search(std::size_t lo, std::size_t hi, int depth, const Vec2& q, std::uint32_t k,
              std::vector<std::pair<double, std::uint32_t>>& heap) const {
    if (lo >= hi) return;
    if (hi - lo == 1) {
      consider(q, ids_[lo], k, heap);
      return;
    }
    const int axis = depth % 2;
    const std::size_t mid = lo + (hi - lo) / 2;
    consider(q, ids_[mid], k, heap);
    const double delta = q[axis] - pts_[ids_[mid]][axis];
    const auto near = delta < 0 ? std::pair{lo, mid} : std::pair{mid + 1, hi};
    const auto far = delta < 0 ? std::pair{mid + 1, hi} : std::pair{lo, mid};
    search(near.first, near.second, depth + 1, q, k, heap);
    // the far side can still hold an equal-distance, smaller-index site
    if (heap.size() < k || delta * delta <= heap.front().first) {
      search(far.first, far.second, depth + 1, q, k, heap);
    }
  }

  const std::vector<Vec2>& pts_;
  std::vector<std::uint32_t> ids_;
};

}  // namespace

KnnTable knn_projected(const std::vector<Vec2>& sites, const std::vector<Vec2>& queries,
                       std::uint32_t k) {
  if (k == 0) throw std::invalid_argument("knn_projected: k must be positive");
  if (sites.size() < k) {
    throw std::invalid_argument("knn_projected: need at least k = " + std::to_string(k) +
                                " sites, have " + std::to_string(sites.size()));
  }
  const KdTree2 tree(sites);

  KnnTable table;
  table.k = k;
  table.indices.resize(queries.size() * k);
  table.distances.resize(queries.size() * k);

  std::vector<std::string> errors(queries.size());
  parallel_for(queries.size(), [&](std::size_t qi) {
    std::vector<std::pair<double, std::uint32_t>> heap;
    heap.reserve(k + 1);
    tree.knn(queries[qi], k, heap);
    for (std::uint32_t j = 0; j < k; ++j) {
      const double dist = std::sqrt(heap[j].first);
      if (dist == 0.0) {
        errors[qi] = "knn_projected: query " + std::to_string(qi) + " coincides with site " +
                     std::to_string(heap[j].second);
        return;
      }
      table.indices[qi * k + j] = heap[j].second;
      table.distances[qi * k + j] = dist;
    }
  });
  for (const std::string& e : errors) {
    if (!e.empty()) throw std::invalid_argument(e);
  }
  return table;
}

}  // namespace meshreg
