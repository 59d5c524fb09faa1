#ifndef CRSTOKES_MESH_HPP
#define CRSTOKES_MESH_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace crstokes {

struct NonConforming : std::runtime_error {
  explicit NonConforming(const std::string& what) : std::runtime_error(what) {}
};
struct DegenerateTriangle : std::runtime_error {
  explicit DegenerateTriangle(const std::string& what) : std::runtime_error(what) {}
};
struct BadOrientation : std::runtime_error {
  explicit BadOrientation(const std::string& what) : std::runtime_error(what) {}
};
struct EtaTooLarge : std::runtime_error {
  explicit EtaTooLarge(const std::string& what) : std::runtime_error(what) {}
};
struct UnclassifiableCritical : std::runtime_error {
  explicit UnclassifiableCritical(const std::string& what) : std::runtime_error(what) {}
};
struct ApexCritical : std::runtime_error {
  explicit ApexCritical(const std::string& what) : std::runtime_error(what) {}
};
struct NoInnerVertex : std::runtime_error {
  explicit NoInnerVertex(const std::string& what) : std::runtime_error(what) {}
};
struct NotExhaustive : std::runtime_error {
  explicit NotExhaustive(const std::string& what) : std::runtime_error(what) {}
};
struct InvalidAngles : std::runtime_error {
  explicit InvalidAngles(const std::string& what) : std::runtime_error(what) {}
};
struct MeshParseError : std::runtime_error {
  explicit MeshParseError(const std::string& what) : std::runtime_error(what) {}
};

using Vec2 = Eigen::Vector2d;

inline Vec2 rot90ccw(const Vec2& v) { return Vec2(-v.y(), v.x()); }

inline double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

/// Conforming triangulation with derived edges and fixed edge normals.
/// Interior-edge normals point from the lower- to the higher-indexed
/// adjacent triangle; boundary-edge normals point outward.
struct Triangulation {
  struct Edge {
    std::array<int, 2> v{-1, -1};    // endpoint vertex indices, v[0] < v[1]
    std::array<int, 2> tri{-1, -1};  // adjacent triangles, tri[1] = -1 on boundary
    Vec2 normal = Vec2::Zero();
    bool boundary = false;
    double length = 0.0;
  };

  std::vector<Vec2> vertices;
  std::vector<std::array<int, 3>> triangles;  // CCW vertex triples
  std::vector<Edge> edges;

  // derived
  std::vector<double> area;
  std::vector<double> diameter;
  std::vector<std::array<int, 3>> tri_edges;  // edge opposite local vertex i
  std::vector<std::vector<int>> vertex_tris;
  std::vector<std::vector<int>> vertex_edges;
  std::vector<bool> vertex_on_boundary;

  int edge_between(int a, int b) const {
    if (a > b) std::swap(a, b);
    auto it = edge_lookup.find({a, b});
    return it == edge_lookup.end() ? -1 : it->second;
  }

  int opposite_vertex(int tri, int edge) const {
    for (int i = 0; i < 3; ++i)
      if (tri_edges[tri][i] == edge) return triangles[tri][i];
    return -1;
  }

  int local_vertex_index(int tri, int v) const {
    for (int i = 0; i < 3; ++i)
      if (triangles[tri][i] == v) return i;
    return -1;
  }

  /// Interior angle of triangle `tri` at vertex `v`.
  double angle_at(int tri, int v) const {
    const int i = local_vertex_index(tri, v);
    const Vec2 p = vertices[triangles[tri][i]];
    const Vec2 a = vertices[triangles[tri][(i + 1) % 3]] - p;
    const Vec2 b = vertices[triangles[tri][(i + 2) % 3]] - p;
    return std::atan2(std::abs(cross2(a, b)), a.dot(b));
  }

  Vec2 barycentric(int tri, const Vec2& p) const {
    const Vec2& a = vertices[triangles[tri][0]];
    const Vec2& b = vertices[triangles[tri][1]];
    const Vec2& c = vertices[triangles[tri][2]];
    const double det = cross2(b - a, c - a);
    const double l2 = cross2(p - a, c - a) / det;
    const double l3 = cross2(b - a, p - a) / det;
    return Vec2(l2, l3);  // (lambda_2, lambda_3); lambda_1 = 1 - l2 - l3
  }

  std::array<double, 3> barycentric3(int tri, const Vec2& p) const {
    const Vec2 l = barycentric(tri, p);
    return {1.0 - l.x() - l.y(), l.x(), l.y()};
  }

  std::map<std::array<int, 2>, int> edge_lookup;
};

struct ValidateOptions {
  bool fix_orientation = false;
};

namespace detail {

inline bool point_strictly_inside_segment(const Vec2& p, const Vec2& a, const Vec2& b,
                                          double tol) {
  const Vec2 d = b - a;
  const double len2 = d.squaredNorm();
  const double t = (p - a).dot(d) / len2;
  if (t <= tol || t >= 1.0 - tol) return false;
  const double dist = std::abs(cross2(d, p - a)) / std::sqrt(len2);
  return dist <= tol * std::sqrt(len2);
}

// Area of the intersection of two convex polygons (Sutherland-Hodgman).
inline double convex_intersection_area(std::vector<Vec2> subject, const std::vector<Vec2>& clip) {
  for (std::size_t i = 0; i < clip.size(); ++i) {
    const Vec2 a = clip[i];
    const Vec2 b = clip[(i + 1) % clip.size()];
    std::vector<Vec2> out;
    for (std::size_t j = 0; j < subject.size(); ++j) {
      const Vec2 p = subject[j];
      const Vec2 q = subject[(j + 1) % subject.size()];
      const double sp = cross2(b - a, p - a);
      const double sq = cross2(b - a, q - a);
      if (sp >= 0) out.push_back(p);
      if ((sp > 0 && sq < 0) || (sp < 0 && sq > 0)) {
        const double t = sp / (sp - sq);
        out.push_back(p + t * (q - p));
      }
    }
    subject = std::move(out);
    if (subject.empty()) return 0.0;
  }
  double a2 = 0.0;
  for (std::size_t j = 0; j < subject.size(); ++j)
    a2 += cross2(subject[j], subject[(j + 1) % subject.size()]);
  return 0.5 * std::abs(a2);
}

}  // namespace detail

inline Triangulation validate(std::vector<Vec2> vertices,
                              std::vector<std::array<int, 3>> triangles,
                              const ValidateOptions& opts = {}) {
  if (triangles.empty()) throw NonConforming("validate: mesh has no triangles");
  const int nv = static_cast<int>(vertices.size());
  for (std::size_t t = 0; t < triangles.size(); ++t)
    for (int i = 0; i < 3; ++i)
      if (triangles[t][i] < 0 || triangles[t][i] >= nv)
        throw NonConforming("validate: triangle " + std::to_string(t) +
                            " has out-of-range vertex index");

  Triangulation T;
  T.vertices = std::move(vertices);
  T.triangles = std::move(triangles);

  const std::size_t nt = T.triangles.size();
  T.area.resize(nt);
  T.diameter.resize(nt);
  for (std::size_t t = 0; t < nt; ++t) {
    auto& tri = T.triangles[t];
    const Vec2& a = T.vertices[tri[0]];
    const Vec2& b = T.vertices[tri[1]];
    const Vec2& c = T.vertices[tri[2]];
    double signed_area = 0.5 * cross2(b - a, c - a);
    const double hK = std::max({(b - a).norm(), (c - b).norm(), (a - c).norm()});
    if (signed_area < 0) {
      if (!opts.fix_orientation)
        throw BadOrientation("validate: triangle " + std::to_string(t) +
                             " is clockwise (use fix_orientation to repair)");
      std::swap(tri[1], tri[2]);
      signed_area = -signed_area;
    }
    if (signed_area <= 1e-12 * hK * hK)
      throw DegenerateTriangle("validate: triangle " + std::to_string(t) +
                               " has vanishing area");
    T.area[t] = signed_area;
    T.diameter[t] = hK;
  }

  // derive edges
  T.tri_edges.assign(nt, {-1, -1, -1});
  for (std::size_t t = 0; t < nt; ++t) {
    for (int i = 0; i < 3; ++i) {
      int a = T.triangles[t][(i + 1) % 3];
      int b = T.triangles[t][(i + 2) % 3];
      if (a > b) std::swap(a, b);
      auto it = T.edge_lookup.find({a, b});
      int e;
      if (it == T.edge_lookup.end()) {
        e = static_cast<int>(T.edges.size());
        Triangulation::Edge edge;
        edge.v = {a, b};
        edge.tri = {static_cast<int>(t), -1};
        edge.length = (T.vertices[b] - T.vertices[a]).norm();
        T.edges.push_back(edge);
        T.edge_lookup[{a, b}] = e;
      } else {
        e = it->second;
        if (T.edges[e].tri[1] != -1)
          throw NonConforming("validate: edge shared by more than two triangles");
        T.edges[e].tri[1] = static_cast<int>(t);
      }
      T.tri_edges[t][i] = e;
    }
  }

  for (auto& e : T.edges) e.boundary = (e.tri[1] == -1);

  // hanging nodes: no vertex may lie strictly inside another edge
  for (int v = 0; v < nv; ++v) {
    for (const auto& e : T.edges) {
      if (e.v[0] == v || e.v[1] == v) continue;
      if (detail::point_strictly_inside_segment(T.vertices[v], T.vertices[e.v[0]],
                                                T.vertices[e.v[1]], 1e-9))
        throw NonConforming("validate: vertex " + std::to_string(v) +
                            " hangs on edge [" + std::to_string(e.v[0]) + "," +
                            std::to_string(e.v[1]) + "]");
    }
  }

  // overlaps: triangle pairs may only meet in a shared vertex or shared edge
  for (std::size_t s = 0; s < nt; ++s)
    for (std::size_t t = s + 1; t < nt; ++t) {
      int shared = 0;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          if (T.triangles[s][i] == T.triangles[t][j]) ++shared;
      if (shared >= 2) continue;  // share an edge; conforming by edge derivation
      std::vector<Vec2> ps, pt;
      for (int i = 0; i < 3; ++i) ps.push_back(T.vertices[T.triangles[s][i]]);
      for (int i = 0; i < 3; ++i) pt.push_back(T.vertices[T.triangles[t][i]]);
      const double inter = detail::convex_intersection_area(ps, pt);
      if (inter > 1e-10 * std::min(T.area[s], T.area[t]))
        throw NonConforming("validate: triangles " + std::to_string(s) + " and " +
                            std::to_string(t) + " overlap");
    }

  // fix normals
  for (auto& e : T.edges) {
    const Vec2 a = T.vertices[e.v[0]];
    const Vec2 b = T.vertices[e.v[1]];
    Vec2 n = rot90ccw((b - a).normalized());
    const int t0 = e.tri[0];
    const int opp = [&] {
      for (int i = 0; i < 3; ++i) {
        const int v = T.triangles[t0][i];
        if (v != e.v[0] && v != e.v[1]) return v;
      }
      return -1;
    }();
    const bool n_into_t0 = n.dot(T.vertices[opp] - a) > 0;
    if (e.boundary) {
      e.normal = n_into_t0 ? Vec2(-n) : n;  // outward
    } else {
      // from lower to higher adjacent-triangle index; tri[0] < tri[1] by construction
      e.normal = n_into_t0 ? Vec2(-n) : n;  // points away from tri[0], into tri[1]
    }
  }

  // vertex incidences
  T.vertex_tris.assign(nv, {});
  T.vertex_edges.assign(nv, {});
  T.vertex_on_boundary.assign(nv, false);
  for (std::size_t t = 0; t < nt; ++t)
    for (int i = 0; i < 3; ++i) T.vertex_tris[T.triangles[t][i]].push_back(static_cast<int>(t));
  for (std::size_t e = 0; e < T.edges.size(); ++e) {
    T.vertex_edges[T.edges[e].v[0]].push_back(static_cast<int>(e));
    T.vertex_edges[T.edges[e].v[1]].push_back(static_cast<int>(e));
    if (T.edges[e].boundary) {
      T.vertex_on_boundary[T.edges[e].v[0]] = true;
      T.vertex_on_boundary[T.edges[e].v[1]] = true;
    }
  }
  for (int v = 0; v < nv; ++v)
    if (!T.vertex_tris[v].empty() && T.vertex_edges[v].empty())
      throw NonConforming("validate: isolated vertex");
  return T;
}

// ---------------------------------------------------------------------------
// mesh text format: lines "v <x> <y>" then "t <i> <j> <k>", '#' comments

inline Triangulation parse_mesh(std::istream& in, const ValidateOptions& opts = {}) {
  std::vector<Vec2> vs;
  std::vector<std::array<int, 3>> ts;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      double x, y;
      if (!(ls >> x >> y))
        throw MeshParseError("line " + std::to_string(lineno) + ": expected 'v <x> <y>'");
      vs.emplace_back(x, y);
    } else if (tag == "t") {
      int i, j, k;
      if (!(ls >> i >> j >> k))
        throw MeshParseError("line " + std::to_string(lineno) + ": expected 't <i> <j> <k>'");
      ts.push_back({i, j, k});
    } else {
      throw MeshParseError("line " + std::to_string(lineno) + ": unknown record '" + tag + "'");
    }
  }
  return validate(std::move(vs), std::move(ts), opts);
}

inline Triangulation load_mesh(const std::string& path, const ValidateOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw MeshParseError("cannot open mesh file " + path);
  return parse_mesh(in, opts);
}

inline void save_mesh(const Triangulation& T, std::ostream& out) {
  char buf[80];
  for (const auto& v : T.vertices) {
    std::snprintf(buf, sizeof buf, "v %.17g %.17g\n", v.x(), v.y());
    out << buf;
  }
  for (const auto& t : T.triangles) out << "t " << t[0] << " " << t[1] << " " << t[2] << "\n";
}

// ---------------------------------------------------------------------------
// shape regularity

struct ShapeReport {
  double gamma = 0.0;   // max h_K / rho_K
  double phi = 0.0;     // minimal angle (radians)
  double h_max = 0.0;   // global mesh width
  // Minimal outer boundary angle.  (Some statements refer to the "maximal"
  // outer angle; the stored quantity is the minimum over boundary vertices.)
  double alpha_omega = 0.0;
};

inline ShapeReport shape_report(const Triangulation& T) {
  ShapeReport r;
  r.phi = M_PI;
  for (std::size_t t = 0; t < T.triangles.size(); ++t) {
    double per = 0.0;
    for (int i = 0; i < 3; ++i) per += T.edges[T.tri_edges[t][i]].length;
    const double rho = 4.0 * T.area[t] / per;  // inscribed-circle diameter
    r.gamma = std::max(r.gamma, T.diameter[t] / rho);
    r.h_max = std::max(r.h_max, T.diameter[t]);
    for (int i = 0; i < 3; ++i) r.phi = std::min(r.phi, T.angle_at(t, T.triangles[t][i]));
  }
  r.alpha_omega = 2.0 * M_PI;
  for (int v = 0; v < static_cast<int>(T.vertices.size()); ++v) {
    if (!T.vertex_on_boundary[v]) continue;
    double interior = 0.0;
    for (int t : T.vertex_tris[v]) interior += T.angle_at(t, v);
    r.alpha_omega = std::min(r.alpha_omega, 2.0 * M_PI - interior);
  }
  return r;
}

// ---------------------------------------------------------------------------
// ordered nodal patches

struct VertexPatch {
  std::vector<int> tris;        // counterclockwise; boundary patches run chain-wise
  std::vector<double> angles;   // angle of tris[i] at the vertex
  bool boundary = false;
};

/// Triangles of the nodal patch ordered counterclockwise.  Boundary patches
/// are ordered from one boundary edge to the other.
inline VertexPatch ordered_patch(const Triangulation& T, int z) {
  VertexPatch p;
  p.boundary = T.vertex_on_boundary[z];
  const auto& tris = T.vertex_tris[z];
  if (tris.empty()) return p;

  // next triangle counterclockwise across the edge [z, other]
  auto wedge = [&](int t) {
    // returns (cw vertex, ccw vertex) of triangle t around z
    const int i = T.local_vertex_index(t, z);
    return std::array<int, 2>{T.triangles[t][(i + 1) % 3], T.triangles[t][(i + 2) % 3]};
  };
  auto tri_across = [&](int t, int other) {
    const int e = T.edge_between(z, other);
    const auto& E = T.edges[e];
    if (E.tri[0] == t) return E.tri[1];
    return E.tri[0] == -1 ? -1 : E.tri[0];
  };

  int start = tris[0];
  if (p.boundary) {
    // walk clockwise until the clockwise-side edge is a boundary edge
    for (std::size_t guard = 0; guard <= tris.size(); ++guard) {
      const int prev = tri_across(start, wedge(start)[0]);
      if (prev == -1) break;
      start = prev;
      if (guard == tris.size())
        throw NonConforming("ordered_patch: nodal patch at vertex " + std::to_string(z) +
                            " is not a simple fan");
    }
  } else {
    start = *std::min_element(tris.begin(), tris.end());
  }
  int cur = start;
  for (std::size_t i = 0; i < tris.size(); ++i) {
    p.tris.push_back(cur);
    p.angles.push_back(T.angle_at(cur, z));
    const int next = tri_across(cur, wedge(cur)[1]);
    if (next == -1) {
      if (i + 1 != tris.size())
        throw NonConforming("ordered_patch: nodal patch at vertex " + std::to_string(z) +
                            " is not edge-connected");
      break;
    }
    cur = next;
    if (!p.boundary && cur == start) break;
  }
  if (p.tris.size() != tris.size())
    throw NonConforming("ordered_patch: nodal patch at vertex " + std::to_string(z) +
                        " is not a simple fan");
  return p;
}

/// Theta(z): max |sin(omega_i + omega_{i+1})| over consecutive patch angles;
/// cyclic for interior vertices, chain-wise for boundary vertices, and 0 for
/// a boundary vertex with a single triangle.
inline double theta(const Triangulation& T, int z) {
  const VertexPatch p = ordered_patch(T, z);
  const int m = static_cast<int>(p.tris.size());
  if (p.boundary && m == 1) return 0.0;
  double worst = 0.0;
  const int pairs = p.boundary ? m - 1 : m;
  for (int i = 0; i < pairs; ++i) {
    const double s = std::abs(std::sin(p.angles[i] + p.angles[(i + 1) % m]));
    worst = std::max(worst, s);
  }
  return worst;
}

/// Largest admissible eta threshold eta_0 = min{1/2, c_1, 3 phi/pi, sin phi}.
inline double eta0(double phi) {
  if (!(phi > 0.0) || phi > M_PI / 3.0 + 1e-9)
    throw std::invalid_argument("eta0: minimal angle must lie in (0, pi/3]");
  double c1;
  if (phi <= M_PI / 8.0)
    c1 = std::min(std::sin(2.0 * phi), std::abs(std::sin(2.0 * M_PI - 4.0 * phi)));
  else if (phi <= M_PI / 4.0)
    c1 = std::sin(2.0 * phi);
  else
    c1 = 1.0;
  return std::min({0.5, c1, 3.0 * phi / M_PI, std::sin(phi)});
}

// ---------------------------------------------------------------------------
// eta-critical classification, fans, extension sequence

enum class CriticalKind { Inner, Acute, Flat, Concave };

struct Fan {
  int apex = -1;
  std::vector<int> members;           // z_{l,1..n} ordered along the chain
  std::vector<int> edges;             // E(z) indices
  std::vector<Vec2> normals;          // N(z)
  std::vector<int> tris;              // K_{l,1..n+1}
  std::vector<std::array<double, 3>> tri_angles;  // per K: (at apex, at z_j, at z_{j-1})
};

struct FanDecomposition {
  std::vector<Fan> fans;
};

struct TopologyReport {
  double eta = 0.0;
  std::vector<double> theta;  // per vertex
  std::map<int, CriticalKind> critical;
  std::vector<int> inner, acute, flat, concave;
  double theta_min = 0.0;  // min Theta over non-critical vertices
  std::map<int, int> chosen_edge;  // E(z) for obtuse eta-critical z
  FanDecomposition fans;
  int extension_L = 0;
  std::vector<std::vector<int>> extension_layers;
};

// tolerance absorbing round-off in angle sums (sin(pi) ~ 1e-16)
inline constexpr double kThetaTol = 1e-12;

inline TopologyReport classify_critical(const Triangulation& T, double eta) {
  const ShapeReport sr = shape_report(T);
  const double e0 = eta0(sr.phi);
  if (eta < 0.0) throw std::invalid_argument("classify_critical: eta must be >= 0");
  if (eta >= e0)
    throw EtaTooLarge("classify_critical: eta = " + std::to_string(eta) +
                      " >= eta0 = " + std::to_string(e0));
  TopologyReport r;
  r.eta = eta;
  const int nv = static_cast<int>(T.vertices.size());
  r.theta.resize(nv);
  r.theta_min = 2.0;
  for (int z = 0; z < nv; ++z) {
    r.theta[z] = theta(T, z);
    if (r.theta[z] > eta + kThetaTol) {
      r.theta_min = std::min(r.theta_min, r.theta[z]);
      continue;
    }
    const int m = static_cast<int>(T.vertex_tris[z].size());
    const int ne = static_cast<int>(T.vertex_edges[z].size());
    if (!T.vertex_on_boundary[z] && m == 4) {
      r.critical[z] = CriticalKind::Inner;
      r.inner.push_back(z);
    } else if (T.vertex_on_boundary[z] && ne == 2) {
      r.critical[z] = CriticalKind::Acute;
      r.acute.push_back(z);
    } else if (T.vertex_on_boundary[z] && ne == 3) {
      r.critical[z] = CriticalKind::Flat;
      r.flat.push_back(z);
    } else if (T.vertex_on_boundary[z] && ne == 4) {
      r.critical[z] = CriticalKind::Concave;
      r.concave.push_back(z);
    } else {
      throw UnclassifiableCritical(
          "classify_critical: eta-critical vertex " + std::to_string(z) +
          " matches none of the four categories (eta exceeds the admissible range)");
    }
  }
  if (r.theta_min > 1.5) r.theta_min = 0.0;  // all vertices critical
  return r;
}

inline FanDecomposition fan_decomposition(const Triangulation& T, TopologyReport& report) {
  FanDecomposition fd;
  std::vector<int> obtuse;
  for (const auto& [z, kind] : report.critical)
    if (kind != CriticalKind::Acute) obtuse.push_back(z);

  // E(z): interior incident edge whose opposite endpoint has maximal Theta,
  // ties broken by lowest vertex index (flat points have a unique choice).
  std::map<int, int> apex_of;
  for (int z : obtuse) {
    int best_edge = -1, best_apex = -1;
    double best_theta = -1.0;
    for (int e : T.vertex_edges[z]) {
      if (T.edges[e].boundary) continue;
      const int other = T.edges[e].v[0] == z ? T.edges[e].v[1] : T.edges[e].v[0];
      const double th = report.theta[other];
      if (th > best_theta + 1e-15 ||
          (std::abs(th - best_theta) <= 1e-15 && other < best_apex)) {
        best_theta = th;
        best_edge = e;
        best_apex = other;
      }
    }
    if (best_edge == -1)
      throw UnclassifiableCritical("fan_decomposition: obtuse critical vertex " +
                                   std::to_string(z) + " has no interior edge");
    if (report.critical.count(best_apex))
      throw ApexCritical("fan_decomposition: apex " + std::to_string(best_apex) +
                         " of critical vertex " + std::to_string(z) +
                         " is itself eta-critical (eta too large)");
    report.chosen_edge[z] = best_edge;
    apex_of[z] = best_apex;
  }

  // group by apex, then split into edge-connected components
  std::map<int, std::vector<int>> by_apex;
  for (int z : obtuse) by_apex[apex_of[z]].push_back(z);

  for (auto& [apex, zs] : by_apex) {
    std::set<int> remaining(zs.begin(), zs.end());
    auto connected = [&](int a, int b) { return T.edge_between(a, b) >= 0; };
    while (!remaining.empty()) {
      std::vector<int> comp{*remaining.begin()};
      remaining.erase(remaining.begin());
      bool grew = true;
      while (grew) {
        grew = false;
        for (auto it = remaining.begin(); it != remaining.end();) {
          bool touches = false;
          for (int c : comp) touches = touches || connected(*it, c);
          if (touches) {
            comp.push_back(*it);
            it = remaining.erase(it);
            grew = true;
          } else {
            ++it;
          }
        }
      }
      // order along the chain: sort by angle around the apex
      std::sort(comp.begin(), comp.end(), [&](int a, int b) {
        const Vec2 pa = T.vertices[a] - T.vertices[apex];
        const Vec2 pb = T.vertices[b] - T.vertices[apex];
        return std::atan2(pa.y(), pa.x()) < std::atan2(pb.y(), pb.x());
      });
      // the chain may wrap the atan2 branch cut; rotate so consecutive
      // members are edge-connected
      const int n = static_cast<int>(comp.size());
      for (int s = 0; s < n; ++s) {
        bool ok = true;
        for (int i = 0; i + 1 < n; ++i)
          ok = ok && connected(comp[(s + i) % n], comp[(s + i + 1) % n]);
        if (ok) {
          std::rotate(comp.begin(), comp.begin() + s, comp.end());
          break;
        }
      }
      Fan fan;
      fan.apex = apex;
      fan.members = comp;
      for (int z : comp) {
        const int e = report.chosen_edge[z];
        fan.edges.push_back(e);
        const Vec2 dir = (T.vertices[apex] - T.vertices[z]).normalized();
        fan.normals.push_back(rot90ccw(dir));
      }
      fd.fans.push_back(std::move(fan));
    }
  }

  // fan triangles K_{l,1..n+1}: K_{l,j} and K_{l,j+1} are adjacent to the
  // edge [z_{l,j}, apex]; orient the member chain counterclockwise around
  // the apex so that K_{l,j} precedes the j-th edge.
  for (Fan& fan : fd.fans) {
    const int n = static_cast<int>(fan.members.size());
    // ensure CCW: cross of successive member directions positive
    if (n >= 2) {
      const Vec2 d0 = T.vertices[fan.members[0]] - T.vertices[fan.apex];
      const Vec2 d1 = T.vertices[fan.members[1]] - T.vertices[fan.apex];
      if (cross2(d0, d1) < 0) {
        std::reverse(fan.members.begin(), fan.members.end());
        std::reverse(fan.edges.begin(), fan.edges.end());
        fan.normals.clear();
        for (int z : fan.members)
          fan.normals.push_back(rot90ccw((T.vertices[fan.apex] - T.vertices[z]).normalized()));
      }
    }
    fan.tris.resize(n + 1);
    for (int j = 0; j < n; ++j) {
      const auto& E = T.edges[fan.edges[j]];
      // of the two adjacent triangles, K_{l,j} is clockwise of the edge
      // (contains z_{l,j-1} side), K_{l,j+1} counterclockwise
      const Vec2 dir = T.vertices[fan.members[j]] - T.vertices[fan.apex];
      for (int s = 0; s < 2; ++s) {
        const int t = E.tri[s];
        if (t < 0) continue;
        const int opp = T.opposite_vertex(t, fan.edges[j]);
        const double side = cross2(dir, T.vertices[opp] - T.vertices[fan.apex]);
        if (side < 0)
          fan.tris[j] = t;  // clockwise side
        else
          fan.tris[j + 1] = t;
      }
    }
    fan.tri_angles.resize(n + 1);
    for (int j = 0; j <= n; ++j) {
      const int t = fan.tris[j];
      const double at_apex = T.angle_at(t, fan.apex);
      double at_zj = 0.0, at_zjm1 = 0.0;
      if (j < n) at_zj = T.angle_at(t, fan.members[j]);
      if (j > 0) at_zjm1 = T.angle_at(t, fan.members[j - 1]);
      if (j == n && n >= 1) {
        // K_{l,n+1}: angle "2" sits at its outer third vertex
        const int e = fan.edges[n - 1];
        const int opp = T.opposite_vertex(t, e);
        at_zj = T.angle_at(t, opp);
      }
      if (j == 0 && n >= 1) {
        const int e = fan.edges[0];
        const int opp = T.opposite_vertex(t, e);
        at_zjm1 = T.angle_at(t, opp);
      }
      fan.tri_angles[j] = {at_apex, at_zj, at_zjm1};
    }
  }
  report.fans = fd;
  return fd;
}

/// Step-by-step extension (T_1 subset ... subset T_L = T).  T_1 is a maximal
/// edge-connected subset without acute critical points, grown greedily from
/// the patch of the lowest-index interior vertex; L = 0 iff T_1 = T.
inline std::pair<int, std::vector<std::vector<int>>> extension_sequence(const Triangulation& T) {
  const int nt = static_cast<int>(T.triangles.size());
  int seed_vertex = -1;
  for (int v = 0; v < static_cast<int>(T.vertices.size()); ++v)
    if (!T.vertex_tris[v].empty() && !T.vertex_on_boundary[v]) {
      seed_vertex = v;
      break;
    }
  if (seed_vertex < 0)
    throw NoInnerVertex("extension_sequence: triangulation has no interior vertex");

  std::vector<char> in_set(nt, 0);
  auto acute_free = [&](const std::vector<char>& sel) {
    // count edges per vertex within the selected subset
    std::map<int, std::set<int>> vedges;
    std::map<std::array<int, 2>, int> count;
    for (int t = 0; t < nt; ++t) {
      if (!sel[t]) continue;
      for (int i = 0; i < 3; ++i) {
        int a = T.triangles[t][(i + 1) % 3], b = T.triangles[t][(i + 2) % 3];
        if (a > b) std::swap(a, b);
        count[{a, b}]++;
      }
    }
    for (const auto& [e, c] : count) {
      vedges[e[0]].insert(e[1]);
      vedges[e[1]].insert(e[0]);
    }
    for (const auto& [v, nbrs] : vedges) {
      // boundary vertex of the subset with exactly two incident edges
      bool on_sub_boundary = false;
      for (int nb : nbrs) {
        int a = std::min(v, nb), b = std::max(v, nb);
        if (count[{a, b}] == 1) on_sub_boundary = true;
      }
      if (on_sub_boundary && nbrs.size() == 2) return false;
    }
    return true;
  };

  for (int t : T.vertex_tris[seed_vertex]) in_set[t] = 1;
  if (!acute_free(in_set))
    throw NotExhaustive("extension_sequence: seed patch has an acute critical point");

  auto shares_edge_with_set = [&](int t, const std::vector<char>& sel) {
    for (int i = 0; i < 3; ++i) {
      const auto& E = T.edges[T.tri_edges[t][i]];
      const int other = (E.tri[0] == t) ? E.tri[1] : E.tri[0];
      if (other >= 0 && sel[other]) return true;
    }
    return false;
  };

  // grow towards a maximal acute-free subset: whole nodal patches first (a
  // single new triangle always exposes its far vertex with two edges), then
  // single triangles, finally whole leftover components
  bool grew = true;
  while (grew) {
    grew = false;
    for (int v = 0; v < static_cast<int>(T.vertices.size()); ++v) {
      bool touches = false, missing = false;
      for (int t : T.vertex_tris[v]) {
        if (in_set[t])
          touches = true;
        else
          missing = true;
        touches = touches || shares_edge_with_set(t, in_set);
      }
      if (!touches || !missing) continue;
      std::vector<char> trial = in_set;
      for (int t : T.vertex_tris[v]) trial[t] = 1;
      bool connected = false;
      for (int t : T.vertex_tris[v]) connected = connected || shares_edge_with_set(t, in_set) || in_set[t];
      if (connected && acute_free(trial)) {
        in_set = std::move(trial);
        grew = true;
      }
    }
    for (int t = 0; t < nt; ++t) {
      if (in_set[t] || !shares_edge_with_set(t, in_set)) continue;
      in_set[t] = 1;
      if (acute_free(in_set)) {
        grew = true;
      } else {
        in_set[t] = 0;
      }
    }
    if (!grew) {
      // absorb whole edge-connected leftover components when admissible
      std::vector<char> seen = in_set;
      for (int t0 = 0; t0 < nt; ++t0) {
        if (seen[t0]) continue;
        std::vector<int> comp{t0};
        seen[t0] = 1;
        for (std::size_t i = 0; i < comp.size(); ++i)
          for (int e = 0; e < 3; ++e) {
            const auto& E = T.edges[T.tri_edges[comp[i]][e]];
            const int other = (E.tri[0] == comp[i]) ? E.tri[1] : E.tri[0];
            if (other >= 0 && !seen[other]) {
              seen[other] = 1;
              comp.push_back(other);
            }
          }
        bool attached = false;
        for (int t : comp) attached = attached || shares_edge_with_set(t, in_set);
        if (!attached) continue;
        std::vector<char> trial = in_set;
        for (int t : comp) trial[t] = 1;
        if (acute_free(trial)) {
          in_set = std::move(trial);
          grew = true;
        }
      }
    }
  }

  std::vector<std::vector<int>> layers;
  std::vector<int> first;
  for (int t = 0; t < nt; ++t)
    if (in_set[t]) first.push_back(t);
  layers.push_back(first);

  int L = 0;
  std::vector<char> covered = in_set;
  while (true) {
    if (std::all_of(covered.begin(), covered.end(), [](char c) { return c != 0; })) break;
    // attach every triangle sharing an edge with the current edge set
    std::vector<int> added;
    for (int t = 0; t < nt; ++t)
      if (!covered[t] && shares_edge_with_set(t, covered)) added.push_back(t);
    if (added.empty())
      throw NotExhaustive("extension_sequence: mesh is not edge-connected to the seed set");
    for (int t : added) covered[t] = 1;
    std::vector<int> layer = layers.back();
    layer.insert(layer.end(), added.begin(), added.end());
    layers.push_back(std::move(layer));
    ++L;
  }
  return {L, layers};
}

inline TopologyReport topology_report(const Triangulation& T, double eta) {
  TopologyReport r = classify_critical(T, eta);
  fan_decomposition(T, r);
  try {
    auto [L, layers] = extension_sequence(T);
    r.extension_L = L;
    r.extension_layers = std::move(layers);
  } catch (const NoInnerVertex&) {
    r.extension_L = -1;  // no interior vertex; odd-k workflows reject this mesh
  }
  return r;
}

// ---------------------------------------------------------------------------
// generators

inline Triangulation crisscross(int n) {
  if (n < 1) throw std::invalid_argument("crisscross: n must be >= 1");
  std::vector<Vec2> vs;
  const double h = 1.0 / n;
  auto grid = [&](int i, int j) { return i * (n + 1) + j; };
  for (int i = 0; i <= n; ++i)
    for (int j = 0; j <= n; ++j) vs.emplace_back(j * h, i * h);
  std::vector<std::array<int, 3>> ts;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const int c = static_cast<int>(vs.size());
      vs.emplace_back((j + 0.5) * h, (i + 0.5) * h);
      const int sw = grid(i, j), se = grid(i, j + 1), ne = grid(i + 1, j + 1), nw = grid(i + 1, j);
      ts.push_back({sw, se, c});
      ts.push_back({se, ne, c});
      ts.push_back({ne, nw, c});
      ts.push_back({nw, sw, c});
    }
  return validate(std::move(vs), std::move(ts));
}

inline Triangulation diagonal_square(int n) {
  if (n < 1) throw std::invalid_argument("diagonal_square: n must be >= 1");
  std::vector<Vec2> vs;
  const double h = 1.0 / n;
  auto grid = [&](int i, int j) { return i * (n + 1) + j; };
  for (int i = 0; i <= n; ++i)
    for (int j = 0; j <= n; ++j) vs.emplace_back(j * h, i * h);
  std::vector<std::array<int, 3>> ts;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const int sw = grid(i, j), se = grid(i, j + 1), ne = grid(i + 1, j + 1), nw = grid(i + 1, j);
      ts.push_back({sw, se, ne});
      ts.push_back({sw, ne, nw});
    }
  return validate(std::move(vs), std::move(ts));
}

/// Nodal patch with prescribed angles at a center vertex (unit radius).
/// Angles summing to 2 pi close the patch (interior center vertex).
inline Triangulation fan_patch(const std::vector<double>& angles) {
  if (angles.empty()) throw InvalidAngles("fan_patch: no angles given");
  double total = 0.0;
  for (double a : angles) {
    if (!(a > 0.0) || a >= M_PI) throw InvalidAngles("fan_patch: angles must lie in (0, pi)");
    total += a;
  }
  if (total > 2.0 * M_PI + 1e-12) throw InvalidAngles("fan_patch: angles sum beyond 2 pi");
  const bool closed = std::abs(total - 2.0 * M_PI) <= 1e-12;
  std::vector<Vec2> vs{Vec2(0, 0)};
  const int m = static_cast<int>(angles.size());
  const int nring = closed ? m : m + 1;
  double phi = 0.0;
  for (int i = 0; i < nring; ++i) {
    vs.emplace_back(std::cos(phi), std::sin(phi));
    if (i < m) phi += angles[i];
  }
  std::vector<std::array<int, 3>> ts;
  for (int i = 0; i < m; ++i) ts.push_back({0, 1 + i, 1 + (i + 1) % nring});
  return validate(std::move(vs), std::move(ts));
}

inline Triangulation perturb(const Triangulation& T, int vertex, const Vec2& displacement) {
  std::vector<Vec2> vs = T.vertices;
  if (vertex < 0 || vertex >= static_cast<int>(vs.size()))
    throw std::invalid_argument("perturb: vertex index out of range");
  vs[vertex] += displacement;
  return validate(std::move(vs), std::vector<std::array<int, 3>>(T.triangles));
}

}  // namespace crstokes

#endif  // CRSTOKES_MESH_HPP
