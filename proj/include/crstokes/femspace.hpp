#ifndef CRSTOKES_FEMSPACE_HPP
#define CRSTOKES_FEMSPACE_HPP

#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "crstokes/mesh.hpp"
#include "crstokes/orthopoly.hpp"

namespace crstokes {

struct PointOutsidePatch : std::runtime_error {
  explicit PointOutsidePatch(const std::string& what) : std::runtime_error(what) {}
};
struct PointOutsideTriangle : std::runtime_error {
  explicit PointOutsideTriangle(const std::string& what) : std::runtime_error(what) {}
};
struct ParityMismatch : std::runtime_error {
  explicit ParityMismatch(const std::string& what) : std::runtime_error(what) {}
};

using Bary = std::array<double, 3>;

// ---------------------------------------------------------------------------
// orthogonal (Dubiner-type) polynomial basis on the triangle, evaluated in
// barycentric form.  The axis factor is the homogenized Legendre polynomial
//   G_m(l1,l2) = (l1+l2)^m P_m((l2-l1)/(l1+l2)),
// computed by the division-free recurrence
//   (m+1) G_{m+1} = (2m+1)(l2-l1) G_m - m (l1+l2)^2 G_{m-1},
// so there is no singular collapsed coordinate anywhere in the closed triangle.

inline int tri_basis_dim(int k) { return (k + 1) * (k + 2) / 2; }

struct TriBasisValues {
  Eigen::VectorXd value;              // per mode
  Eigen::Matrix<double, 3, Eigen::Dynamic> dlambda;  // formal partials wrt l1,l2,l3
};

inline TriBasisValues tri_basis_eval(int k, const Bary& l, bool with_derivatives = true) {
  const int n_modes = tri_basis_dim(k);
  TriBasisValues out;
  out.value.resize(n_modes);
  if (with_derivatives) out.dlambda.resize(3, n_modes);

  const double u = l[1] - l[0];
  const double w = l[0] + l[1];
  const double b = 2.0 * l[2] - 1.0;

  // G_m and its formal partials wrt l1 (u' = -1, w' = 1) and l2 (u' = 1, w' = 1)
  std::vector<double> G(k + 1), G1(k + 1), G2(k + 1);
  G[0] = 1.0;
  G1[0] = G2[0] = 0.0;
  if (k >= 1) {
    G[1] = u;
    G1[1] = -1.0;
    G2[1] = 1.0;
  }
  for (int m = 1; m < k; ++m) {
    const double c1 = (2.0 * m + 1.0) / (m + 1.0);
    const double c2 = static_cast<double>(m) / (m + 1.0);
    G[m + 1] = c1 * u * G[m] - c2 * w * w * G[m - 1];
    G1[m + 1] = c1 * (-G[m] + u * G1[m]) - c2 * (2.0 * w * G[m - 1] + w * w * G1[m - 1]);
    G2[m + 1] = c1 * (G[m] + u * G2[m]) - c2 * (2.0 * w * G[m - 1] + w * w * G2[m - 1]);
  }

  int idx = 0;
  for (int m = 0; m <= k; ++m) {
    for (int n = 0; n <= k - m; ++n, ++idx) {
      const LegendreValue j = detail::jacobi_eval(n, 2.0 * m + 1.0, 0.0, b);
      out.value(idx) = G[m] * j.value;
      if (with_derivatives) {
        out.dlambda(0, idx) = G1[m] * j.value;
        out.dlambda(1, idx) = G2[m] * j.value;
        out.dlambda(2, idx) = G[m] * 2.0 * j.derivative;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// quadrature on the reference triangle (area 1/2) via the collapsed tensor
// rule Gauss-Legendre x Gauss-Jacobi(weight (1-t))

struct QuadRule {
  int declared_degree = 0;
  std::vector<Bary> points;
  std::vector<double> weights;  // sum to 1/2 (reference area)
};

/// Collapsed tensor rule with n = ceil(degree/2)+1 points per direction;
/// self-tests all reference monomials up to the declared degree.
inline QuadRule quad_rule(int degree) {
  if (degree < 0) throw std::invalid_argument("quad_rule: negative degree");
  const int n = degree / 2 + 1 + (degree % 2);  // ceil(degree/2) + 1
  const GaussRule gl = gauss_legendre(n);
  const GaussRule gj = gauss_jacobi10(n);
  QuadRule rule;
  rule.declared_degree = degree;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double uu = 0.5 * (gl.points[i] + 1.0);
      const double vv = 0.5 * (gj.points[j] + 1.0);
      const double x = uu * (1.0 - vv);
      const double y = vv;
      rule.points.push_back({1.0 - x - y, x, y});
      rule.weights.push_back(0.5 * gl.weights[i] * 0.25 * gj.weights[j]);
    }
  // construction self-test: reference monomials x^a y^b
  for (int a = 0; a + 0 <= degree; ++a)
    for (int bb = 0; a + bb <= degree; ++bb) {
      double s = 0.0;
      for (std::size_t q = 0; q < rule.points.size(); ++q)
        s += rule.weights[q] * std::pow(rule.points[q][1], a) * std::pow(rule.points[q][2], bb);
      double exact = 1.0;
      for (int i = 1; i <= a; ++i) exact *= i;
      for (int i = 1; i <= bb; ++i) exact *= i;
      for (int i = 1; i <= a + bb + 2; ++i) exact /= i;
      if (std::abs(s - exact) > 1e-13 * std::max(1.0, std::abs(exact)))
        throw std::runtime_error("quad_rule: self-test failed at monomial (" +
                                 std::to_string(a) + "," + std::to_string(bb) + ")");
    }
  return rule;
}

// ---------------------------------------------------------------------------
// per-triangle affine data

struct BarycentricFrame {
  std::array<Vec2, 3> grad_lambda;
  double area = 0.0;

  BarycentricFrame() = default;
  BarycentricFrame(const Triangulation& T, int tri) {
    const Vec2 a = T.vertices[T.triangles[tri][0]];
    const Vec2 b = T.vertices[T.triangles[tri][1]];
    const Vec2 c = T.vertices[T.triangles[tri][2]];
    area = 0.5 * cross2(b - a, c - a);
    grad_lambda[0] = rot90ccw(c - b) / (2.0 * area);
    grad_lambda[1] = rot90ccw(a - c) / (2.0 * area);
    grad_lambda[2] = rot90ccw(b - a) / (2.0 * area);
  }
};

/// Normal derivative of the barycentric coordinate lambda_{K,A_i} at the edge
/// E_k (outward normal):  |E_i|/(2|K|) * (-1 if i=k else cos(alpha_l)),
/// {l,i,k} = {1,2,3}.
inline double barycentric_normal_derivative(const Triangulation& T, int tri, int i, int k_edge) {
  if (i < 1 || i > 3 || k_edge < 1 || k_edge > 3)
    throw std::invalid_argument("barycentric_normal_derivative: indices must be in {1,2,3}");
  const double Ei = T.edges[T.tri_edges[tri][i - 1]].length;
  const double K = T.area[tri];
  if (i == k_edge) return Ei / (2.0 * K) * -1.0;
  const int l = 6 - i - k_edge;  // remaining index
  const double alpha = T.angle_at(tri, T.triangles[tri][l - 1]);
  return Ei / (2.0 * K) * std::cos(alpha);
}

// ---------------------------------------------------------------------------
// non-conforming Crouzeix-Raviart bubbles

/// Edge bubble (odd k): L_k(1 - 2 lambda_{K,A_{K,E}}) on each K of the edge
/// patch, zero elsewhere.
inline double cr_edge_bubble_eval(const Triangulation& T, int edge, int k, const Vec2& p) {
  if (k % 2 == 0) throw ParityMismatch("cr_edge_bubble_eval: k must be odd");
  const auto& E = T.edges[edge];
  for (int s = 0; s < 2; ++s) {
    const int t = E.tri[s];
    if (t < 0) continue;
    const Bary l = T.barycentric3(t, p);
    if (l[0] >= -1e-12 && l[1] >= -1e-12 && l[2] >= -1e-12) {
      const int opp = T.opposite_vertex(t, edge);
      const int loc = T.local_vertex_index(t, opp);
      return legendre_eval(k, 1.0 - 2.0 * l[loc]).value;
    }
  }
  throw PointOutsidePatch("cr_edge_bubble_eval: point outside the edge patch");
}

/// Triangle bubble (even k): (-1 + sum_i L_k(1 - 2 lambda_i))/2 on K.
inline double cr_triangle_bubble_eval(const Triangulation& T, int tri, int k, const Vec2& p) {
  if (k % 2 == 1) throw ParityMismatch("cr_triangle_bubble_eval: k must be even");
  const Bary l = T.barycentric3(tri, p);
  if (l[0] < -1e-12 || l[1] < -1e-12 || l[2] < -1e-12)
    throw PointOutsideTriangle("cr_triangle_bubble_eval: point outside the triangle");
  double s = -1.0;
  for (int i = 0; i < 3; ++i) s += legendre_eval(k, 1.0 - 2.0 * l[i]).value;
  return 0.5 * s;
}

// ---------------------------------------------------------------------------
// Lagrange nodal basis on the reference triangle (equispaced nodes)

struct NodalBasis {
  int k = 1;
  std::vector<std::array<int, 2>> nodes;  // (i,j): bary = ((k-i-j)/k, i/k, j/k)
  Eigen::PartialPivLU<Eigen::MatrixXd> vt_lu;

  explicit NodalBasis(int degree) : k(degree) {
    if (k < 1) throw std::invalid_argument("NodalBasis: degree must be >= 1");
    for (int i = 0; i <= k; ++i)
      for (int j = 0; j <= k - i; ++j) nodes.push_back({i, j});
    const int n = tri_basis_dim(k);
    Eigen::MatrixXd V(n, n);
    for (int r = 0; r < n; ++r) {
      const Bary l = node_bary(r);
      V.row(r) = tri_basis_eval(k, l, false).value.transpose();
    }
    vt_lu.compute(V.transpose());
  }

  Bary node_bary(int r) const {
    const double i = nodes[r][0], j = nodes[r][1];
    return {1.0 - (i + j) / k, i / k, j / k};
  }

  Eigen::VectorXd eval(const Bary& l) const {
    return vt_lu.solve(tri_basis_eval(k, l, false).value);
  }

  /// values plus formal lambda-partials of every nodal function
  void eval_with_partials(const Bary& l, Eigen::VectorXd& values,
                          Eigen::Matrix<double, 3, Eigen::Dynamic>& partials) const {
    const TriBasisValues tb = tri_basis_eval(k, l, true);
    values = vt_lu.solve(tb.value);
    partials.resize(3, tb.dlambda.cols());
    for (int d = 0; d < 3; ++d)
      partials.row(d) = vt_lu.solve(tb.dlambda.row(d).transpose()).transpose();
  }
};

// ---------------------------------------------------------------------------
// global degree-of-freedom enumeration

enum class Space { ScalarCR0, VectorCR0, ScalarS0, VectorS0, ScalarS, VectorS, Pressure };

enum class DofKind { Node, EdgeBubble, TriBubble, PressureMode };

struct GlobalNode {
  enum class Loc { Vertex, Edge, Interior } loc;
  int entity;    // vertex, edge or triangle index
  int a = 0;     // edge: position 1..k-1 along the global edge; interior: i
  int b = 0;     // interior: j
  Vec2 pos = Vec2::Zero();
  bool on_boundary = false;
};

struct LocalDof {
  int global = -1;    // scalar slot (component folded in later for vector spaces)
  DofKind kind = DofKind::Node;
  int local_index = 0;  // node id / local edge (opposite vertex) / pressure mode
};

struct DofMap {
  Space space = Space::ScalarCR0;
  int k = 1;           // polynomial degree of the space
  int scalar_dim = 0;  // number of scalar slots
  int ncomp = 1;
  int dim = 0;  // scalar_dim * ncomp

  std::vector<GlobalNode> global_nodes;            // Lagrange slots only
  std::vector<int> dof_of_node;                    // node id -> scalar slot (-1 if excluded)
  std::vector<int> dof_of_edge_bubble;             // edge -> scalar slot
  std::vector<int> dof_of_tri_bubble;              // tri -> scalar slot
  std::vector<std::vector<LocalDof>> tri_dofs;     // per-triangle scalar dofs
  std::vector<int> pressure_offset;                // Pressure: first mode slot per tri

  bool is_vector() const { return ncomp == 2; }
  int vector_dof(int scalar_slot, int comp) const { return 2 * scalar_slot + comp; }
};

namespace detail {

inline void enumerate_nodes(const Triangulation& T, int k, DofMap& m,
                            std::map<std::array<int, 3>, int>& node_id) {
  // vertex nodes
  for (int v = 0; v < static_cast<int>(T.vertices.size()); ++v) {
    GlobalNode n;
    n.loc = GlobalNode::Loc::Vertex;
    n.entity = v;
    n.pos = T.vertices[v];
    n.on_boundary = T.vertex_on_boundary[v];
    node_id[{0, v, 0}] = static_cast<int>(m.global_nodes.size());
    m.global_nodes.push_back(n);
  }
  // edge nodes
  for (int e = 0; e < static_cast<int>(T.edges.size()); ++e)
    for (int s = 1; s < k; ++s) {
      GlobalNode n;
      n.loc = GlobalNode::Loc::Edge;
      n.entity = e;
      n.a = s;
      const auto& E = T.edges[e];
      n.pos = T.vertices[E.v[0]] + (static_cast<double>(s) / k) *
                                       (T.vertices[E.v[1]] - T.vertices[E.v[0]]);
      n.on_boundary = E.boundary;
      node_id[{1, e, s}] = static_cast<int>(m.global_nodes.size());
      m.global_nodes.push_back(n);
    }
  // interior nodes
  for (int t = 0; t < static_cast<int>(T.triangles.size()); ++t)
    for (int i = 1; i < k; ++i)
      for (int j = 1; i + j < k; ++j) {
        GlobalNode n;
        n.loc = GlobalNode::Loc::Interior;
        n.entity = t;
        n.a = i;
        n.b = j;
        n.pos = T.vertices[T.triangles[t][0]] * (1.0 - (i + j) / static_cast<double>(k)) +
                T.vertices[T.triangles[t][1]] * (i / static_cast<double>(k)) +
                T.vertices[T.triangles[t][2]] * (j / static_cast<double>(k));
        n.on_boundary = false;
        node_id[{2, t, i * (k + 1) + j}] = static_cast<int>(m.global_nodes.size());
        m.global_nodes.push_back(n);
      }
}

// global node id of the local node (i,j) of triangle t
inline int local_to_global_node(const Triangulation& T, int k, int t,
                                const std::array<int, 2>& ij,
                                const std::map<std::array<int, 3>, int>& node_id) {
  const int i = ij[0], j = ij[1];
  const int l1 = k - i - j;
  const std::array<int, 3> bc = {l1, i, j};
  int zero_count = 0, pos_local = -1;
  for (int d = 0; d < 3; ++d)
    if (bc[d] == 0) ++zero_count;
  if (zero_count == 2) {
    for (int d = 0; d < 3; ++d)
      if (bc[d] == k) pos_local = d;
    return node_id.at({0, T.triangles[t][pos_local], 0});
  }
  if (zero_count == 1) {
    int opp = -1;
    for (int d = 0; d < 3; ++d)
      if (bc[d] == 0) opp = d;
    const int e = T.tri_edges[t][opp];
    const auto& E = T.edges[e];
    // barycentric weight of the edge's global head vertex v[1]
    const int head_local = T.local_vertex_index(t, E.v[1]);
    const int s = bc[head_local];
    return node_id.at({1, e, s});
  }
  return node_id.at({2, t, i * (k + 1) + j});
}

}  // namespace detail

inline DofMap build_dofmap(const Triangulation& T, int k, Space space) {
  DofMap m;
  m.space = space;
  m.k = k;
  m.ncomp = (space == Space::VectorCR0 || space == Space::VectorS0 || space == Space::VectorS)
                ? 2
                : 1;
  const int nt = static_cast<int>(T.triangles.size());
  m.tri_dofs.assign(nt, {});

  if (space == Space::Pressure) {
    // discontinuous P_k per triangle in the orthogonal modal basis
    m.pressure_offset.resize(nt);
    const int nm = tri_basis_dim(k);
    for (int t = 0; t < nt; ++t) {
      m.pressure_offset[t] = m.scalar_dim;
      for (int mode = 0; mode < nm; ++mode) {
        m.tri_dofs[t].push_back({m.scalar_dim, DofKind::PressureMode, mode});
        ++m.scalar_dim;
      }
    }
    m.dim = m.scalar_dim;
    return m;
  }

  if (k < 1) throw std::invalid_argument("build_dofmap: degree must be >= 1");
  std::map<std::array<int, 3>, int> node_id;
  detail::enumerate_nodes(T, k, m, node_id);
  m.dof_of_node.assign(m.global_nodes.size(), -1);

  const bool cr = (space == Space::ScalarCR0 || space == Space::VectorCR0);
  const bool zero_bc = (space != Space::ScalarS && space != Space::VectorS);
  const bool odd = (k % 2 == 1);

  for (std::size_t n = 0; n < m.global_nodes.size(); ++n) {
    const GlobalNode& g = m.global_nodes[n];
    if (zero_bc && g.on_boundary) continue;
    if (cr && odd && g.loc == GlobalNode::Loc::Vertex) continue;  // drop interior vertices
    m.dof_of_node[n] = m.scalar_dim++;
  }
  if (cr) {
    if (odd) {
      m.dof_of_edge_bubble.assign(T.edges.size(), -1);
      for (int e = 0; e < static_cast<int>(T.edges.size()); ++e)
        if (!T.edges[e].boundary) m.dof_of_edge_bubble[e] = m.scalar_dim++;
    } else {
      m.dof_of_tri_bubble.assign(nt, -1);
      for (int t = 0; t < nt; ++t) m.dof_of_tri_bubble[t] = m.scalar_dim++;
    }
  }

  // per-triangle tables
  const NodalBasis nb(k);
  for (int t = 0; t < nt; ++t) {
    for (int r = 0; r < static_cast<int>(nb.nodes.size()); ++r) {
      const int gn = detail::local_to_global_node(T, k, t, nb.nodes[r], node_id);
      const int slot = m.dof_of_node[gn];
      if (slot >= 0) m.tri_dofs[t].push_back({slot, DofKind::Node, r});
    }
    if (cr && odd) {
      for (int le = 0; le < 3; ++le) {
        const int e = T.tri_edges[t][le];
        if (m.dof_of_edge_bubble[e] >= 0)
          m.tri_dofs[t].push_back({m.dof_of_edge_bubble[e], DofKind::EdgeBubble, le});
      }
    } else if (cr && !odd) {
      m.tri_dofs[t].push_back({m.dof_of_tri_bubble[t], DofKind::TriBubble, 0});
    }
  }
  m.dim = m.scalar_dim * m.ncomp;
  return m;
}

/// Values and physical gradients of all local scalar basis functions of
/// `map` on triangle `tri` at the given barycentric points.
struct LocalBasisTable {
  Eigen::MatrixXd value;             // (ndof_local, npts)
  std::vector<Eigen::MatrixXd> grad;  // two (ndof_local, npts) matrices (d/dx, d/dy)
};

inline LocalBasisTable local_basis_table(const Triangulation& T, const DofMap& map, int tri,
                                         const std::vector<Bary>& pts, const NodalBasis& nb) {
  const BarycentricFrame fr(T, tri);
  const int nd = static_cast<int>(map.tri_dofs[tri].size());
  const int np = static_cast<int>(pts.size());
  LocalBasisTable tab;
  tab.value.resize(nd, np);
  tab.grad.assign(2, Eigen::MatrixXd::Zero(nd, np));

  for (int q = 0; q < np; ++q) {
    Eigen::VectorXd nv;
    Eigen::Matrix<double, 3, Eigen::Dynamic> npart;
    bool have_nodal = false;
    for (int d = 0; d < nd; ++d) {
      const LocalDof& ld = map.tri_dofs[tri][d];
      switch (ld.kind) {
        case DofKind::Node: {
          if (!have_nodal) {
            nb.eval_with_partials(pts[q], nv, npart);
            have_nodal = true;
          }
          tab.value(d, q) = nv(ld.local_index);
          Vec2 g = Vec2::Zero();
          for (int i = 0; i < 3; ++i) g += npart(i, ld.local_index) * fr.grad_lambda[i];
          tab.grad[0](d, q) = g.x();
          tab.grad[1](d, q) = g.y();
          break;
        }
        case DofKind::EdgeBubble: {
          const int opp = ld.local_index;  // local vertex opposite the edge
          const auto lv = legendre_eval(map.k, 1.0 - 2.0 * pts[q][opp]);
          tab.value(d, q) = lv.value;
          const Vec2 g = -2.0 * lv.derivative * fr.grad_lambda[opp];
          tab.grad[0](d, q) = g.x();
          tab.grad[1](d, q) = g.y();
          break;
        }
        case DofKind::TriBubble: {
          double v = -1.0;
          Vec2 g = Vec2::Zero();
          for (int i = 0; i < 3; ++i) {
            const auto lv = legendre_eval(map.k, 1.0 - 2.0 * pts[q][i]);
            v += lv.value;
            g -= 2.0 * lv.derivative * fr.grad_lambda[i];
          }
          tab.value(d, q) = 0.5 * v;
          tab.grad[0](d, q) = 0.5 * g.x();
          tab.grad[1](d, q) = 0.5 * g.y();
          break;
        }
        case DofKind::PressureMode: {
          const TriBasisValues tb = tri_basis_eval(map.k, pts[q], true);
          tab.value(d, q) = tb.value(ld.local_index);
          Vec2 g = Vec2::Zero();
          for (int i = 0; i < 3; ++i) g += tb.dlambda(i, ld.local_index) * fr.grad_lambda[i];
          tab.grad[0](d, q) = g.x();
          tab.grad[1](d, q) = g.y();
          break;
        }
      }
    }
  }
  return tab;
}

// ---------------------------------------------------------------------------
// piecewise polynomial fields in the modal basis

class PiecewisePoly {
 public:
  PiecewisePoly() = default;
  PiecewisePoly(const Triangulation& T, int degree, int ncomp)
      : degree_(degree), ncomp_(ncomp) {
    coef_.assign(T.triangles.size(), Eigen::MatrixXd::Zero(ncomp, tri_basis_dim(degree)));
  }

  int degree() const { return degree_; }
  int ncomp() const { return ncomp_; }
  Eigen::MatrixXd& coef(int tri) { return coef_[tri]; }
  const Eigen::MatrixXd& coef(int tri) const { return coef_[tri]; }
  std::size_t ntris() const { return coef_.size(); }

  Eigen::VectorXd eval(int tri, const Bary& l) const {
    return coef_[tri] * tri_basis_eval(degree_, l, false).value;
  }

  /// physical gradient; rows = components, cols = (d/dx, d/dy)
  Eigen::MatrixXd grad(const Triangulation& T, int tri, const Bary& l) const {
    const BarycentricFrame fr(T, tri);
    const TriBasisValues tb = tri_basis_eval(degree_, l, true);
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(ncomp_, 2);
    for (int c = 0; c < ncomp_; ++c) {
      Vec2 acc = Vec2::Zero();
      for (int m = 0; m < coef_[tri].cols(); ++m) {
        Vec2 gl = Vec2::Zero();
        for (int i = 0; i < 3; ++i) gl += tb.dlambda(i, m) * fr.grad_lambda[i];
        acc += coef_[tri](c, m) * gl;
      }
      g(c, 0) = acc.x();
      g(c, 1) = acc.y();
    }
    return g;
  }

  double divergence_at(const Triangulation& T, int tri, const Bary& l) const {
    const Eigen::MatrixXd g = grad(T, tri, l);
    return g(0, 0) + g(1, 1);
  }

  PiecewisePoly& operator+=(const PiecewisePoly& o) {
    for (std::size_t t = 0; t < coef_.size(); ++t) coef_[t] += o.coef_[t];
    return *this;
  }
  PiecewisePoly& operator-=(const PiecewisePoly& o) {
    for (std::size_t t = 0; t < coef_.size(); ++t) coef_[t] -= o.coef_[t];
    return *this;
  }
  PiecewisePoly& operator*=(double a) {
    for (auto& c : coef_) c *= a;
    return *this;
  }

  std::vector<double> elementwise_integral(const Triangulation& T, int comp = 0) const {
    const QuadRule rule = quad_rule(degree_);
    std::vector<double> out(coef_.size(), 0.0);
    for (std::size_t t = 0; t < coef_.size(); ++t) {
      double s = 0.0;
      for (std::size_t q = 0; q < rule.points.size(); ++q)
        s += rule.weights[q] * eval(static_cast<int>(t), rule.points[q])(comp);
      out[t] = 2.0 * T.area[t] * s;
    }
    return out;
  }

  double integral(const Triangulation& T, int comp = 0) const {
    double s = 0.0;
    for (double v : elementwise_integral(T, comp)) s += v;
    return s;
  }

  double l2_norm_sq(const Triangulation& T) const {
    const QuadRule rule = quad_rule(2 * degree_);
    double s = 0.0;
    for (std::size_t t = 0; t < coef_.size(); ++t)
      for (std::size_t q = 0; q < rule.points.size(); ++q)
        s += 2.0 * T.area[t] * rule.weights[q] *
             eval(static_cast<int>(t), rule.points[q]).squaredNorm();
    return s;
  }

  double h1_seminorm_sq(const Triangulation& T) const {
    const QuadRule rule = quad_rule(std::max(0, 2 * (degree_ - 1)));
    double s = 0.0;
    for (std::size_t t = 0; t < coef_.size(); ++t)
      for (std::size_t q = 0; q < rule.points.size(); ++q)
        s += 2.0 * T.area[t] * rule.weights[q] *
             grad(T, static_cast<int>(t), rule.points[q]).squaredNorm();
    return s;
  }

  /// exact elementwise divergence as a field of one lower degree
  PiecewisePoly divergence(const Triangulation& T) const {
    PiecewisePoly div(T, std::max(0, degree_ - 1), 1);
    const QuadRule rule = quad_rule(2 * std::max(0, degree_ - 1));
    const Eigen::MatrixXd mass = modal_mass(std::max(0, degree_ - 1), rule);
    const Eigen::LLT<Eigen::MatrixXd> llt(mass);
    const int nm = tri_basis_dim(std::max(0, degree_ - 1));
    for (std::size_t t = 0; t < coef_.size(); ++t) {
      Eigen::VectorXd rhs = Eigen::VectorXd::Zero(nm);
      for (std::size_t q = 0; q < rule.points.size(); ++q) {
        const double dv = divergence_at(T, static_cast<int>(t), rule.points[q]);
        rhs += rule.weights[q] * dv *
               tri_basis_eval(std::max(0, degree_ - 1), rule.points[q], false).value;
      }
      div.coef(static_cast<int>(t)).row(0) = llt.solve(rhs).transpose();
    }
    return div;
  }

  static Eigen::MatrixXd modal_mass(int degree, const QuadRule& rule) {
    const int nm = tri_basis_dim(degree);
    Eigen::MatrixXd mass = Eigen::MatrixXd::Zero(nm, nm);
    for (std::size_t q = 0; q < rule.points.size(); ++q) {
      const Eigen::VectorXd v = tri_basis_eval(degree, rule.points[q], false).value;
      mass += rule.weights[q] * v * v.transpose();
    }
    return mass;
  }

 private:
  int degree_ = 0;
  int ncomp_ = 1;
  std::vector<Eigen::MatrixXd> coef_;
};

/// Expand a coefficient vector over `map` into per-triangle modal form.
inline PiecewisePoly to_field(const Triangulation& T, const DofMap& map,
                              const Eigen::VectorXd& coeffs) {
  PiecewisePoly f(T, map.k, map.ncomp);
  const int nm = tri_basis_dim(map.k);
  const QuadRule rule = quad_rule(2 * map.k);
  const Eigen::MatrixXd mass = PiecewisePoly::modal_mass(map.k, rule);
  const Eigen::LLT<Eigen::MatrixXd> llt(mass);
  const NodalBasis nb(map.space == Space::Pressure ? 1 : map.k);
  std::vector<Bary> pts = rule.points;
  for (int t = 0; t < static_cast<int>(T.triangles.size()); ++t) {
    if (map.space == Space::Pressure) {
      for (const LocalDof& ld : map.tri_dofs[t])
        f.coef(t)(0, ld.local_index) = coeffs(ld.global);
      continue;
    }
    const LocalBasisTable tab = local_basis_table(T, map, t, pts, nb);
    for (int c = 0; c < map.ncomp; ++c) {
      Eigen::VectorXd rhs = Eigen::VectorXd::Zero(nm);
      for (std::size_t q = 0; q < pts.size(); ++q) {
        double val = 0.0;
        for (int d = 0; d < static_cast<int>(map.tri_dofs[t].size()); ++d) {
          const int g = map.is_vector() ? map.vector_dof(map.tri_dofs[t][d].global, c)
                                        : map.tri_dofs[t][d].global;
          val += coeffs(g) * tab.value(d, q);
        }
        rhs += rule.weights[q] * val * tri_basis_eval(map.k, pts[q], false).value;
      }
      f.coef(t).row(c) = llt.solve(rhs).transpose();
    }
  }
  return f;
}

/// Least-squares expansion of a piecewise polynomial in the basis of `map`;
/// returns the coefficients and the worst-case pointwise mismatch (a field
/// genuinely in the space reproduces itself to round-off).
inline std::pair<Eigen::VectorXd, double> from_field(const Triangulation& T, const DofMap& map,
                                                     const PiecewisePoly& f) {
  const NodalBasis nb(map.k);
  const int nt = static_cast<int>(T.triangles.size());
  std::vector<Bary> pts;
  for (int r = 0; r < static_cast<int>(nb.nodes.size()); ++r) pts.push_back(nb.node_bary(r));
  const int rows_per = static_cast<int>(pts.size()) * map.ncomp;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(rows_per * nt, map.dim);
  Eigen::VectorXd b(rows_per * nt);
  for (int t = 0; t < nt; ++t) {
    const LocalBasisTable tab = local_basis_table(T, map, t, pts, nb);
    for (std::size_t q = 0; q < pts.size(); ++q) {
      const Eigen::VectorXd val = f.eval(t, pts[q]);
      for (int c = 0; c < map.ncomp; ++c) {
        const int row = t * rows_per + static_cast<int>(q) * map.ncomp + c;
        b(row) = val(c);
        for (int d = 0; d < static_cast<int>(map.tri_dofs[t].size()); ++d) {
          const int g = map.is_vector() ? map.vector_dof(map.tri_dofs[t][d].global, c)
                                        : map.tri_dofs[t][d].global;
          A(row, g) += tab.value(d, q);
        }
      }
    }
  }
  const Eigen::VectorXd x = A.colPivHouseholderQr().solve(b);
  const double resid = (A * x - b).lpNorm<Eigen::Infinity>();
  return {x, resid};
}

}  // namespace crstokes

#endif  // CRSTOKES_FEMSPACE_HPP
