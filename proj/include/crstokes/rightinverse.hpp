#ifndef CRSTOKES_RIGHTINVERSE_HPP
#define CRSTOKES_RIGHTINVERSE_HPP

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "crstokes/assembly.hpp"
#include "crstokes/femspace.hpp"
#include "crstokes/infsup.hpp"
#include "crstokes/mesh.hpp"
#include "crstokes/orthopoly.hpp"

namespace crstokes {

struct SingularInteriorSolve : std::runtime_error {
  explicit SingularInteriorSolve(const std::string& what) : std::runtime_error(what) {}
};
struct FanSingular : std::runtime_error {
  explicit FanSingular(const std::string& what) : std::runtime_error(what) {}
};
struct UnderdeterminedMeans : std::runtime_error {
  explicit UnderdeterminedMeans(const std::string& what) : std::runtime_error(what) {}
};
struct ConstraintInfeasible : std::runtime_error {
  explicit ConstraintInfeasible(const std::string& what) : std::runtime_error(what) {}
};
struct PreconditionViolated : std::runtime_error {
  explicit PreconditionViolated(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// constrained minimal-energy solves (null-space method)

namespace detail {

struct ConstrainedMin {
  Eigen::VectorXd solution;
  double constraint_residual = 0.0;
};

inline ConstrainedMin minimize_energy(const Eigen::MatrixXd& S, const Eigen::MatrixXd& C,
                                      const Eigen::VectorXd& g) {
  ConstrainedMin out;
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(C);
  const Eigen::VectorXd up = cod.solve(g);
  out.constraint_residual = (C * up - g).norm() / std::max(1.0, g.norm());
  Eigen::FullPivLU<Eigen::MatrixXd> lu(C);
  lu.setThreshold(1e-9);
  const Eigen::MatrixXd Z = lu.kernel();
  if (lu.dimensionOfKernel() == 0 || Z.cols() == 0 ||
      (Z.cols() == 1 && Z.norm() == 0.0)) {
    out.solution = up;
    return out;
  }
  const Eigen::MatrixXd Sz = Z.transpose() * S * Z;
  const Eigen::VectorXd rhs = -Z.transpose() * (S * up);
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(Sz);
  if (ldlt.info() != Eigen::Success)
    throw SingularInteriorSolve("minimize_energy: reduced energy system is singular");
  out.solution = up + Z * ldlt.solve(rhs);
  return out;
}

/// modal stiffness sum over gradients on one physical triangle
inline Eigen::MatrixXd modal_stiffness(const Triangulation& T, int tri, int degree) {
  const BarycentricFrame fr(T, tri);
  const QuadRule rule = quad_rule(std::max(0, 2 * (degree - 1)));
  const int nm = tri_basis_dim(degree);
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(nm, nm);
  for (std::size_t q = 0; q < rule.points.size(); ++q) {
    const TriBasisValues tb = tri_basis_eval(degree, rule.points[q], true);
    Eigen::MatrixXd g(2, nm);
    for (int m = 0; m < nm; ++m) {
      Vec2 gm = Vec2::Zero();
      for (int i = 0; i < 3; ++i) gm += tb.dlambda(i, m) * fr.grad_lambda[i];
      g(0, m) = gm.x();
      g(1, m) = gm.y();
    }
    S += 2.0 * T.area[tri] * rule.weights[q] * (g.transpose() * g);
  }
  return S;
}

/// modal coefficients of an evaluator in barycentric form (exact for
/// polynomials of the given degree; triangle-independent representation)
inline Eigen::VectorXd modal_project(int degree, const std::function<double(const Bary&)>& f) {
  const QuadRule rule = quad_rule(2 * degree);
  const Eigen::MatrixXd mass = PiecewisePoly::modal_mass(degree, rule);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(tri_basis_dim(degree));
  for (std::size_t q = 0; q < rule.points.size(); ++q)
    rhs += rule.weights[q] * f(rule.points[q]) * tri_basis_eval(degree, rule.points[q], false).value;
  return Eigen::LLT<Eigen::MatrixXd>(mass).solve(rhs);
}

/// index of mode (m,n) in the degree-k enumeration
inline int modal_index(int k, int m, int n) {
  int idx = 0;
  for (int mm = 0; mm < m; ++mm) idx += k + 1 - mm;
  return idx + n;
}

/// trace-constraint rows: modal basis values at k+1 interior Gauss points per edge
inline void edge_trace_constraints(int k, int local_edge, Eigen::MatrixXd& C,
                                   std::vector<Bary>& pts, int row0) {
  const GaussRule g = gauss_legendre(k + 1);
  const int a = (local_edge + 1) % 3;
  const int b = (local_edge + 2) % 3;
  for (int i = 0; i <= k; ++i) {
    const double t = 0.5 * (g.points[i] + 1.0);
    Bary l{0.0, 0.0, 0.0};
    l[local_edge] = 0.0;
    l[a] = 1.0 - t;
    l[b] = t;
    pts.push_back(l);
    C.row(row0 + i) = tri_basis_eval(k, l, false).value.transpose();
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// extended non-conforming bubbles

struct ExtendedBubble {
  bool edge_based = true;
  int entity = -1;  // edge index (odd k) or triangle index (even k)
  int k = 0;
  PiecewisePoly field;             // scalar, degree k, zero off the support
  std::map<int, double> alpha;     // correction coefficient per support triangle
  std::vector<int> support;        // triangles carrying the bubble
  double energy = 0.0;             // ||grad_T B~||_{L^2}
};

/// Odd-k extended edge bubble B~_{k,E}: prescribed traces (phi~_k on E,
/// lifted Legendre on the outer edges of omega_E), minimal-energy interior,
/// then the quartic correction psi_E so every trianglewise divergence mean of
/// B~ n_E vanishes.
inline ExtendedBubble build_extended_bubble_edge(const Triangulation& T, int edge, int k) {
  if (k < 5 || k % 2 == 0)
    throw ParityMismatch("build_extended_bubble_edge: k must be odd and >= 5");
  const auto& E = T.edges[edge];
  if (E.boundary)
    throw PreconditionViolated("build_extended_bubble_edge: edge must be interior");

  ExtendedBubble out;
  out.edge_based = true;
  out.entity = edge;
  out.k = k;
  out.field = PiecewisePoly(T, k, 1);

  const int nm = tri_basis_dim(k);
  for (int s = 0; s < 2; ++s) {
    const int tri = E.tri[s];
    out.support.push_back(tri);
    const int head = T.local_vertex_index(tri, E.v[1]);  // lambda of the edge head
    const int opp = T.local_vertex_index(tri, T.opposite_vertex(tri, edge));

    Eigen::MatrixXd C(3 * (k + 1), nm);
    std::vector<Bary> pts;
    for (int le = 0; le < 3; ++le) detail::edge_trace_constraints(k, le, C, pts, le * (k + 1));
    Eigen::VectorXd g(3 * (k + 1));
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const Bary& l = pts[i];
      if (std::abs(l[opp]) < 1e-14) {
        // on E: phi~_k in the global edge parameter
        g(i) = phi_tilde(k, 2.0 * l[head] - 1.0);
      } else {
        // outer edge: Legendre trace of the plain bubble
        g(i) = legendre_eval(k, 1.0 - 2.0 * l[opp]).value;
      }
    }
    const Eigen::MatrixXd S = detail::modal_stiffness(T, tri, k);
    const detail::ConstrainedMin cm = detail::minimize_energy(S, C, g);
    if (cm.constraint_residual > 1e-9)
      throw SingularInteriorSolve("build_extended_bubble_edge: trace constraints inconsistent");
    out.field.coef(tri).row(0) = cm.solution.transpose();
  }

  // quartic correction: alpha_K = (int_K dw/dnu) / (int_K dnu(lambda_a^2 lambda_b^2)),
  // with nu the outward normal of K at E; the denominator equals |E|/30.
  const QuadRule rule = quad_rule(2 * k);
  for (int s = 0; s < 2; ++s) {
    const int tri = E.tri[s];
    const BarycentricFrame fr(T, tri);
    const int la = T.local_vertex_index(tri, E.v[0]);
    const int lb = T.local_vertex_index(tri, E.v[1]);
    const int opp = 3 - la - lb;
    const Vec2 nu = -(fr.grad_lambda[opp]).normalized();  // outward at the edge opposite opp
    double dwdn = 0.0;
    for (std::size_t q = 0; q < rule.points.size(); ++q) {
      const Eigen::MatrixXd gr = out.field.grad(T, tri, rule.points[q]);
      dwdn += 2.0 * T.area[tri] * rule.weights[q] * (gr(0, 0) * nu.x() + gr(0, 1) * nu.y());
    }
    const double denom = E.length / 30.0;
    const double alpha = dwdn / denom;
    out.alpha[tri] = alpha;
    const Eigen::VectorXd quartic = detail::modal_project(
        k, [&](const Bary& l) { return l[la] * l[la] * l[lb] * l[lb]; });
    out.field.coef(tri).row(0) -= alpha * quartic.transpose();
  }
  out.energy = std::sqrt(out.field.h1_seminorm_sq(T));
  return out;
}

/// Even-k extended triangle bubble B~_{k,K}: traces of the plain bubble on
/// dK, minimal-energy interior, then a quartic vertex-flat bubble correction
/// so int_K grad(B~) = 0 (divergence means vanish for every constant field).
inline ExtendedBubble build_extended_bubble_triangle(const Triangulation& T, int tri, int k) {
  if (k < 4 || k % 2 == 1)
    throw ParityMismatch("build_extended_bubble_triangle: k must be even and >= 4");
  ExtendedBubble out;
  out.edge_based = false;
  out.entity = tri;
  out.k = k;
  out.field = PiecewisePoly(T, k, 1);
  out.support.push_back(tri);

  const int nm = tri_basis_dim(k);
  Eigen::MatrixXd C(3 * (k + 1), nm);
  std::vector<Bary> pts;
  for (int le = 0; le < 3; ++le) detail::edge_trace_constraints(k, le, C, pts, le * (k + 1));
  Eigen::VectorXd g(3 * (k + 1));
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double v = -1.0;
    for (int d = 0; d < 3; ++d) v += legendre_eval(k, 1.0 - 2.0 * pts[i][d]).value;
    g(i) = 0.5 * v;
  }
  const Eigen::MatrixXd S = detail::modal_stiffness(T, tri, k);
  const detail::ConstrainedMin cm = detail::minimize_energy(S, C, g);
  if (cm.constraint_residual > 1e-9)
    throw SingularInteriorSolve("build_extended_bubble_triangle: trace constraints inconsistent");
  out.field.coef(tri).row(0) = cm.solution.transpose();

  // correction in span{l1 l2 l3 l_i}: zero trace, zero vertex gradients
  const QuadRule rule = quad_rule(2 * k);
  auto grad_integral = [&](const PiecewisePoly& f) {
    Vec2 s = Vec2::Zero();
    for (std::size_t q = 0; q < rule.points.size(); ++q) {
      const Eigen::MatrixXd gr = f.grad(T, tri, rule.points[q]);
      s += 2.0 * T.area[tri] * rule.weights[q] * Vec2(gr(0, 0), gr(0, 1));
    }
    return s;
  };
  Eigen::MatrixXd Mc(2, 3);
  std::vector<Eigen::VectorXd> quartics(3);
  for (int i = 0; i < 3; ++i) {
    quartics[i] = detail::modal_project(
        k, [&](const Bary& l) { return l[0] * l[1] * l[2] * l[i]; });
    PiecewisePoly tmp(T, k, 1);
    tmp.coef(tri).row(0) = quartics[i].transpose();
    const Vec2 gi = grad_integral(tmp);
    Mc(0, i) = gi.x();
    Mc(1, i) = gi.y();
  }
  PiecewisePoly base(T, k, 1);
  base.coef(tri) = out.field.coef(tri);
  const Vec2 r = grad_integral(base);
  const Eigen::VectorXd beta =
      Mc.completeOrthogonalDecomposition().solve(Eigen::Vector2d(r.x(), r.y()));
  for (int i = 0; i < 3; ++i) out.field.coef(tri).row(0) -= beta(i) * quartics[i].transpose();
  out.alpha[tri] = beta.norm();
  out.energy = std::sqrt(out.field.h1_seminorm_sq(T));
  return out;
}

// ---------------------------------------------------------------------------
// alternating-sum pressure functionals

/// A_{T,z}(q) = sum_l (-1)^l q|_{K_l}(z) over the counterclockwise-numbered
/// nodal patch; `anchor_edge` (when >= 0) rotates interior patches and
/// orients boundary chains so that K_1 and K_2 share that edge.
inline double functional_A(const Triangulation& T, int z, const PiecewisePoly& q,
                           int anchor_edge = -1) {
  VertexPatch p = ordered_patch(T, z);
  std::vector<int> tris = p.tris;
  const int m = static_cast<int>(tris.size());
  if (anchor_edge >= 0 && m >= 2) {
    auto shared_edge = [&](int a, int b) {
      for (int i = 0; i < 3; ++i) {
        const int e = T.tri_edges[a][i];
        if (!T.edges[e].boundary && (T.edges[e].tri[0] == b || T.edges[e].tri[1] == b)) {
          const auto& ed = T.edges[e];
          if (ed.v[0] == z || ed.v[1] == z) return e;
        }
      }
      return -1;
    };
    bool placed = false;
    if (!p.boundary) {
      for (int s = 0; s < m && !placed; ++s)
        if (shared_edge(tris[s], tris[(s + 1) % m]) == anchor_edge) {
          std::rotate(tris.begin(), tris.begin() + s, tris.end());
          placed = true;
        }
    } else {
      if (shared_edge(tris[0], tris[1]) == anchor_edge) placed = true;
      if (!placed && shared_edge(tris[m - 2], tris[m - 1]) == anchor_edge) {
        std::reverse(tris.begin(), tris.end());
        placed = true;
      }
      if (!placed) {
        for (int s = 0; s + 1 < m && !placed; ++s)
          if (shared_edge(tris[s], tris[s + 1]) == anchor_edge) {
            std::rotate(tris.begin(), tris.begin() + s, tris.end());
            placed = true;  // chain anchor mid-way; keep cyclic rotation
          }
      }
    }
    if (!placed)
      throw std::invalid_argument("functional_A: anchor edge is not interior to the patch");
  }
  double a = 0.0;
  double sign = -1.0;  // (-1)^1 for l = 1
  for (int l = 0; l < m; ++l) {
    const Bary b = T.barycentric3(tris[l], T.vertices[z]);
    a += sign * q.eval(tris[l], b)(0);
    sign = -sign;
  }
  return a;
}

// ---------------------------------------------------------------------------
// fan systems

/// Tridiagonal matrix T_l built from the apex angles alpha_{l,j,1},
/// j = 1..n+1 (n = number of fan members).
inline Eigen::MatrixXd fan_T_matrix(const std::vector<double>& apex_angles) {
  const int n = static_cast<int>(apex_angles.size()) - 1;
  if (n < 1) throw std::invalid_argument("fan_T_matrix: need at least two apex angles");
  Eigen::MatrixXd Tm = Eigen::MatrixXd::Zero(n, n);
  for (int j = 0; j < n; ++j) {
    Tm(j, j) = std::sin(apex_angles[j] + apex_angles[j + 1]) /
               (std::sin(apex_angles[j]) * std::sin(apex_angles[j + 1]));
    if (j + 1 < n) Tm(j, j + 1) = Tm(j + 1, j) = 1.0 / std::sin(apex_angles[j + 1]);
  }
  return Tm;
}

/// det T_l = sin(sum of apex angles) / prod sin(apex angles).
inline double fan_T_det_closed_form(const std::vector<double>& apex_angles) {
  double sum = 0.0, prod = 1.0;
  for (double a : apex_angles) {
    sum += a;
    prod *= std::sin(a);
  }
  return std::sin(sum) / prod;
}

struct FanSystem {
  Eigen::MatrixXd D;         // diagonal -k(k+1)/|E_j|
  Eigen::MatrixXd Tmat;      // tridiagonal apex-angle matrix
  Eigen::MatrixXd Delta;     // diagonal near-critical defect
  Eigen::MatrixXd M_geom;    // D (T + Delta)
  Eigen::MatrixXd M_direct;  // A_{T,y}(div(B~ N)) by direct evaluation
  Eigen::VectorXd r;
  Eigen::VectorXd alpha;
  double detT = 0.0;
  std::vector<const ExtendedBubble*> bubbles;
};

using BubbleCache = std::map<std::pair<int, int>, ExtendedBubble>;  // (edge, k)

inline const ExtendedBubble& cached_edge_bubble(const Triangulation& T, BubbleCache& cache,
                                                int edge, int k) {
  const auto key = std::make_pair(edge, k);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, build_extended_bubble_edge(T, edge, k)).first;
  return it->second;
}

/// Assemble and solve the fan system M alpha = r for one fan; M is produced
/// both from the patch geometry (D(T+Delta)) and by direct evaluation of the
/// pressure functionals applied to div(B~ N).
inline FanSystem fan_system(const Triangulation& T, const Fan& fan, int k,
                            const PiecewisePoly& q, BubbleCache& cache,
                            const std::map<int, int>& chosen_edge) {
  const int n = static_cast<int>(fan.members.size());
  FanSystem fs;
  fs.D = Eigen::MatrixXd::Zero(n, n);
  fs.Delta = Eigen::MatrixXd::Zero(n, n);
  std::vector<double> apex_angles(n + 1);
  for (int j = 0; j <= n; ++j) apex_angles[j] = fan.tri_angles[j][0];
  fs.Tmat = (n >= 1) ? fan_T_matrix(apex_angles) : Eigen::MatrixXd();
  fs.detT = fan_T_det_closed_form(apex_angles);
  for (int j = 0; j < n; ++j) {
    fs.D(j, j) = -static_cast<double>(k) * (k + 1) / T.edges[fan.edges[j]].length;
    // angles adjacent to E_{l,j} at the critical point z_{l,j}
    const double a2 = fan.tri_angles[j][1];      // in K_{l,j} at z_{l,j}
    const double a3 = fan.tri_angles[j + 1][2];  // in K_{l,j+1} at z_{l,j}
    fs.Delta(j, j) = std::sin(a2 + a3) / (std::sin(a2) * std::sin(a3));
  }
  // Under the fixed orientation rule (fan normals circulate counterclockwise
  // around the apex) the direct functional matrix carries alternating column
  // signs relative to the tridiagonal form: M = S D (T + Delta) S with
  // S = diag((-1)^j).  The similarity leaves det(T) and the inverse bound
  // untouched; assemble the signed variant so both routes agree entrywise.
  Eigen::MatrixXd Tsigned = fs.Tmat;
  for (int j = 0; j + 1 < n; ++j) {
    Tsigned(j, j + 1) = -Tsigned(j, j + 1);
    Tsigned(j + 1, j) = -Tsigned(j + 1, j);
  }
  fs.M_geom = fs.D * (Tsigned + fs.Delta);

  // direct evaluation through the divergence fields of the extended bubbles
  fs.M_direct = Eigen::MatrixXd::Zero(n, n);
  fs.r = Eigen::VectorXd::Zero(n);
  for (int j = 0; j < n; ++j) {
    const ExtendedBubble& bub = cached_edge_bubble(T, cache, fan.edges[j], k);
    fs.bubbles.push_back(&bub);
    PiecewisePoly vec(T, k, 2);
    for (int tri : bub.support) {
      vec.coef(tri).row(0) = fan.normals[j].x() * bub.field.coef(tri).row(0);
      vec.coef(tri).row(1) = fan.normals[j].y() * bub.field.coef(tri).row(0);
    }
    const PiecewisePoly div = vec.divergence(T);
    for (int i = 0; i < n; ++i) {
      const int y = fan.members[i];
      fs.M_direct(i, j) = functional_A(T, y, div, chosen_edge.at(y));
    }
  }
  for (int i = 0; i < n; ++i)
    fs.r(i) = functional_A(T, fan.members[i], q, chosen_edge.at(fan.members[i]));

  const Eigen::MatrixXd TD = fs.Tmat + fs.Delta;
  if (std::abs(TD.determinant()) < 1e-12)
    throw FanSingular("fan_system: T + Delta is numerically singular (eta too large)");
  fs.alpha = fs.M_direct.fullPivLu().solve(fs.r);
  return fs;
}

// ---------------------------------------------------------------------------
// Pi_k^CR

struct PiCrResult {
  PiecewisePoly velocity;        // vector field, degree k
  Eigen::VectorXd coefficients;  // expansion in the vector CR_{k,0} basis
  double expansion_residual = 0.0;
  double grad_norm = 0.0;        // ||grad_T v_q||
  std::vector<FanSystem> fans;
};

namespace detail {

// even k: K(z) assignment, active sets, and the 2x2 vertex systems
inline PiecewisePoly pi_cr_even(const Triangulation& T, int k, const PiecewisePoly& q,
                                const TopologyReport& report) {
  if (T.triangles.size() < 2)
    throw PreconditionViolated("pi_cr (even): mesh must contain more than one triangle");
  PiecewisePoly v(T, k, 2);

  // K(z): lowest-index patch triangle with at least one non-critical vertex
  std::map<int, int> assigned;
  for (const auto& [z, kind] : report.critical) {
    (void)kind;
    int best = -1;
    for (int t : T.vertex_tris[z]) {
      int crit = 0;
      for (int i = 0; i < 3; ++i) crit += report.critical.count(T.triangles[t][i]);
      if (crit < 3 && (best == -1 || t < best)) best = t;
    }
    if (best < 0)
      throw PreconditionViolated("pi_cr (even): no admissible triangle at critical vertex " +
                                 std::to_string(z));
    assigned[z] = best;
  }

  auto anchor_of = [&](int z) {
    auto it = report.chosen_edge.find(z);
    return it == report.chosen_edge.end() ? -1 : it->second;
  };

  std::map<int, ExtendedBubble> tri_bubbles;
  for (int t = 0; t < static_cast<int>(T.triangles.size()); ++t) {
    // critical vertices of K, active ones first
    std::vector<int> crit, active;
    for (int i = 0; i < 3; ++i) {
      const int vtx = T.triangles[t][i];
      if (report.critical.count(vtx)) {
        crit.push_back(vtx);
        if (assigned.count(vtx) && assigned.at(vtx) == t) active.push_back(vtx);
      }
    }
    if (active.empty()) continue;
    if (crit.size() > 2)
      throw PreconditionViolated("pi_cr (even): triangle with three critical vertices");

    std::vector<int> V;  // V_1, V_2 with active first
    for (int z : active) V.push_back(z);
    for (int z : crit)
      if (std::find(V.begin(), V.end(), z) == V.end()) V.push_back(z);
    for (int i = 0; i < 3 && V.size() < 2; ++i) {
      const int vtx = T.triangles[t][i];
      if (std::find(V.begin(), V.end(), vtx) == V.end()) V.push_back(vtx);
    }

    const ExtendedBubble& bub =
        tri_bubbles.emplace(t, build_extended_bubble_triangle(T, t, k)).first->second;

    // psi^{CR,j} = B~ n_j with n_j the outward normal at the edge opposite V_j
    std::array<Vec2, 2> normals;
    std::array<PiecewisePoly, 2> psi_div;
    for (int j = 0; j < 2; ++j) {
      const int loc = T.local_vertex_index(t, V[j]);
      const BarycentricFrame fr(T, t);
      normals[j] = -fr.grad_lambda[loc].normalized();
      PiecewisePoly vec(T, k, 2);
      vec.coef(t).row(0) = normals[j].x() * bub.field.coef(t).row(0);
      vec.coef(t).row(1) = normals[j].y() * bub.field.coef(t).row(0);
      psi_div[j] = vec.divergence(T);
    }

    Eigen::Matrix2d Mk;
    Eigen::Vector2d rk;
    for (int s = 0; s < 2; ++s) {
      const int anchor = anchor_of(V[s]);
      for (int j = 0; j < 2; ++j) Mk(s, j) = functional_A(T, V[s], psi_div[j], anchor);
      const bool is_active = std::find(active.begin(), active.end(), V[s]) != active.end();
      rk(s) = is_active ? functional_A(T, V[s], q, anchor) : 0.0;
    }
    if (std::abs(Mk.determinant()) < 1e-12 * std::max(1.0, Mk.cwiseAbs().maxCoeff()))
      throw FanSingular("pi_cr (even): vertex system singular");
    const Eigen::Vector2d delta = Mk.inverse() * rk;
    for (int j = 0; j < 2; ++j) {
      v.coef(t).row(0) += delta(j) * normals[j].x() * bub.field.coef(t).row(0);
      v.coef(t).row(1) += delta(j) * normals[j].y() * bub.field.coef(t).row(0);
    }
  }
  return v;
}

}  // namespace detail

/// Pi_k^CR q: Crouzeix-Raviart velocity with trianglewise zero divergence
/// means whose divergence matches the alternating-sum functionals of q at
/// every eta-critical point (so q - div v_q lies in M^SV_{eta,k-1}).
inline PiCrResult pi_cr(const Triangulation& T, int k, const PiecewisePoly& q,
                        const TopologyReport& report) {
  PiCrResult out;
  BubbleCache cache;
  if (k % 2 == 1) {
    if (k < 5) throw ParityMismatch("pi_cr: odd k must be >= 5");
    if (!report.acute.empty())
      throw PreconditionViolated(
          "pi_cr (odd): acute critical points present; use the extension step");
    out.velocity = PiecewisePoly(T, k, 2);
    for (const Fan& fan : report.fans.fans) {
      FanSystem fs = fan_system(T, fan, k, q, cache, report.chosen_edge);
      for (int j = 0; j < static_cast<int>(fan.members.size()); ++j) {
        const ExtendedBubble& bub = *fs.bubbles[j];
        for (int tri : bub.support) {
          out.velocity.coef(tri).row(0) +=
              fs.alpha(j) * fan.normals[j].x() * bub.field.coef(tri).row(0);
          out.velocity.coef(tri).row(1) +=
              fs.alpha(j) * fan.normals[j].y() * bub.field.coef(tri).row(0);
        }
      }
      out.fans.push_back(std::move(fs));
    }
  } else {
    if (k < 4) throw ParityMismatch("pi_cr: even k must be >= 4");
    out.velocity = detail::pi_cr_even(T, k, q, report);
  }
  out.grad_norm = std::sqrt(out.velocity.h1_seminorm_sq(T));
  const DofMap vmap = build_dofmap(T, k, Space::VectorCR0);
  const auto [coeffs, resid] = from_field(T, vmap, out.velocity);
  out.coefficients = coeffs;
  out.expansion_residual = resid;
  return out;
}

// ---------------------------------------------------------------------------
// Scott-Vogelius membership

struct SvMembership {
  bool member = false;
  std::map<int, double> residuals;  // |A_{T,z}(q)| per critical vertex
  double worst_scaled = 0.0;
};

/// q in M^SV_{eta,k-1} iff A_{T,z}(q) = 0 at every eta-critical vertex;
/// residuals are compared against 1e-9 (k^2/h_z) ||q||.
inline SvMembership sv_membership(const Triangulation& T, const PiecewisePoly& q, int k,
                                  const TopologyReport& report) {
  SvMembership out;
  const double qnorm = std::sqrt(const_cast<PiecewisePoly&>(q).l2_norm_sq(T));
  out.member = true;
  for (const auto& [z, kind] : report.critical) {
    (void)kind;
    const auto it = report.chosen_edge.find(z);
    const int anchor = it == report.chosen_edge.end() ? -1 : it->second;
    const double a = std::abs(functional_A(T, z, q, anchor));
    out.residuals[z] = a;
    double hz = 0.0;
    for (int t : T.vertex_tris[z]) hz = std::max(hz, T.diameter[t]);
    const double bound = 1e-9 * (static_cast<double>(k) * k / hz) * std::max(qnorm, 1e-300);
    const double scaled = a / std::max(bound, 1e-300);
    out.worst_scaled = std::max(out.worst_scaled, scaled);
    if (a > bound) out.member = false;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bernardi-Raugel mean correction

struct BernardiRaugel {
  Eigen::VectorXd coefficients;  // vector S_{2,0} dofs
  PiecewisePoly field;
  double h1_norm = 0.0;
  double mean_residual = 0.0;
};

/// Conforming quadratic field from interior-edge normal bubbles matching the
/// trianglewise means of q: int_K q = int_K div(Pi^BR q).
inline BernardiRaugel bernardi_raugel(const Triangulation& T, const PiecewisePoly& q) {
  const int nt = static_cast<int>(T.triangles.size());
  std::vector<int> interior_edges;
  for (int e = 0; e < static_cast<int>(T.edges.size()); ++e)
    if (!T.edges[e].boundary) interior_edges.push_back(e);
  const int ne = static_cast<int>(interior_edges.size());

  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(nt, ne);
  for (int c = 0; c < ne; ++c) {
    const auto& E = T.edges[interior_edges[c]];
    // int_K div(lambda_a lambda_b n_E) = <n_E, nu_K> |E| / 6
    A(E.tri[0], c) = E.length / 6.0;   // n_E points away from tri[0]
    A(E.tri[1], c) = -E.length / 6.0;  // and into tri[1]
  }
  Eigen::VectorXd rhs(nt);
  const std::vector<double> means = q.elementwise_integral(T);
  for (int t = 0; t < nt; ++t) rhs(t) = means[t];

  const Eigen::VectorXd c = A.completeOrthogonalDecomposition().solve(rhs);
  const double resid = (A * c - rhs).norm();
  if (resid > 1e-10 * std::max(1.0, rhs.norm()))
    throw UnderdeterminedMeans(
        "bernardi_raugel: interior-edge incidence cannot match the means");

  BernardiRaugel out;
  out.mean_residual = resid;
  const DofMap map = build_dofmap(T, 2, Space::VectorS0);
  out.coefficients = Eigen::VectorXd::Zero(map.dim);
  for (int cidx = 0; cidx < ne; ++cidx) {
    const int e = interior_edges[cidx];
    // the midpoint nodal function is 4 lambda_a lambda_b
    int node = -1;
    for (std::size_t n = 0; n < map.global_nodes.size(); ++n)
      if (map.global_nodes[n].loc == GlobalNode::Loc::Edge && map.global_nodes[n].entity == e)
        node = static_cast<int>(n);
    const int slot = map.dof_of_node[node];
    if (slot < 0) continue;
    out.coefficients(map.vector_dof(slot, 0)) += c(cidx) / 4.0 * T.edges[e].normal.x();
    out.coefficients(map.vector_dof(slot, 1)) += c(cidx) / 4.0 * T.edges[e].normal.y();
  }
  out.field = to_field(T, map, out.coefficients);
  out.h1_norm = std::sqrt(out.field.h1_seminorm_sq(T) + out.field.l2_norm_sq(T));
  return out;
}

// ---------------------------------------------------------------------------
// conforming vertex fields v_{E,j}

struct VertexField {
  PiecewisePoly field;
  double energy = 0.0;          // ||grad v||
  double constraint_residual = 0.0;
};

/// Minimal-energy conforming field supported in omega_E with trianglewise
/// zero divergence means and prescribed vertex divergence values: 1 at the
/// endpoint y_j (in both patch triangles), 0 at every other (K, vertex) pair.
inline VertexField vertex_field(const Triangulation& T, int edge, int j, int k) {
  if (k < 3) throw std::invalid_argument("vertex_field: k must be >= 3");
  if (j != 1 && j != 2) throw std::invalid_argument("vertex_field: j must be 1 or 2");
  const auto& E = T.edges[edge];
  const int y = E.v[j - 1];

  const DofMap map = build_dofmap(T, k, Space::VectorS);
  // admissible scalar slots: interior nodes of the patch triangles and nodes
  // interior to E itself (zero trace on the rest of the plane)
  std::vector<int> slots;
  for (std::size_t n = 0; n < map.global_nodes.size(); ++n) {
    const GlobalNode& g = map.global_nodes[n];
    const int slot = map.dof_of_node[n];
    if (slot < 0) continue;
    const bool on_patch_interior =
        (g.loc == GlobalNode::Loc::Interior && (g.entity == E.tri[0] || g.entity == E.tri[1])) ||
        (g.loc == GlobalNode::Loc::Edge && g.entity == edge);
    if (on_patch_interior) slots.push_back(slot);
  }
  const int nu = 2 * static_cast<int>(slots.size());

  // constraints: per patch triangle, 3 vertex divergence values + 1 zero mean
  std::vector<int> patch;
  for (int s = 0; s < 2; ++s)
    if (E.tri[s] >= 0) patch.push_back(E.tri[s]);
  const int ncon = static_cast<int>(patch.size()) * 4;
  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(ncon, nu);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(ncon);
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(nu, nu);

  const NodalBasis nb(k);
  const QuadRule rule = quad_rule(2 * k);
  for (std::size_t pi = 0; pi < patch.size(); ++pi) {
    const int t = patch[pi];
    const BarycentricFrame fr(T, t);
    // which admissible slots live on this triangle, and their local node ids
    std::vector<std::pair<int, int>> live;  // (slot position in `slots`, local dof idx)
    for (int d = 0; d < static_cast<int>(map.tri_dofs[t].size()); ++d) {
      const LocalDof& ld = map.tri_dofs[t][d];
      for (std::size_t sidx = 0; sidx < slots.size(); ++sidx)
        if (slots[sidx] == ld.global) live.emplace_back(static_cast<int>(sidx), d);
    }
    // vertex rows
    for (int vi = 0; vi < 3; ++vi) {
      const int row = static_cast<int>(pi) * 4 + vi;
      Bary l{0.0, 0.0, 0.0};
      l[vi] = 1.0;
      Eigen::VectorXd nv;
      Eigen::Matrix<double, 3, Eigen::Dynamic> npart;
      nb.eval_with_partials(l, nv, npart);
      for (const auto& [sidx, d] : live) {
        const int node = map.tri_dofs[t][d].local_index;
        Vec2 gr = Vec2::Zero();
        for (int i = 0; i < 3; ++i) gr += npart(i, node) * fr.grad_lambda[i];
        C(row, 2 * sidx + 0) += gr.x();  // div of (phi, 0)
        C(row, 2 * sidx + 1) += gr.y();  // div of (0, phi)
      }
      g(row) = (T.triangles[t][vi] == y) ? 1.0 : 0.0;
    }
    // zero-mean row and energy
    const LocalBasisTable tab = local_basis_table(T, map, t, rule.points, nb);
    const int row = static_cast<int>(pi) * 4 + 3;
    for (std::size_t q = 0; q < rule.points.size(); ++q) {
      const double w = 2.0 * T.area[t] * rule.weights[q];
      for (const auto& [sidx, d] : live) {
        C(row, 2 * sidx + 0) += w * tab.grad[0](d, q);
        C(row, 2 * sidx + 1) += w * tab.grad[1](d, q);
      }
      for (const auto& [sa, da] : live)
        for (const auto& [sb, db] : live) {
          const double gg =
              tab.grad[0](da, q) * tab.grad[0](db, q) + tab.grad[1](da, q) * tab.grad[1](db, q);
          for (int comp = 0; comp < 2; ++comp) S(2 * sa + comp, 2 * sb + comp) += w * gg;
        }
    }
  }

  const detail::ConstrainedMin cm = detail::minimize_energy(S, C, g);
  if (cm.constraint_residual > 1e-9)
    throw ConstraintInfeasible("vertex_field: divergence constraints are infeasible");

  VertexField out;
  out.constraint_residual = cm.constraint_residual;
  Eigen::VectorXd full = Eigen::VectorXd::Zero(map.dim);
  for (std::size_t sidx = 0; sidx < slots.size(); ++sidx) {
    full(map.vector_dof(slots[sidx], 0)) = cm.solution(2 * sidx + 0);
    full(map.vector_dof(slots[sidx], 1)) = cm.solution(2 * sidx + 1);
  }
  out.field = to_field(T, map, full);
  out.energy = std::sqrt(cm.solution.dot(S * cm.solution));
  return out;
}

// ---------------------------------------------------------------------------
// acute extension step

struct ExtensionStep {
  PiecewisePoly velocity;    // composite v_0 + sum_K (v_1 + v_2 + v_3)
  double div_residual = 0.0; // ||div v - q|| over T \ T' relative to ||q||
  double grad_norm = 0.0;
};

/// One step of the step-by-step construction: extend a divergence right
/// inverse from T' to T across the attached triangles.  Produces v with
/// div_T v = q on every K in T \ T'.
inline ExtensionStep acute_extension_step(const Triangulation& T,
                                          const std::vector<int>& subset,
                                          const PiecewisePoly& q, int k) {
  if (k < 5 || k % 2 == 0)
    throw ParityMismatch("acute_extension_step: k must be odd and >= 5");
  std::vector<char> in_sub(T.triangles.size(), 0);
  for (int t : subset) in_sub[t] = 1;

  // T' needs an interior vertex
  bool has_inner = false;
  for (int v = 0; v < static_cast<int>(T.vertices.size()); ++v) {
    if (T.vertex_tris[v].empty() || T.vertex_on_boundary[v]) continue;
    bool all_in = true;
    for (int t : T.vertex_tris[v]) all_in = all_in && in_sub[t];
    has_inner = has_inner || all_in;
  }
  if (!has_inner)
    throw PreconditionViolated("acute_extension_step: subset has no interior vertex");

  struct Attach {
    int tri, edge, nbr;
  };
  std::vector<Attach> attached;
  std::map<int, int> out_count;  // |T_out(K')|
  for (int t = 0; t < static_cast<int>(T.triangles.size()); ++t) {
    if (in_sub[t]) continue;
    int edge = -1, nbr = -1;
    for (int i = 0; i < 3; ++i) {
      const int e = T.tri_edges[t][i];
      const auto& E = T.edges[e];
      const int other = (E.tri[0] == t) ? E.tri[1] : E.tri[0];
      if (other >= 0 && in_sub[other]) {
        edge = e;
        nbr = other;
        break;
      }
    }
    if (edge < 0)
      throw PreconditionViolated("acute_extension_step: triangle " + std::to_string(t) +
                                 " shares no edge with the subset");
    out_count[nbr]++;
    attached.push_back({t, edge, nbr});
  }
  for (const auto& [nbr, cnt] : out_count)
    if (cnt > 2)
      throw PreconditionViolated("acute_extension_step: |T_out(K')| > 2 at triangle " +
                                 std::to_string(nbr));

  ExtensionStep out;
  out.velocity = PiecewisePoly(T, k, 2);
  if (attached.empty()) return out;

  const BernardiRaugel br = bernardi_raugel(T, q);
  // embed the quadratic BR field into degree k (modes are degree-independent)
  PiecewisePoly v0(T, k, 2);
  for (std::size_t t = 0; t < v0.ntris(); ++t)
    for (int c = 0; c < 2; ++c)
      for (int m = 0; m <= 2; ++m)
        for (int n = 0; n <= 2 - m; ++n)
          v0.coef(t)(c, detail::modal_index(k, m, n)) =
              br.field.coef(t)(c, detail::modal_index(2, m, n));
  out.velocity += v0;

  PiecewisePoly q1 = q;
  q1 -= v0.divergence(T);

  for (const Attach& at : attached) {
    const int t = at.tri;
    const auto& E = T.edges[at.edge];
    const int z = T.opposite_vertex(t, at.edge);
    const Bary zb = T.barycentric3(t, T.vertices[z]);

    // v1 = alpha B~_{k,E} n with n directed into the subset triangle
    const ExtendedBubble bub = build_extended_bubble_edge(T, at.edge, k);
    Vec2 n = E.normal;
    if (E.tri[1] != at.nbr) n = -n;  // normal points into tri[1] by convention
    PiecewisePoly v1(T, k, 2);
    for (int tri : bub.support) {
      v1.coef(tri).row(0) = n.x() * bub.field.coef(tri).row(0);
      v1.coef(tri).row(1) = n.y() * bub.field.coef(tri).row(0);
    }
    const double dv1z = v1.divergence_at(T, t, zb);
    const double alpha = q1.eval(t, zb)(0) / dv1z;
    v1 *= alpha;
    out.velocity += v1;
    PiecewisePoly q2 = q1;
    q2 -= v1.divergence(T);

    // v2 kills the remaining vertex values at the endpoints of E
    PiecewisePoly v2(T, k, 2);
    for (int j = 1; j <= 2; ++j) {
      const double val = q2.eval(t, T.barycentric3(t, T.vertices[E.v[j - 1]]))(0);
      if (std::abs(val) > 0) {
        const VertexField vf = vertex_field(T, at.edge, j, k);
        PiecewisePoly scaled = vf.field;
        scaled *= val;
        v2 += scaled;
      }
    }
    out.velocity += v2;
    PiecewisePoly q3 = q2;
    q3 -= v2.divergence(T);

    // v3: local exact inverse on K for the vertex-flat zero-mean remainder
    const int nmk3 = (k >= 3) ? tri_basis_dim(k - 3) : 0;
    const int nuk = 2 * nmk3;
    // basis: l1 l2 l3 * modal(k-3) per component
    std::vector<Eigen::VectorXd> bubble_modes(nmk3);
    for (int m = 0; m < nmk3; ++m)
      bubble_modes[m] = detail::modal_project(k, [&](const Bary& l) {
        return l[0] * l[1] * l[2] * tri_basis_eval(k - 3, l, false).value(m);
      });
    // constraint: div v3 == q3 on K, matched in modal degree k-1 coefficients
    const int nmc = tri_basis_dim(k - 1);
    Eigen::MatrixXd C(nmc, nuk);
    for (int m = 0; m < nmk3; ++m)
      for (int c = 0; c < 2; ++c) {
        PiecewisePoly f(T, k, 2);
        f.coef(t).row(c) = bubble_modes[m].transpose();
        const PiecewisePoly d = f.divergence(T);
        C.col(2 * m + c) = d.coef(t).row(0).transpose();
      }
    const Eigen::VectorXd rhs = q3.coef(t).row(0).transpose();
    // energy of the local bubble basis
    Eigen::MatrixXd Sloc = Eigen::MatrixXd::Zero(nuk, nuk);
    const Eigen::MatrixXd Smodal = detail::modal_stiffness(T, t, k);
    for (int ma = 0; ma < nmk3; ++ma)
      for (int mb = 0; mb < nmk3; ++mb) {
        const double e = bubble_modes[ma].dot(Smodal * bubble_modes[mb]);
        Sloc(2 * ma, 2 * mb) += e;
        Sloc(2 * ma + 1, 2 * mb + 1) += e;
      }
    const detail::ConstrainedMin cm = detail::minimize_energy(Sloc, C, rhs);
    const double q3norm = std::sqrt(q3.coef(t).row(0).squaredNorm());
    if (cm.constraint_residual > 1e-8 * std::max(1.0, q3norm))
      throw ConstraintInfeasible("acute_extension_step: local divergence solve infeasible");
    PiecewisePoly v3(T, k, 2);
    for (int m = 0; m < nmk3; ++m)
      for (int c = 0; c < 2; ++c)
        v3.coef(t).row(c) += cm.solution(2 * m + c) * bubble_modes[m].transpose();
    out.velocity += v3;
    q1 = q3;
    q1 -= v3.divergence(T);
  }

  // residual over the attached triangles
  PiecewisePoly dv = out.velocity.divergence(T);
  double num = 0.0;
  const QuadRule rule = quad_rule(2 * (k - 1));
  for (const Attach& at : attached)
    for (std::size_t qq = 0; qq < rule.points.size(); ++qq) {
      const double diff =
          dv.eval(at.tri, rule.points[qq])(0) - q.eval(at.tri, rule.points[qq])(0);
      num += 2.0 * T.area[at.tri] * rule.weights[qq] * diff * diff;
    }
  const double qn = std::sqrt(const_cast<PiecewisePoly&>(q).l2_norm_sq(T));
  out.div_residual = std::sqrt(num) / std::max(qn, 1e-300);
  out.grad_norm = std::sqrt(out.velocity.h1_seminorm_sq(T));
  return out;
}

}  // namespace crstokes

#endif  // CRSTOKES_RIGHTINVERSE_HPP
