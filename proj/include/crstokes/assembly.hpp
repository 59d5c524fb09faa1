#ifndef CRSTOKES_ASSEMBLY_HPP
#define CRSTOKES_ASSEMBLY_HPP

#include <ostream>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "crstokes/femspace.hpp"
#include "crstokes/mesh.hpp"

namespace crstokes {

struct SingularOperator : std::runtime_error {
  explicit SingularOperator(const std::string& what) : std::runtime_error(what) {}
};

enum class OperatorKind { BrokenGradient, DivCoupling, PressureMass, VelocityMass };

struct AssembledOperator {
  Eigen::MatrixXd mat;
  const DofMap* rows = nullptr;
  const DofMap* cols = nullptr;
  OperatorKind kind = OperatorKind::BrokenGradient;
};

namespace detail {

inline int assembly_quad_degree(int k) { return 2 * k + 2; }

}  // namespace detail

/// a_T(u,v) = (grad_T u, grad_T v): elementwise exact Gram matrix of the
/// piecewise gradients.  SPD is verified by a Cholesky factorization.
inline AssembledOperator assemble_broken_gradient(const Triangulation& T, const DofMap& map) {
  const QuadRule rule = quad_rule(detail::assembly_quad_degree(map.k));
  const NodalBasis nb(map.k);
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(map.scalar_dim, map.scalar_dim);
  for (int t = 0; t < static_cast<int>(T.triangles.size()); ++t) {
    const LocalBasisTable tab = local_basis_table(T, map, t, rule.points, nb);
    const int nd = static_cast<int>(map.tri_dofs[t].size());
    Eigen::MatrixXd loc = Eigen::MatrixXd::Zero(nd, nd);
    for (std::size_t q = 0; q < rule.points.size(); ++q) {
      const double w = 2.0 * T.area[t] * rule.weights[q];
      loc += w * (tab.grad[0].col(q) * tab.grad[0].col(q).transpose() +
                  tab.grad[1].col(q) * tab.grad[1].col(q).transpose());
    }
    for (int a = 0; a < nd; ++a)
      for (int b = 0; b < nd; ++b)
        S(map.tri_dofs[t][a].global, map.tri_dofs[t][b].global) += loc(a, b);
  }

  AssembledOperator op;
  op.rows = op.cols = &map;
  op.kind = OperatorKind::BrokenGradient;
  if (!map.is_vector()) {
    op.mat = std::move(S);
  } else {
    // vector basis uses the coordinate directions: block structure
    op.mat = Eigen::MatrixXd::Zero(map.dim, map.dim);
    for (int i = 0; i < map.scalar_dim; ++i)
      for (int j = 0; j < map.scalar_dim; ++j)
        for (int c = 0; c < 2; ++c) op.mat(2 * i + c, 2 * j + c) = S(i, j);
  }
  if (op.mat.size() > 0) {
    const Eigen::LLT<Eigen::MatrixXd> llt(op.mat);
    if (llt.info() != Eigen::Success)
      throw SingularOperator("assemble_broken_gradient: stiffness is not SPD");
  }
  return op;
}

/// b_T(v,q) = (div_T v, q): rows indexed by the pressure map, columns by the
/// vector velocity map.
inline AssembledOperator assemble_div_coupling(const Triangulation& T, const DofMap& vmap,
                                               const DofMap& pmap) {
  if (!vmap.is_vector())
    throw std::invalid_argument("assemble_div_coupling: velocity map must be vector-valued");
  const QuadRule rule = quad_rule(detail::assembly_quad_degree(vmap.k));
  const NodalBasis nbv(vmap.k);
  const NodalBasis nbp(std::max(1, pmap.k));
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(pmap.dim, vmap.dim);
  for (int t = 0; t < static_cast<int>(T.triangles.size()); ++t) {
    const LocalBasisTable vt = local_basis_table(T, vmap, t, rule.points, nbv);
    const LocalBasisTable pt = local_basis_table(T, pmap, t, rule.points, nbp);
    const int nv = static_cast<int>(vmap.tri_dofs[t].size());
    const int np = static_cast<int>(pmap.tri_dofs[t].size());
    for (std::size_t q = 0; q < rule.points.size(); ++q) {
      const double w = 2.0 * T.area[t] * rule.weights[q];
      for (int a = 0; a < np; ++a) {
        const double pw = w * pt.value(a, q);
        const int ga = pmap.tri_dofs[t][a].global;
        for (int b = 0; b < nv; ++b) {
          const int gs = vmap.tri_dofs[t][b].global;
          B(ga, vmap.vector_dof(gs, 0)) += pw * vt.grad[0](b, q);
          B(ga, vmap.vector_dof(gs, 1)) += pw * vt.grad[1](b, q);
        }
      }
    }
  }
  AssembledOperator op;
  op.mat = std::move(B);
  op.rows = &pmap;
  op.cols = &vmap;
  op.kind = OperatorKind::DivCoupling;
  return op;
}

/// Pressure mass matrix (block diagonal, SPD).
inline AssembledOperator assemble_pressure_mass(const Triangulation& T, const DofMap& pmap) {
  const QuadRule rule = quad_rule(2 * pmap.k + 2);
  const NodalBasis nbp(std::max(1, pmap.k));
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(pmap.dim, pmap.dim);
  for (int t = 0; t < static_cast<int>(T.triangles.size()); ++t) {
    const LocalBasisTable pt = local_basis_table(T, pmap, t, rule.points, nbp);
    const int np = static_cast<int>(pmap.tri_dofs[t].size());
    for (std::size_t q = 0; q < rule.points.size(); ++q) {
      const double w = 2.0 * T.area[t] * rule.weights[q];
      for (int a = 0; a < np; ++a)
        for (int b = 0; b < np; ++b)
          M(pmap.tri_dofs[t][a].global, pmap.tri_dofs[t][b].global) +=
              w * pt.value(a, q) * pt.value(b, q);
    }
  }
  AssembledOperator op;
  op.mat = std::move(M);
  op.rows = op.cols = &pmap;
  op.kind = OperatorKind::PressureMass;
  return op;
}

/// Coefficient vector c with c^T M q = int_Omega q (the global constant 1
/// expanded in the pressure basis; mode 0 on each triangle is constant 1).
inline Eigen::VectorXd pressure_deflation_vector(const Triangulation& T, const DofMap& pmap) {
  Eigen::VectorXd c = Eigen::VectorXd::Zero(pmap.dim);
  for (int t = 0; t < static_cast<int>(T.triangles.size()); ++t)
    c(pmap.tri_dofs[t][0].global) = 1.0;
  return c;
}

/// Velocity (or scalar) L^2 mass matrix.
inline AssembledOperator assemble_mass(const Triangulation& T, const DofMap& map) {
  const QuadRule rule = quad_rule(detail::assembly_quad_degree(map.k));
  const NodalBasis nb(map.k);
  Eigen::MatrixXd M0 = Eigen::MatrixXd::Zero(map.scalar_dim, map.scalar_dim);
  for (int t = 0; t < static_cast<int>(T.triangles.size()); ++t) {
    const LocalBasisTable tab = local_basis_table(T, map, t, rule.points, nb);
    const int nd = static_cast<int>(map.tri_dofs[t].size());
    for (std::size_t q = 0; q < rule.points.size(); ++q) {
      const double w = 2.0 * T.area[t] * rule.weights[q];
      for (int a = 0; a < nd; ++a)
        for (int b = 0; b < nd; ++b)
          M0(map.tri_dofs[t][a].global, map.tri_dofs[t][b].global) +=
              w * tab.value(a, q) * tab.value(b, q);
    }
  }
  AssembledOperator op;
  op.rows = op.cols = &map;
  op.kind = OperatorKind::VelocityMass;
  if (!map.is_vector()) {
    op.mat = std::move(M0);
  } else {
    op.mat = Eigen::MatrixXd::Zero(map.dim, map.dim);
    for (int i = 0; i < map.scalar_dim; ++i)
      for (int j = 0; j < map.scalar_dim; ++j)
        for (int c = 0; c < 2; ++c) op.mat(2 * i + c, 2 * j + c) = M0(i, j);
  }
  return op;
}

/// Text dump: header "rows cols", then row-major entries.
inline void write_matrix(std::ostream& out, const Eigen::MatrixXd& m) {
  out << m.rows() << " " << m.cols() << "\n";
  char buf[32];
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", m(i, j));
      out << buf << (j + 1 == m.cols() ? "" : " ");
    }
    out << "\n";
  }
}

}  // namespace crstokes

#endif  // CRSTOKES_ASSEMBLY_HPP
