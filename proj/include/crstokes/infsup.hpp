#ifndef CRSTOKES_INFSUP_HPP
#define CRSTOKES_INFSUP_HPP

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "crstokes/assembly.hpp"
#include "crstokes/femspace.hpp"
#include "crstokes/mesh.hpp"

namespace crstokes {

struct NotSPD : std::runtime_error {
  explicit NotSPD(const std::string& what) : std::runtime_error(what) {}
};
struct EmptyVelocitySpace : std::runtime_error {
  explicit EmptyVelocitySpace(const std::string& what) : std::runtime_error(what) {}
};
struct InfeasibleConstraint : std::runtime_error {
  explicit InfeasibleConstraint(const std::string& what) : std::runtime_error(what) {}
};

struct EigResult {
  double lambda = 0.0;
  Eigen::VectorXd vector;
  double residual = 0.0;  // ||A x - lambda M x|| / ||A||
};

/// Smallest eigenpair of A x = lambda M x on the subspace M-orthogonal to the
/// optional deflation vector, by Cholesky reduction to a standard symmetric
/// problem and a full symmetric eigensolve.
inline EigResult symmetric_eig_smallest(const Eigen::MatrixXd& A, const Eigen::MatrixXd& M,
                                        const Eigen::VectorXd* deflation = nullptr) {
  const int n = static_cast<int>(A.rows());
  if (n == 0) throw EmptyVelocitySpace("symmetric_eig_smallest: empty operator");
  const Eigen::LLT<Eigen::MatrixXd> lltM(M);
  if (lltM.info() != Eigen::Success) throw NotSPD("symmetric_eig_smallest: M is not SPD");
  const Eigen::MatrixXd L = lltM.matrixL();

  // B = L^{-1} A L^{-T}
  Eigen::MatrixXd B = lltM.matrixL().solve(A);
  B = lltM.matrixL().solve(B.transpose()).transpose();
  B = 0.5 * (B + B.transpose());

  Eigen::MatrixXd Z;  // orthonormal basis of the admissible subspace
  if (deflation != nullptr && deflation->size() == n && deflation->norm() > 0) {
    const Eigen::VectorXd u = (L.transpose() * (*deflation)).normalized();
    // Householder complement of u
    Eigen::MatrixXd Q = Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd w = u;
    w(0) += (u(0) >= 0 ? 1.0 : -1.0);
    w.normalize();
    Q -= 2.0 * w * w.transpose();  // Q * e_0 = -+u
    Z = Q.rightCols(n - 1);
  } else {
    Z = Eigen::MatrixXd::Identity(n, n);
  }

  const Eigen::MatrixXd Bz = Z.transpose() * B * Z;
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Bz);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("symmetric_eig_smallest: eigensolver failed");
  EigResult r;
  r.lambda = es.eigenvalues()(0);
  const Eigen::VectorXd y = Z * es.eigenvectors().col(0);
  r.vector = L.transpose().triangularView<Eigen::Upper>().solve(y);
  const double anorm = A.cwiseAbs().maxCoeff();
  r.residual = (A * r.vector - r.lambda * M * r.vector).norm() /
               std::max(1e-300, anorm * r.vector.norm());
  return r;
}

struct InfSupResult {
  int k = 0;
  double c = 0.0;
  int dim_velocity = 0;
  int dim_pressure_effective = 0;
  double eigen_residual = 0.0;
  double scaled = 0.0;  // c * sqrt(log(k+1))
  bool zero_infsup = false;
  Eigen::VectorXd critical_pressure;  // eigenmode attaining the inf
};

namespace detail {

struct StokesOperators {
  DofMap vmap, pmap;
  AssembledOperator A, B, M;
  Eigen::VectorXd deflation;
};

inline StokesOperators build_stokes_operators(const Triangulation& T, int k) {
  StokesOperators ops;
  ops.vmap = build_dofmap(T, k, Space::VectorCR0);
  ops.pmap = build_dofmap(T, k - 1, Space::Pressure);
  if (ops.vmap.dim == 0)
    throw EmptyVelocitySpace("stokes operators: CR velocity space is empty (k = " +
                             std::to_string(k) + ")");
  if (ops.pmap.dim <= 1)
    throw EmptyVelocitySpace("stokes operators: effective pressure space is empty");
  ops.A = assemble_broken_gradient(T, ops.vmap);
  ops.B = assemble_div_coupling(T, ops.vmap, ops.pmap);
  ops.M = assemble_pressure_mass(T, ops.pmap);
  ops.deflation = pressure_deflation_vector(T, ops.pmap);
  return ops;
}

}  // namespace detail

/// Discrete inf-sup constant: c = sqrt(lambda_min) of the pressure Schur
/// complement B A^{-1} B^T p = lambda M p on mean-zero pressures.
inline InfSupResult infsup_constant(const Triangulation& T, int k) {
  const detail::StokesOperators ops = detail::build_stokes_operators(T, k);
  const Eigen::LLT<Eigen::MatrixXd> lltA(ops.A.mat);
  if (lltA.info() != Eigen::Success) throw NotSPD("infsup_constant: stiffness not SPD");
  // S = B A^{-1} B^T = W^T W with W = L^{-1} B^T
  const Eigen::MatrixXd W =
      lltA.matrixL().solve(ops.B.mat.transpose());
  Eigen::MatrixXd S = W.transpose() * W;
  S = 0.5 * (S + S.transpose());

  const EigResult eig = symmetric_eig_smallest(S, ops.M.mat, &ops.deflation);
  InfSupResult r;
  r.k = k;
  r.dim_velocity = ops.vmap.dim;
  r.dim_pressure_effective = ops.pmap.dim - 1;
  r.c = eig.lambda > 0 ? std::sqrt(eig.lambda) : 0.0;
  r.eigen_residual = eig.residual;
  r.scaled = r.c * std::sqrt(std::log(k + 1.0));
  r.zero_infsup = (r.c < 1e-10);
  r.critical_pressure = eig.vector;
  return r;
}

struct RightInverseResult {
  Eigen::VectorXd velocity;  // coefficients in the vector CR map
  double ratio = 0.0;        // ||v||_{H^1(T)} / ||q||_{L^2}
  double div_residual = 0.0; // ||div_T v - q|| / ||q||
};

/// Minimum-energy discrete right inverse: v minimizing a_T(v,v) subject to
/// b_T(v, .) = (q, .) for all discrete pressures; q given as coefficients in
/// the pressure map (must have zero mean).
inline RightInverseResult min_norm_right_inverse(const Triangulation& T, int k,
                                                 const Eigen::VectorXd& q) {
  const detail::StokesOperators ops = detail::build_stokes_operators(T, k);
  const double qint = ops.deflation.dot(ops.M.mat * q);
  const double qnorm = std::sqrt(q.dot(ops.M.mat * q));
  if (std::abs(qint) > 1e-9 * std::max(1.0, qnorm))
    throw InfeasibleConstraint("min_norm_right_inverse: pressure must have zero mean");

  const Eigen::LLT<Eigen::MatrixXd> lltA(ops.A.mat);
  const Eigen::MatrixXd AinvBt = lltA.solve(ops.B.mat.transpose());
  Eigen::MatrixXd S = ops.B.mat * AinvBt;
  S = 0.5 * (S + S.transpose());

  // solve S mu = M q on the complement of the Schur kernel (the constant
  // pressure c: B^T c = 0, and c^T M q = int q = 0 keeps the rhs in range)
  const int np = static_cast<int>(S.rows());
  const Eigen::VectorXd u = ops.deflation.normalized();
  Eigen::MatrixXd Q = Eigen::MatrixXd::Identity(np, np);
  Eigen::VectorXd w = u;
  w(0) += (u(0) >= 0 ? 1.0 : -1.0);
  w.normalize();
  Q -= 2.0 * w * w.transpose();
  const Eigen::MatrixXd Z = Q.rightCols(np - 1);  // orthogonal complement of M c

  const Eigen::MatrixXd Sz = Z.transpose() * S * Z;
  const Eigen::VectorXd rhs = Z.transpose() * (ops.M.mat * q);
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(Sz);
  if (ldlt.info() != Eigen::Success ||
      (Sz * ldlt.solve(rhs) - rhs).norm() > 1e-6 * std::max(1e-300, rhs.norm()))
    throw InfeasibleConstraint("min_norm_right_inverse: Schur system is singular");
  const Eigen::VectorXd mu = Z * ldlt.solve(rhs);

  RightInverseResult out;
  out.velocity = AinvBt * mu;
  const double energy = out.velocity.dot(ops.A.mat * out.velocity);
  out.ratio = qnorm > 0 ? std::sqrt(energy) / qnorm : 0.0;

  // div residual measured in the pressure space
  const Eigen::VectorXd bv = ops.B.mat * out.velocity;
  const Eigen::LLT<Eigen::MatrixXd> lltM(ops.M.mat);
  const Eigen::VectorXd d = lltM.solve(bv) - q;
  out.div_residual = qnorm > 0 ? std::sqrt(d.dot(ops.M.mat * d)) / qnorm : 0.0;
  return out;
}

/// Discrete Friedrichs equivalence constant: smallest C with
/// ||u||_{L^2}^2 <= (C^2 - 1) ||grad_T u||^2 over scalar CR_{k,0}.
inline double friedrichs_constant(const Triangulation& T, int k) {
  const DofMap map = build_dofmap(T, k, Space::ScalarCR0);
  if (map.dim == 0) throw EmptyVelocitySpace("friedrichs_constant: CR space is empty");
  const AssembledOperator A = assemble_broken_gradient(T, map);
  const AssembledOperator M = assemble_mass(T, map);
  // largest lambda of M u = lambda A u == 1 / smallest of A u = mu M u
  const EigResult eig = symmetric_eig_smallest(A.mat, M.mat);
  if (eig.lambda <= 0) throw NotSPD("friedrichs_constant: stiffness not positive definite");
  const double lambda_max = 1.0 / eig.lambda;
  return std::sqrt(1.0 + lambda_max);
}

}  // namespace crstokes

#endif  // CRSTOKES_INFSUP_HPP
