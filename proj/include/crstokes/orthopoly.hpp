#ifndef CRSTOKES_ORTHOPOLY_HPP
#define CRSTOKES_ORTHOPOLY_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace crstokes {

struct InvalidDegree : std::runtime_error {
  explicit InvalidDegree(const std::string& what) : std::runtime_error(what) {}
};

struct WeightedSeminormUndefined : std::runtime_error {
  explicit WeightedSeminormUndefined(const std::string& what) : std::runtime_error(what) {}
};

struct VertexMismatch : std::runtime_error {
  explicit VertexMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct LegendreValue {
  double value = 0.0;
  double derivative = 0.0;
};

/// Legendre polynomial L_k and its first derivative by the three-term
/// recurrence (n+1)L_{n+1} = (2n+1)xL_n - nL_{n-1}, differentiated alongside
/// so the endpoints x = +-1 are exact.
inline LegendreValue legendre_eval(int k, double x) {
  if (k < 0) throw InvalidDegree("legendre_eval: negative degree");
  if (k == 0) return {1.0, 0.0};
  double pm1 = 1.0, dm1 = 0.0;  // L_0
  double p = x, d = 1.0;        // L_1
  for (int n = 1; n < k; ++n) {
    const double pn = ((2 * n + 1) * x * p - n * pm1) / (n + 1);
    const double dn = ((2 * n + 1) * (p + x * d) - n * dm1) / (n + 1);
    pm1 = p;
    dm1 = d;
    p = pn;
    d = dn;
  }
  return {p, d};
}

namespace detail {

// Jacobi polynomial P_n^{(a,b)} with derivative, general recurrence.
inline LegendreValue jacobi_eval(int n, double a, double b, double x) {
  if (n < 0) throw InvalidDegree("jacobi_eval: negative degree");
  if (n == 0) return {1.0, 0.0};
  double pm1 = 1.0, dm1 = 0.0;
  double p = 0.5 * (a - b) + 0.5 * (a + b + 2.0) * x;
  double d = 0.5 * (a + b + 2.0);
  for (int m = 2; m <= n; ++m) {
    const double s = 2.0 * m + a + b;
    const double c0 = 2.0 * m * (m + a + b) * (s - 2.0);
    const double c1 = (s - 1.0) * (s * (s - 2.0) * x + a * a - b * b);
    const double c1d = (s - 1.0) * s * (s - 2.0);
    const double c2 = 2.0 * (m + a - 1.0) * (m + b - 1.0) * s;
    const double pn = (c1 * p - c2 * pm1) / c0;
    const double dn = (c1 * d + c1d * p - c2 * dm1) / c0;
    pm1 = p;
    dm1 = d;
    p = pn;
    d = dn;
  }
  return {p, d};
}

inline double binom(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

}  // namespace detail

/// P_n^{(3,3)}(x).
inline double jacobi33_eval(int n, double x) { return detail::jacobi_eval(n, 3.0, 3.0, x).value; }

/// Anti-symmetric edge bubbles psi~_k^- and psi~_k^+ (odd k >= 5):
///   psi~_k^-(x) = c_k^{-1} (1+x)(1-x)^2/4 P_{k-3}^{(3,3)}(x),
///   psi~_k^+(x) = -psi~_k^-(-x),  c_k = (-1)^{k-1} binom(k,3).
inline double psi_bubble(int k, int sign, double x) {
  if (k < 5 || k % 2 == 0) throw InvalidDegree("psi_bubble: k must be odd and >= 5");
  if (sign != +1 && sign != -1) throw std::invalid_argument("psi_bubble: sign must be +-1");
  const double s = (sign < 0) ? x : -x;
  const double ck = detail::binom(k, 3);  // (-1)^{k-1} = +1 for odd k
  const double v = (1.0 + s) * (1.0 - s) * (1.0 - s) / 4.0 * jacobi33_eval(k - 3, s) / ck;
  return (sign < 0) ? v : -v;
}

/// phi~_k = L_{k-1} - L'_{k-1}(-1) psi~_k^- - L'_{k-1}(1) psi~_k^+;
/// satisfies phi~_k(+-1) = 1 and phi~_k'(+-1) = 0.
inline double phi_tilde(int k, double x) {
  if (k < 5 || k % 2 == 0) throw InvalidDegree("phi_tilde: k must be odd and >= 5");
  const double dm = legendre_eval(k - 1, -1.0).derivative;
  const double dp = legendre_eval(k - 1, 1.0).derivative;
  return legendre_eval(k - 1, x).value - dm * psi_bubble(k, -1, x) - dp * psi_bubble(k, +1, x);
}

struct GaussRule {
  std::vector<double> points;
  std::vector<double> weights;
};

namespace detail {

// Golub-Welsch: nodes/weights from the symmetric tridiagonal recurrence matrix.
inline GaussRule golub_welsch(const std::vector<double>& diag, const std::vector<double>& offdiag,
                              double mu0) {
  const int n = static_cast<int>(diag.size());
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    J(i, i) = diag[i];
    if (i + 1 < n) J(i, i + 1) = J(i + 1, i) = offdiag[i];
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  GaussRule rule;
  rule.points.resize(n);
  rule.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    rule.points[i] = es.eigenvalues()(i);
    const double v0 = es.eigenvectors()(0, i);
    rule.weights[i] = mu0 * v0 * v0;
  }
  return rule;
}

}  // namespace detail

/// n-point Gauss-Legendre rule on [-1,1]; exact for degree <= 2n-1.
inline GaussRule gauss_legendre(int n) {
  if (n < 1) throw std::invalid_argument("gauss_legendre: n must be positive");
  std::vector<double> diag(n, 0.0), off(n - 1);
  for (int j = 1; j < n; ++j) off[j - 1] = j / std::sqrt(4.0 * j * j - 1.0);
  return detail::golub_welsch(diag, off, 2.0);
}

/// n-point Gauss-Jacobi rule on [-1,1] for the weight (1-x); exact for
/// polynomial factors of degree <= 2n-1.
inline GaussRule gauss_jacobi10(int n) {
  if (n < 1) throw std::invalid_argument("gauss_jacobi10: n must be positive");
  std::vector<double> diag(n), off(n - 1);
  // monic recurrence coefficients for alpha = 1, beta = 0
  for (int j = 0; j < n; ++j) diag[j] = -1.0 / ((2.0 * j + 1.0) * (2.0 * j + 3.0));
  for (int j = 1; j < n; ++j) off[j - 1] = std::sqrt(j * (j + 1.0)) / (2.0 * j + 1.0);
  return detail::golub_welsch(diag, off, 2.0);
}

/// int_{-1}^{1} (t+1) L_k(t)^2 dt by Gauss quadrature; equals 2/(2k+1).
inline double weighted_l2_integral(int k) {
  if (k < 0) throw InvalidDegree("weighted_l2_integral: negative degree");
  const GaussRule g = gauss_legendre(k + 2);
  double s = 0.0;
  for (std::size_t i = 0; i < g.points.size(); ++i) {
    const double v = legendre_eval(k, g.points[i]).value;
    s += g.weights[i] * (g.points[i] + 1.0) * v * v;
  }
  return s;
}

/// int_{-1}^{1} (t+1) L_k'(t)^2 dt by Gauss quadrature; equals k(k+1).
inline double weighted_h1_integral(int k) {
  if (k < 0) throw InvalidDegree("weighted_h1_integral: negative degree");
  const GaussRule g = gauss_legendre(k + 1);
  double s = 0.0;
  for (std::size_t i = 0; i < g.points.size(); ++i) {
    const double d = legendre_eval(k, g.points[i]).derivative;
    s += g.weights[i] * (g.points[i] + 1.0) * d * d;
  }
  return s;
}

namespace detail {

// Difference quotients D_n(x,y) = (L_n(x)-L_n(y))/(x-y) as coefficient
// matrices in the tensor Legendre basis L_i(x)L_j(y).  The recurrence
//   D_{n+1} = (2n+1)/(n+1) [x D_n + L_n(y)] - n/(n+1) D_{n-1}
// keeps all coefficient arithmetic free of divisions by (x-y).
// apply_x multiplies a coefficient matrix by x via
//   x L_i = ((i+1) L_{i+1} + i L_{i-1})/(2i+1).
inline Eigen::MatrixXd apply_x(const Eigen::MatrixXd& c) {
  const int nx = static_cast<int>(c.rows());
  const int ny = static_cast<int>(c.cols());
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(nx + 1, ny);
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j) {
      if (c(i, j) == 0.0) continue;
      r(i + 1, j) += c(i, j) * (i + 1.0) / (2.0 * i + 1.0);
      if (i > 0) r(i - 1, j) += c(i, j) * i / (2.0 * i + 1.0);
    }
  return r;
}

// Accumulates sum_n f_n D_n for Legendre coefficients f of a polynomial f.
inline Eigen::MatrixXd difference_quotient_coeffs(const std::vector<double>& f) {
  const int d = static_cast<int>(f.size()) - 1;
  const int m = std::max(d, 1);
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(m, m);
  Eigen::MatrixXd dn = Eigen::MatrixXd::Zero(m, m);   // D_n, starts at D_0 = 0
  Eigen::MatrixXd dn1 = Eigen::MatrixXd::Zero(m, m);  // D_{n-1}
  for (int n = 0; n < d; ++n) {
    // D_{n+1} from D_n, D_{n-1}
    Eigen::MatrixXd xd = apply_x(dn).topRows(m);
    xd(0, n) += 1.0;  // + L_n(y)
    Eigen::MatrixXd next = (2.0 * n + 1.0) / (n + 1.0) * xd;
    if (n >= 1) next -= (static_cast<double>(n) / (n + 1.0)) * dn1;
    dn1 = dn;
    dn = next;
    if (n + 1 <= d && f[n + 1] != 0.0) acc += f[n + 1] * dn;
  }
  return acc;
}

// Exact integral of the squared tensor-Legendre polynomial over [-1,1]^2.
inline double tensor_square_integral(const Eigen::MatrixXd& c) {
  double s = 0.0;
  for (int i = 0; i < c.rows(); ++i)
    for (int j = 0; j < c.cols(); ++j)
      s += c(i, j) * c(i, j) * (2.0 / (2.0 * i + 1.0)) * (2.0 / (2.0 * j + 1.0));
  return s;
}

}  // namespace detail

/// |L_k|^2_{H^{1/2}(I)} = int int ((L_k(x)-L_k(y))/(x-y))^2 dx dy = 4 H_k.
inline double legendre_h12_seminorm_sq(int k) {
  if (k < 0) throw InvalidDegree("legendre_h12_seminorm_sq: negative degree");
  if (k == 0) return 0.0;
  std::vector<double> f(k + 1, 0.0);
  f[k] = 1.0;
  return detail::tensor_square_integral(detail::difference_quotient_coeffs(f));
}

/// Univariate polynomial in the Legendre coefficient basis.
class Poly1D {
 public:
  Poly1D() : coef_(1, 0.0) {}
  explicit Poly1D(std::vector<double> legendre_coeffs) : coef_(std::move(legendre_coeffs)) {
    if (coef_.empty()) coef_.assign(1, 0.0);
    trim();
  }

  static Poly1D legendre(int k) {
    std::vector<double> c(k + 1, 0.0);
    c[k] = 1.0;
    return Poly1D(std::move(c));
  }

  /// Legendre expansion of an arbitrary polynomial of degree <= d given as an
  /// evaluator, via exact Gauss projection.
  static Poly1D project(int d, const std::function<double(double)>& f) {
    const GaussRule g = gauss_legendre(d + 1);
    std::vector<double> c(d + 1, 0.0);
    std::vector<double> lv(d + 1);
    for (std::size_t q = 0; q < g.points.size(); ++q) {
      const double x = g.points[q];
      lv[0] = 1.0;
      if (d >= 1) lv[1] = x;
      for (int j = 2; j <= d; ++j) lv[j] = ((2 * j - 1) * x * lv[j - 1] - (j - 1) * lv[j - 2]) / j;
      const double fw = g.weights[q] * f(x);
      for (int j = 0; j <= d; ++j) c[j] += fw * lv[j] * (2.0 * j + 1.0) / 2.0;
    }
    return Poly1D(std::move(c));
  }

  int degree() const { return static_cast<int>(coef_.size()) - 1; }
  const std::vector<double>& coeffs() const { return coef_; }

  LegendreValue eval(double x) const {
    double v = 0.0, dv = 0.0;
    double pm1 = 1.0, dm1 = 0.0, p = x, d = 1.0;
    for (int j = 0; j < static_cast<int>(coef_.size()); ++j) {
      double pv, pd;
      if (j == 0) {
        pv = 1.0;
        pd = 0.0;
      } else if (j == 1) {
        pv = p;
        pd = d;
      } else {
        pv = ((2 * j - 1) * x * p - (j - 1) * pm1) / j;
        pd = ((2 * j - 1) * (p + x * d) - (j - 1) * dm1) / j;
        pm1 = p;
        dm1 = d;
        p = pv;
        d = pd;
      }
      v += coef_[j] * pv;
      dv += coef_[j] * pd;
    }
    return {v, dv};
  }

  Poly1D operator+(const Poly1D& o) const {
    std::vector<double> c(std::max(coef_.size(), o.coef_.size()), 0.0);
    for (std::size_t i = 0; i < coef_.size(); ++i) c[i] += coef_[i];
    for (std::size_t i = 0; i < o.coef_.size(); ++i) c[i] += o.coef_[i];
    return Poly1D(std::move(c));
  }
  Poly1D operator-(const Poly1D& o) const {
    std::vector<double> c(std::max(coef_.size(), o.coef_.size()), 0.0);
    for (std::size_t i = 0; i < coef_.size(); ++i) c[i] += coef_[i];
    for (std::size_t i = 0; i < o.coef_.size(); ++i) c[i] -= o.coef_[i];
    return Poly1D(std::move(c));
  }
  Poly1D scaled(double a) const {
    std::vector<double> c = coef_;
    for (double& x : c) x *= a;
    return Poly1D(std::move(c));
  }
  /// p(x) -> p(-x): L_j picks up (-1)^j.
  Poly1D flipped() const {
    std::vector<double> c = coef_;
    for (std::size_t j = 1; j < c.size(); j += 2) c[j] = -c[j];
    return Poly1D(std::move(c));
  }

  double max_abs_coeff() const {
    double m = 0.0;
    for (double c : coef_) m = std::max(m, std::abs(c));
    return m;
  }

  double l2_norm_sq() const {
    double s = 0.0;
    for (int j = 0; j < static_cast<int>(coef_.size()); ++j)
      s += coef_[j] * coef_[j] * 2.0 / (2.0 * j + 1.0);
    return s;
  }

 private:
  void trim() {
    while (coef_.size() > 1 && coef_.back() == 0.0) coef_.pop_back();
  }
  std::vector<double> coef_;
};

/// Weighted seminorms are finite only when the matching endpoint value of f
/// vanishes; undefined entries are reported as NaN.
struct IntervalHalfNorms {
  double seminorm_h12 = 0.0;
  double seminorm_left = 0.0;   // H^{1/2}_{(0,}: weight 1/(1+s), needs f(-1)=0
  double seminorm_right = 0.0;  // H^{1/2}_{,0)}: weight 1/(1-s), needs f(1)=0
  double seminorm_00 = 0.0;
  bool has_left = false;
  bool has_right = false;
};

namespace detail {

// Legendre-basis synthetic division f = (1+s) g using
// (1+s)L_j = (j+1)/(2j+1) L_{j+1} + L_j + j/(2j+1) L_{j-1} in coefficient
// form, solved by back substitution from the top degree.  The remainder is
// proportional to f(-1); it must vanish for the division to be exact.
inline bool divide_by_one_plus_s(const std::vector<double>& c, std::vector<double>& b,
                                 double* remainder) {
  const int d = static_cast<int>(c.size()) - 1;
  if (d == 0) {
    b.assign(1, 0.0);
    *remainder = c[0];
    return std::abs(c[0]) == 0.0;
  }
  b.assign(d, 0.0);
  for (int i = d; i >= 1; --i) {
    double rhs = c[i];
    if (i < d) rhs -= b[i];
    if (i + 1 < d) rhs -= b[i + 1] * (i + 1.0) / (2.0 * i + 3.0);
    b[i - 1] = rhs * (2.0 * i - 1.0) / i;
  }
  double rem = c[0] - b[0];
  if (1 < static_cast<int>(b.size())) rem -= b[1] / 3.0;
  *remainder = rem;
  return true;
}

// int (1+s) g(s)^2 ds by Gauss quadrature.
inline double weighted_square_integral(const Poly1D& g) {
  const int n = g.degree() + 2;
  const GaussRule r = gauss_legendre(n);
  double s = 0.0;
  for (std::size_t i = 0; i < r.points.size(); ++i) {
    const double v = g.eval(r.points[i]).value;
    s += r.weights[i] * (1.0 + r.points[i]) * v * v;
  }
  return s;
}

inline double left_seminorm_sq(const Poly1D& f, const char* who) {
  const double tol = 1e-10 * std::max(1.0, f.max_abs_coeff());
  const double fm1 = f.eval(-1.0).value;
  if (std::abs(fm1) > tol)
    throw WeightedSeminormUndefined(std::string(who) + ": endpoint value f(-1) = " +
                                    std::to_string(fm1) + " is nonzero");
  std::vector<double> b;
  double rem = 0.0;
  divide_by_one_plus_s(f.coeffs(), b, &rem);
  return weighted_square_integral(Poly1D(std::move(b)));
}

}  // namespace detail

/// H^{1/2} seminorm (squared) of a polynomial via the symbolically formed
/// difference quotient, plus the endpoint-weighted seminorms.
inline double h12_seminorm_sq(const Poly1D& f) {
  if (f.degree() == 0) return 0.0;
  return detail::tensor_square_integral(detail::difference_quotient_coeffs(f.coeffs()));
}

inline IntervalHalfNorms interval_half_norms(const Poly1D& f) {
  IntervalHalfNorms out;
  out.seminorm_h12 = std::sqrt(h12_seminorm_sq(f));
  const double tol = 1e-10 * std::max(1.0, f.max_abs_coeff());
  out.has_left = std::abs(f.eval(-1.0).value) <= tol;
  out.has_right = std::abs(f.eval(1.0).value) <= tol;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  double left_sq = nan, right_sq = nan;
  if (out.has_left) left_sq = detail::left_seminorm_sq(f, "interval_half_norms(left)");
  if (out.has_right) right_sq = detail::left_seminorm_sq(f.flipped(), "interval_half_norms(right)");
  out.seminorm_left = out.has_left ? std::sqrt(left_sq) : nan;
  out.seminorm_right = out.has_right ? std::sqrt(right_sq) : nan;
  out.seminorm_00 = (out.has_left && out.has_right) ? std::sqrt(left_sq + right_sq) : nan;
  return out;
}

/// Squared left-weighted seminorm |f|^2_{(0,} alone (precondition f(-1)=0).
inline double weighted_left_seminorm_sq(const Poly1D& f) {
  return detail::left_seminorm_sq(f, "weighted_left_seminorm_sq");
}

/// Boundary norm ||| v ||| of three edge traces v_i pulled back to [-1,1]:
///   ( sum_i ||v_i||^2_{H^{1/2}(I)} + |d_i|^2_{(0,} )^{1/2},
/// d_i(s) = v_{i-1}(s) - v_{i+1}(-s).  Each d_i must vanish at s = -1.
inline double boundary_triple_norm(const std::array<Poly1D, 3>& traces) {
  double total = 0.0;
  for (int i = 0; i < 3; ++i) {
    const Poly1D& v = traces[i];
    total += v.l2_norm_sq() + h12_seminorm_sq(v);
    const Poly1D d = traces[(i + 2) % 3] - traces[(i + 1) % 3].flipped();
    const double scale = std::max(1.0, d.max_abs_coeff());
    if (std::abs(d.eval(-1.0).value) > 1e-9 * scale)
      throw VertexMismatch("boundary_triple_norm: traces disagree at a vertex (d_" +
                           std::to_string(i + 1) + "(-1) != 0)");
    total += detail::left_seminorm_sq(d, "boundary_triple_norm");
  }
  return std::sqrt(total);
}

}  // namespace crstokes

#endif  // CRSTOKES_ORTHOPOLY_HPP
