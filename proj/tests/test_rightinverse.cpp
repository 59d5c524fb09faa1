#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "crstokes/rightinverse.hpp"
#include "test_helpers.hpp"

using namespace crstokes;
using crstokes::testing::random_pressure;

namespace {

Triangulation flat_two_triangle_mesh() {
  // boundary vertex 0 with two nearly collinear boundary edges: flat critical
  return validate({{0, 0}, {1, 0}, {-1, 0.005}, {0, 1}}, {{0, 1, 3}, {2, 0, 3}});
}

Triangulation double_flat_patch() {
  return validate({{-2.0, 0.005}, {-1.0, 0.0}, {0.0, 0.0}, {1.0, 0.004}, {-0.5, -1.0}},
                  {{0, 4, 1}, {1, 4, 2}, {2, 4, 3}});
}

Triangulation crisscross_plus_glued() {
  Triangulation cc = crisscross(1);
  std::vector<Vec2> vs = cc.vertices;
  vs.emplace_back(0.5, -0.5);
  std::vector<std::array<int, 3>> ts(cc.triangles);
  ts.push_back({0, static_cast<int>(vs.size()) - 1, 1});
  return validate(std::move(vs), std::move(ts));
}

double binom(int n, int k) { return crstokes::detail::binom(n, k); }

}  // namespace

TEST_CASE("functional_A: telescoping, alternating patch, norm bound") {
  const Triangulation T = crisscross(1);
  const int z = 4;

  // globally continuous q on an even patch telescopes to zero
  const PiecewisePoly qc = crstokes::testing::project_field(T, 2, 1, [](const Vec2& p) {
    Eigen::VectorXd v(1);
    v << p.x() * p.x() + 0.3 * p.y();
    return v;
  });
  CHECK(std::abs(functional_A(T, z, qc)) <= 1e-13);

  // q = (-1)^l on the ordered patch gives m = 4
  const VertexPatch patch = ordered_patch(T, z);
  PiecewisePoly qa(T, 0, 1);
  for (int l = 0; l < 4; ++l) qa.coef(patch.tris[l])(0, 0) = (l % 2 == 0) ? -1.0 : 1.0;
  CHECK(functional_A(T, z, qa) == Catch::Approx(4.0).epsilon(1e-13));

  // |A| <= binom(k+2,2) sum |K_l|^{-1/2} ||q||_{L2(K_l)}
  std::mt19937 rng(2);
  for (int deg : {1, 3}) {
    const PiecewisePoly q = random_pressure(T, deg, rng);
    double bound = 0.0;
    const QuadRule rule = quad_rule(2 * deg);
    for (int t : T.vertex_tris[z]) {
      double l2 = 0.0;
      for (std::size_t qq = 0; qq < rule.points.size(); ++qq) {
        const double v = q.eval(t, rule.points[qq])(0);
        l2 += 2.0 * T.area[t] * rule.weights[qq] * v * v;
      }
      bound += std::sqrt(l2 / T.area[t]);
    }
    bound *= binom(deg + 3, 2);  // pressure of degree deg pairs with k = deg+1
    CHECK(std::abs(functional_A(T, z, q)) <= bound * (1.0 + 1e-12));
  }
}

TEST_CASE("extended edge bubble: traces, vertex gradients, divergence means") {
  const Triangulation T = diagonal_square(1);
  int edge = -1;
  for (int e = 0; e < static_cast<int>(T.edges.size()); ++e)
    if (!T.edges[e].boundary) edge = e;
  const auto& E = T.edges[edge];

  for (int k : {5, 7}) {
    const ExtendedBubble bub = build_extended_bubble_edge(T, edge, k);

    // traces: outer edges carry the plain Legendre trace; jump across E is zero
    for (int s = 0; s < 2; ++s) {
      const int tri = E.tri[s];
      const int opp = T.local_vertex_index(tri, T.opposite_vertex(tri, edge));
      for (int le = 0; le < 3; ++le) {
        const int ge = T.tri_edges[tri][le];
        const testing::EdgeQuad eq = testing::edge_quad(T, ge, 50);
        for (std::size_t i = 0; i < eq.points.size(); ++i) {
          const Bary l = T.barycentric3(tri, eq.points[i]);
          const double val = bub.field.eval(tri, l)(0);
          if (ge == edge) {
            const double other = bub.field.eval(E.tri[1 - s], T.barycentric3(E.tri[1 - s], eq.points[i]))(0);
            CHECK(std::abs(val - other) <= 1e-9);
          } else {
            const double ref = legendre_eval(k, 1.0 - 2.0 * l[opp]).value;
            CHECK(std::abs(val - ref) <= 1e-9);
          }
        }
      }
    }

    // vertex gradients equal those of the plain bubble (analytic + FD check)
    for (int s = 0; s < 2; ++s) {
      const int tri = E.tri[s];
      const BarycentricFrame fr(T, tri);
      const int opp = T.local_vertex_index(tri, T.opposite_vertex(tri, edge));
      for (int vi = 0; vi < 3; ++vi) {
        Bary l{0, 0, 0};
        l[vi] = 1.0;
        const Eigen::MatrixXd g = bub.field.grad(T, tri, l);
        const double ld = legendre_eval(k, 1.0 - 2.0 * l[opp]).derivative;
        const Vec2 ref = -2.0 * ld * fr.grad_lambda[opp];
        CHECK((Vec2(g(0, 0), g(0, 1)) - ref).norm() <= 1e-8 * std::max(1.0, ref.norm()));
        // finite-difference cross-check of the analytic gradient
        const Vec2 pv = T.vertices[T.triangles[tri][vi]];
        const Vec2 inward = (T.vertices[T.triangles[tri][(vi + 1) % 3]] +
                             T.vertices[T.triangles[tri][(vi + 2) % 3]]) /
                                2.0 -
                            pv;
        const double h = 1e-6;
        const double f0 = bub.field.eval(tri, T.barycentric3(tri, pv))(0);
        const double f1 = bub.field.eval(tri, T.barycentric3(tri, pv + h * inward))(0);
        const double fd_dir = (f1 - f0) / h;
        const double an_dir = Vec2(g(0, 0), g(0, 1)).dot(inward);
        CHECK(std::abs(fd_dir - an_dir) <= 1e-3 * std::max(1.0, std::abs(an_dir)));
      }
    }

    // property iv: zero divergence means of B~ n_E on both triangles
    PiecewisePoly vec(T, k, 2);
    for (int tri : bub.support) {
      vec.coef(tri).row(0) = E.normal.x() * bub.field.coef(tri).row(0);
      vec.coef(tri).row(1) = E.normal.y() * bub.field.coef(tri).row(0);
    }
    for (double m : vec.divergence(T).elementwise_integral(T)) CHECK(std::abs(m) <= 1e-10);
  }
}

TEST_CASE("psi_E denominator identity |E|/30 on random triangles") {
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec2 a(u(rng), u(rng)), b(a + Vec2(1.0 + 0.5 * u(rng), 0.3 * u(rng)));
    const Vec2 c(a + Vec2(0.3 * u(rng), 1.0 + 0.5 * u(rng)));
    Triangulation T;
    try {
      T = validate({a, b, c}, {{0, 1, 2}});
    } catch (const std::exception&) {
      continue;
    }
    const BarycentricFrame fr(T, 0);
    // edge opposite vertex 2 joins vertices 0 and 1
    const int opp = 2;
    const Vec2 nu = -fr.grad_lambda[opp].normalized();
    const double Elen = T.edges[T.tri_edges[0][opp]].length;
    const QuadRule rule = quad_rule(8);
    double integral = 0.0;
    for (std::size_t q = 0; q < rule.points.size(); ++q) {
      const Bary& l = rule.points[q];
      // grad of l0^2 l1^2
      Vec2 g = 2.0 * l[0] * l[1] * l[1] * fr.grad_lambda[0] +
               2.0 * l[0] * l[0] * l[1] * fr.grad_lambda[1];
      integral += 2.0 * T.area[0] * rule.weights[q] * g.dot(nu);
    }
    CHECK(std::abs(integral - Elen / 30.0) <= 1e-12 * (Elen / 30.0));
  }
}

TEST_CASE("energy of extended edge bubbles grows like sqrt(log(k+1))") {
  const Triangulation T = diagonal_square(1);
  int edge = -1;
  for (int e = 0; e < static_cast<int>(T.edges.size()); ++e)
    if (!T.edges[e].boundary) edge = e;
  double lo = 1e300, hi = 0.0;
  for (int k = 5; k <= 13; k += 4) {
    const ExtendedBubble bub = build_extended_bubble_edge(T, edge, k);
    const double scaled = bub.energy / std::sqrt(std::log(k + 1.0));
    lo = std::min(lo, scaled);
    hi = std::max(hi, scaled);
  }
  CHECK(hi / lo <= 5.0);
}

TEST_CASE("extended triangle bubble (even k)") {
  const Triangulation T = validate({{0.1, 0.0}, {1.2, 0.3}, {0.4, 1.1}}, {{0, 1, 2}});
  for (int k : {4, 6}) {
    const ExtendedBubble bub = build_extended_bubble_triangle(T, 0, k);

    // trace matches the plain bubble at sampled edge points
    for (int le = 0; le < 3; ++le) {
      const testing::EdgeQuad eq = testing::edge_quad(T, T.tri_edges[0][le], 25);
      for (std::size_t i = 0; i < eq.points.size(); ++i) {
        const Bary l = T.barycentric3(0, eq.points[i]);
        double ref = -1.0;
        for (int d = 0; d < 3; ++d) ref += legendre_eval(k, 1.0 - 2.0 * l[d]).value;
        ref *= 0.5;
        CHECK(std::abs(bub.field.eval(0, l)(0) - ref) <= 1e-9);
      }
    }

    // divergence means vanish for both coordinate directions
    for (int c = 0; c < 2; ++c) {
      PiecewisePoly vec(T, k, 2);
      vec.coef(0).row(c) = bub.field.coef(0).row(0);
      CHECK(std::abs(vec.divergence(T).elementwise_integral(T)[0]) <= 1e-10);
    }

    // vertex divergence values: binom(k+1,2) |E_s|/|K| (-1 if j=s else cos a3)
    const BarycentricFrame fr(T, 0);
    for (int j = 1; j <= 2; ++j) {
      const Vec2 nj = -fr.grad_lambda[j - 1].normalized();
      PiecewisePoly vec(T, k, 2);
      vec.coef(0).row(0) = nj.x() * bub.field.coef(0).row(0);
      vec.coef(0).row(1) = nj.y() * bub.field.coef(0).row(0);
      for (int s = 1; s <= 2; ++s) {
        Bary l{0, 0, 0};
        l[s - 1] = 1.0;
        const double dv = vec.divergence_at(T, 0, l);
        const double Es = T.edges[T.tri_edges[0][s - 1]].length;
        const double a3 = T.angle_at(0, T.triangles[0][2]);
        const double ref =
            binom(k + 1, 2) * Es / T.area[0] * ((j == s) ? -1.0 : std::cos(a3));
        CHECK(dv == Catch::Approx(ref).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("even-k vertex system determinant identity 2|K| sin(alpha3)") {
  std::mt19937 rng(13);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (int trial = 0; trial < 25; ++trial) {
    const Vec2 a(u(rng), u(rng));
    const Vec2 b = a + Vec2(1.0 + u(rng), 0.4 * u(rng));
    const Vec2 c = a + Vec2(0.4 * u(rng), 1.0 + u(rng));
    Triangulation T;
    try {
      T = validate({a, b, c}, {{0, 1, 2}});
    } catch (const std::exception&) {
      continue;
    }
    const double E1 = T.edges[T.tri_edges[0][0]].length;
    const double E2 = T.edges[T.tri_edges[0][1]].length;
    const double a3 = T.angle_at(0, T.triangles[0][2]);
    Eigen::Matrix2d M;
    M << E1, -E1 * std::cos(a3), -E2 * std::cos(a3), E2;
    CHECK(M.determinant() ==
          Catch::Approx(2.0 * T.area[0] * std::sin(a3)).epsilon(1e-12));
  }
}

TEST_CASE("fan_T_matrix: 1x1 case and determinant closed form") {
  const Eigen::MatrixXd T1 = fan_T_matrix({M_PI / 3, M_PI / 3});
  REQUIRE(T1.rows() == 1);
  CHECK(T1(0, 0) == Catch::Approx(2.0 / std::sqrt(3.0)).epsilon(1e-13));

  std::mt19937 rng(17);
  std::uniform_real_distribution<double> u(M_PI / 12, M_PI / 3);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + trial % 5;
    std::vector<double> angles(n + 1);
    double total = 0.0;
    for (double& a : angles) {
      a = u(rng);
      total += a;
    }
    if (total >= M_PI - 0.05) {
      const double scale = (M_PI - 0.1) / total;
      for (double& a : angles) a *= scale;
      if (angles[0] < M_PI / 12) continue;
    }
    const Eigen::MatrixXd Tm = fan_T_matrix(angles);
    const double det = Tm.determinant();
    const double closed = fan_T_det_closed_form(angles);
    CHECK(std::abs(det - closed) <= 1e-10 * std::max(1.0, std::abs(closed)));
  }
}

TEST_CASE("fan system: two-way matrix consistency and solution bound") {
  std::mt19937 rng(23);
  const int k = 5;
  for (int mesh = 0; mesh < 2; ++mesh) {
    const Triangulation T = (mesh == 0) ? crisscross(1) : double_flat_patch();
    TopologyReport rep = classify_critical(T, 0.01);
    fan_decomposition(T, rep);
    REQUIRE(!rep.fans.fans.empty());
    const PiecewisePoly q = random_pressure(T, k - 1, rng);
    BubbleCache cache;
    for (const Fan& fan : rep.fans.fans) {
      const FanSystem fs = fan_system(T, fan, k, q, cache, rep.chosen_edge);
      const double scale = fs.M_direct.cwiseAbs().maxCoeff();
      CHECK((fs.M_geom - fs.M_direct).cwiseAbs().maxCoeff() <= 1e-9 * scale);
      // det T closed form against the numeric determinant
      CHECK(std::abs(fs.Tmat.determinant() - fs.detT) <=
            1e-10 * std::max(1.0, std::abs(fs.detT)));
      // ||alpha|| <= C~ h_z / (k(k+1)) ||r||; measure C~
      double hz = 0.0;
      for (int t : T.vertex_tris[fan.apex]) hz = std::max(hz, T.diameter[t]);
      if (fs.r.norm() > 0) {
        const double ctilde = fs.alpha.norm() * k * (k + 1.0) / (hz * fs.r.norm());
        INFO("measured C~ = " << ctilde);
        CHECK(ctilde < 100.0);
      }
    }
  }
}

TEST_CASE("pi_cr (odd): vanishing functionals give the zero field") {
  const Triangulation T = crisscross(1);
  const TopologyReport rep = topology_report(T, 0.01);
  // continuous mean-zero pressure: all alternating sums vanish
  const PiecewisePoly q = crstokes::testing::project_field(T, 4, 1, [](const Vec2& p) {
    Eigen::VectorXd v(1);
    v << p.x() - 0.5;
    return v;
  });
  const PiCrResult r = pi_cr(T, 5, q, rep);
  CHECK(std::sqrt(r.velocity.l2_norm_sq(T)) <= 1e-12);
}

TEST_CASE("pi_cr contract on crisscross(1), k = 5 and 7") {
  const Triangulation T = crisscross(1);
  const TopologyReport rep = topology_report(T, 0.01);
  std::mt19937 rng(31);
  for (int k : {5, 7}) {
    for (int trial = 0; trial < 5; ++trial) {
      const PiecewisePoly q = random_pressure(T, k - 1, rng);
      const PiCrResult r = pi_cr(T, k, q, rep);
      for (double m : r.velocity.divergence(T).elementwise_integral(T))
        CHECK(std::abs(m) <= 1e-10);
      PiecewisePoly resid = q;
      resid -= r.velocity.divergence(T);
      const SvMembership sv = sv_membership(T, resid, k, rep);
      CHECK(sv.member);
      CHECK(r.expansion_residual <= 1e-9);
    }
  }
}

TEST_CASE("pi_cr contract on the even-k flat-critical mesh, k = 4 and 6") {
  const Triangulation T = flat_two_triangle_mesh();
  const TopologyReport rep = topology_report(T, 0.01);
  REQUIRE(rep.flat.size() == 1);
  std::mt19937 rng(37);
  for (int k : {4, 6}) {
    for (int trial = 0; trial < 5; ++trial) {
      const PiecewisePoly q = random_pressure(T, k - 1, rng);
      const PiCrResult r = pi_cr(T, k, q, rep);
      for (double m : r.velocity.divergence(T).elementwise_integral(T))
        CHECK(std::abs(m) <= 1e-10);
      PiecewisePoly resid = q;
      resid -= r.velocity.divergence(T);
      // the A-functionals of div v_q match the targets at every critical point
      for (const auto& [z, kind] : rep.critical) {
        (void)kind;
        const auto it = rep.chosen_edge.find(z);
        const int anchor = it == rep.chosen_edge.end() ? -1 : it->second;
        CHECK(std::abs(functional_A(T, z, resid, anchor)) <= 1e-9);
      }
      CHECK(sv_membership(T, resid, k, rep).member);
    }
  }
}

TEST_CASE("sv_membership: constants, eta monotonicity") {
  const Triangulation T = crisscross(1);
  const TopologyReport rep = topology_report(T, 0.01);
  PiecewisePoly one(T, 0, 1);
  for (int t = 0; t < 4; ++t) one.coef(t)(0, 0) = 1.0;
  CHECK(sv_membership(T, one, 1, rep).member);

  // membership for larger eta implies membership for smaller eta
  std::mt19937 rng(41);
  const Triangulation P = perturb(crisscross(1), 4, Vec2(0.001, 0.0));
  const TopologyReport small = topology_report(P, 1e-4);
  const TopologyReport large = topology_report(P, 0.05);
  for (int trial = 0; trial < 10; ++trial) {
    const PiecewisePoly q = random_pressure(P, 2, rng);
    const SvMembership in_large = sv_membership(P, q, 3, large);
    if (in_large.member) CHECK(sv_membership(P, q, 3, small).member);
  }
}

TEST_CASE("bernardi_raugel mean correction") {
  const Triangulation T2 = diagonal_square(1);
  PiecewisePoly zero(T2, 0, 1);
  const BernardiRaugel b0 = bernardi_raugel(T2, zero);
  CHECK(b0.coefficients.norm() <= 1e-14);

  // +-c on the two triangles: one interior bubble solves one equation
  PiecewisePoly pm(T2, 0, 1);
  pm.coef(0)(0, 0) = 2.0;
  pm.coef(1)(0, 0) = -2.0;
  const BernardiRaugel b1 = bernardi_raugel(T2, pm);
  CHECK(b1.mean_residual <= 1e-12);
  const std::vector<double> means1 = b1.field.divergence(T2).elementwise_integral(T2);
  const std::vector<double> target1 = pm.elementwise_integral(T2);
  for (int t = 0; t < 2; ++t) CHECK(std::abs(means1[t] - target1[t]) <= 1e-12);

  // crisscross(1) with random trianglewise constants
  std::mt19937 rng(43);
  const Triangulation cc = crisscross(1);
  const PiecewisePoly q = random_pressure(cc, 0, rng);
  const BernardiRaugel b2 = bernardi_raugel(cc, q);
  const std::vector<double> means = b2.field.divergence(cc).elementwise_integral(cc);
  const std::vector<double> target = q.elementwise_integral(cc);
  for (int t = 0; t < 4; ++t) CHECK(std::abs(means[t] - target[t]) <= 1e-11);
  CHECK(b2.h1_norm > 0.0);
}

TEST_CASE("vertex_field: constraints, support, energy scaling") {
  const Triangulation T = diagonal_square(2);
  // pick an interior edge with both endpoints interior-ish
  int edge = -1;
  for (int e = 0; e < static_cast<int>(T.edges.size()); ++e)
    if (!T.edges[e].boundary) edge = e;
  REQUIRE(edge >= 0);
  const auto& E = T.edges[edge];

  const int k = 5;
  const VertexField vf = vertex_field(T, edge, 1, k);
  CHECK(vf.constraint_residual <= 1e-10);
  // exact vertex divergence values on the patch
  for (int s = 0; s < 2; ++s) {
    const int t = E.tri[s];
    for (int vi = 0; vi < 3; ++vi) {
      Bary l{0, 0, 0};
      l[vi] = 1.0;
      const double want = (T.triangles[t][vi] == E.v[0]) ? 1.0 : 0.0;
      CHECK(vf.field.divergence_at(T, t, l) == Catch::Approx(want).margin(1e-9));
    }
    CHECK(std::abs(vf.field.divergence(T).elementwise_integral(T)[t]) <= 1e-10);
  }
  // support: zero on triangles outside the edge patch
  for (int t = 0; t < static_cast<int>(T.triangles.size()); ++t) {
    if (t == E.tri[0] || t == E.tri[1]) continue;
    CHECK(vf.field.coef(t).cwiseAbs().maxCoeff() <= 1e-13);
  }

  // energy * k^2 / h_E stays within a factor 5 across k
  double lo = 1e300, hi = 0.0;
  for (int kk : {3, 5, 7, 9, 11, 13, 15}) {
    const VertexField v = vertex_field(T, edge, 1, kk);
    const double scaled = v.energy * kk * kk / E.length;
    lo = std::min(lo, scaled);
    hi = std::max(hi, scaled);
  }
  INFO("energy*k^2/h range [" << lo << ", " << hi << "]");
  CHECK(hi / lo <= 5.0);
}

TEST_CASE("acute_extension_step") {
  const Triangulation T = crisscross_plus_glued();
  auto [L, layers] = extension_sequence(T);
  REQUIRE(L == 1);

  std::mt19937 rng(47);
  const int k = 5;

  // T = T': zero field
  std::vector<int> all(T.triangles.size());
  for (std::size_t t = 0; t < all.size(); ++t) all[t] = static_cast<int>(t);
  const PiecewisePoly q0 = random_pressure(T, k - 1, rng);
  const ExtensionStep trivial = acute_extension_step(T, all, q0, k);
  CHECK(std::sqrt(trivial.velocity.l2_norm_sq(T)) <= 1e-14);

  // glued triangle: div matches q on T \ T'
  for (int kk : {5, 7, 9}) {
    const PiecewisePoly q = random_pressure(T, kk - 1, rng);
    const ExtensionStep st = acute_extension_step(T, layers[0], q, kk);
    CHECK(st.div_residual <= 1e-8);
    const double qn = std::sqrt(const_cast<PiecewisePoly&>(q).l2_norm_sq(T));
    const double scaled = st.grad_norm / (std::sqrt(std::log(kk + 1.0)) * qn);
    INFO("k = " << kk << ": |grad v| / (sqrt(log(k+1)) |q|) = " << scaled);
    CHECK(scaled < 1e3);
  }

  // precondition: subset without an interior vertex is rejected
  CHECK_THROWS_AS(acute_extension_step(T, {0}, q0, k), PreconditionViolated);
}

TEST_CASE("pi_cr parity preconditions") {
  const Triangulation T = crisscross(1);
  const TopologyReport rep = topology_report(T, 0.01);
  PiecewisePoly q(T, 2, 1);
  CHECK_THROWS_AS(pi_cr(T, 3, q, rep), ParityMismatch);
  PiecewisePoly q2(T, 1, 1);
  CHECK_THROWS_AS(pi_cr(T, 2, q2, rep), ParityMismatch);
}

TEST_CASE("pi_cr across multiple fans on crisscross(2)") {
  const Triangulation T = crisscross(2);
  const TopologyReport rep = topology_report(T, 0.01);
  REQUIRE(rep.inner.size() == 4);  // the four cell centers
  REQUIRE(rep.fans.fans.size() == 4);

  // fan supports pairwise disjoint
  std::vector<std::set<int>> supports;
  for (const Fan& f : rep.fans.fans) {
    std::set<int> tris;
    for (int e : f.edges)
      for (int t : {T.edges[e].tri[0], T.edges[e].tri[1]})
        if (t >= 0) tris.insert(t);
    supports.push_back(std::move(tris));
  }
  for (std::size_t a = 0; a < supports.size(); ++a)
    for (std::size_t b = a + 1; b < supports.size(); ++b)
      for (int t : supports[a]) REQUIRE(supports[b].count(t) == 0);

  std::mt19937 rng(53);
  const int k = 5;
  for (int trial = 0; trial < 3; ++trial) {
    const PiecewisePoly q = random_pressure(T, k - 1, rng);
    const PiCrResult r = pi_cr(T, k, q, rep);
    REQUIRE(r.fans.size() == 4);
    for (double m : r.velocity.divergence(T).elementwise_integral(T))
      CHECK(std::abs(m) <= 1e-10);
    PiecewisePoly resid = q;
    resid -= r.velocity.divergence(T);
    CHECK(sv_membership(T, resid, k, rep).member);
  }
}

TEST_CASE("vertex_field j = 2 targets the other endpoint") {
  const Triangulation T = diagonal_square(1);
  int edge = -1;
  for (int e = 0; e < static_cast<int>(T.edges.size()); ++e)
    if (!T.edges[e].boundary) edge = e;
  const auto& E = T.edges[edge];
  const VertexField vf = vertex_field(T, edge, 2, 5);
  CHECK(vf.constraint_residual <= 1e-10);
  for (int s = 0; s < 2; ++s) {
    const int t = E.tri[s];
    for (int vi = 0; vi < 3; ++vi) {
      Bary l{0, 0, 0};
      l[vi] = 1.0;
      const double want = (T.triangles[t][vi] == E.v[1]) ? 1.0 : 0.0;
      CHECK(vf.field.divergence_at(T, t, l) == Catch::Approx(want).margin(1e-9));
    }
  }
}

TEST_CASE("extension step with two triangles attached to one subset triangle") {
  // crisscross(1) plus a spike below the bottom edge plus two flaps on the
  // spike's free edges: T_out(spike) = {flapA, flapB}
  Triangulation cc = crisscross(1);
  std::vector<Vec2> vs = cc.vertices;
  const int tip = static_cast<int>(vs.size());
  vs.emplace_back(0.5, -0.6);   // spike tip
  const int fa = tip + 1;
  vs.emplace_back(-0.25, -0.5);  // flap A apex
  const int fb = tip + 2;
  vs.emplace_back(1.25, -0.5);  // flap B apex
  std::vector<std::array<int, 3>> ts(cc.triangles);
  ts.push_back({0, tip, 1});   // spike glued under [v0, v1]
  ts.push_back({0, fa, tip});  // flap A on edge [v0, tip]
  ts.push_back({tip, fb, 1});  // flap B on edge [tip, v1]
  const Triangulation T = validate(std::move(vs), std::move(ts));

  std::vector<int> subset = {0, 1, 2, 3, 4};  // crisscross plus the spike
  std::mt19937 rng(59);
  const int k = 5;
  const PiecewisePoly q = random_pressure(T, k - 1, rng);
  const ExtensionStep st = acute_extension_step(T, subset, q, k);
  CHECK(st.div_residual <= 1e-8);
}

TEST_CASE("concave critical vertex: classification, fan, even-k corrector") {
  // reflex corner at the origin: two boundary edges, each nearly aligned
  // with one of the two interior edges
  const Triangulation T = validate(
      {{0, 0}, {0.004, -1.0}, {1.0, 0.0}, {0.0, 1.0}, {-1.0, 0.004}},
      {{0, 1, 2}, {0, 2, 3}, {0, 3, 4}});
  TopologyReport rep = classify_critical(T, 0.01);
  REQUIRE(rep.concave.size() == 1);
  CHECK(rep.concave[0] == 0);
  CHECK(rep.acute.size() == 2);  // the outer endpoints of the boundary edges

  const FanDecomposition fd = fan_decomposition(T, rep);
  REQUIRE(fd.fans.size() == 1);
  CHECK(fd.fans[0].members == std::vector<int>{0});
  // chosen edge must be one of the two interior edges at the corner
  const auto& E = T.edges[fd.fans[0].edges[0]];
  CHECK(((E.v[0] == 0 && (E.v[1] == 2 || E.v[1] == 3)) ||
         (E.v[1] == 0 && (E.v[0] == 2 || E.v[0] == 3))));

  // fan system two-way consistency on the concave fan
  std::mt19937 rng(61);
  const int k = 5;
  const PiecewisePoly q5 = random_pressure(T, k - 1, rng);
  BubbleCache cache;
  const FanSystem fs = fan_system(T, fd.fans[0], k, q5, cache, rep.chosen_edge);
  const double scale = fs.M_direct.cwiseAbs().maxCoeff();
  CHECK((fs.M_geom - fs.M_direct).cwiseAbs().maxCoeff() <= 1e-9 * scale);

  // the even-degree corrector covers concave and acute points together
  const TopologyReport full = topology_report(T, 0.01);
  for (int keven : {4, 6}) {
    const PiecewisePoly q = random_pressure(T, keven - 1, rng);
    const PiCrResult r = pi_cr(T, keven, q, full);
    for (double m : r.velocity.divergence(T).elementwise_integral(T))
      CHECK(std::abs(m) <= 1e-10);
    PiecewisePoly resid = q;
    resid -= r.velocity.divergence(T);
    CHECK(sv_membership(T, resid, keven, full).member);
  }

  // odd degrees require the acute extension machinery on this mesh
  const PiecewisePoly qq = random_pressure(T, 4, rng);
  CHECK_THROWS_AS(pi_cr(T, 5, qq, full), PreconditionViolated);
}
