#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "crstokes/mesh.hpp"

using namespace crstokes;

namespace {

Triangulation two_triangle_square() {
  return validate({{0, 0}, {1, 0}, {0, 1}, {1, 1}}, {{0, 1, 3}, {0, 3, 2}});
}

// crisscross(1) with one triangle glued below the bottom boundary edge
Triangulation crisscross_plus_glued() {
  Triangulation cc = crisscross(1);
  std::vector<Vec2> vs = cc.vertices;
  vs.emplace_back(0.5, -0.5);
  std::vector<std::array<int, 3>> ts(cc.triangles);
  ts.push_back({0, static_cast<int>(vs.size()) - 1, 1});
  return validate(std::move(vs), std::move(ts));
}

// two nearly-flat boundary points sharing one non-critical apex below
Triangulation double_flat_patch(double d0 = 0.005, double d1 = 0.004) {
  std::vector<Vec2> vs = {{-2.0, d0}, {-1.0, 0.0}, {0.0, 0.0}, {1.0, d1}, {-0.5, -1.0}};
  // boundary polyline 0-1-2-3 on top, apex 4 below
  std::vector<std::array<int, 3>> ts = {{0, 4, 1}, {1, 4, 2}, {2, 4, 3}};
  return validate(std::move(vs), std::move(ts));
}

}  // namespace

TEST_CASE("validate: unit square with one diagonal") {
  const Triangulation T = two_triangle_square();
  CHECK(T.triangles.size() == 2);
  CHECK(T.edges.size() == 5);
  int interior = 0;
  for (const auto& e : T.edges) interior += e.boundary ? 0 : 1;
  CHECK(interior == 1);
}

TEST_CASE("validate: hanging node is rejected") {
  // split one of the two triangles along the diagonal midpoint
  std::vector<Vec2> vs = {{0, 0}, {1, 0}, {0, 1}, {1, 1}, {0.5, 0.5}};
  std::vector<std::array<int, 3>> ts = {{0, 1, 3}, {0, 4, 2}, {4, 3, 2}};
  CHECK_THROWS_AS(validate(std::move(vs), std::move(ts)), NonConforming);
}

TEST_CASE("validate: overlapping triangles are rejected") {
  std::vector<Vec2> vs = {{0, 0}, {1, 0}, {0, 1}, {0.4, 0.4}, {1.4, 0.4}, {0.4, 1.4}};
  std::vector<std::array<int, 3>> ts = {{0, 1, 2}, {3, 4, 5}};
  CHECK_THROWS_AS(validate(std::move(vs), std::move(ts)), NonConforming);
}

TEST_CASE("validate: orientation handling") {
  std::vector<Vec2> vs = {{0, 0}, {1, 0}, {0, 1}};
  std::vector<std::array<int, 3>> cw = {{0, 2, 1}};
  CHECK_THROWS_AS(validate(vs, cw), BadOrientation);
  ValidateOptions opts;
  opts.fix_orientation = true;
  const Triangulation T = validate(vs, cw, opts);
  CHECK(T.area[0] == Catch::Approx(0.5));
}

TEST_CASE("validate: degenerate triangle is rejected") {
  std::vector<Vec2> vs = {{0, 0}, {1, 0}, {2, 0}};
  std::vector<std::array<int, 3>> ts = {{0, 1, 2}};
  CHECK_THROWS_AS(validate(std::move(vs), std::move(ts)), DegenerateTriangle);
}

TEST_CASE("crisscross(1) counts and edge derivation identity") {
  const Triangulation T = crisscross(1);
  CHECK(T.triangles.size() == 4);
  CHECK(T.edges.size() == 8);
  int interior_edges = 0, interior_vertices = 0;
  for (const auto& e : T.edges) interior_edges += e.boundary ? 0 : 1;
  for (int v = 0; v < 5; ++v) interior_vertices += T.vertex_on_boundary[v] ? 0 : 1;
  CHECK(interior_edges == 4);
  CHECK(interior_vertices == 1);
  // sum over triangles of 3 edges = 2 * interior + boundary
  const int boundary_edges = static_cast<int>(T.edges.size()) - interior_edges;
  CHECK(3 * static_cast<int>(T.triangles.size()) == 2 * interior_edges + boundary_edges);
}

TEST_CASE("shape_report on reference meshes") {
  const Triangulation single = validate({{0, 0}, {1, 0}, {0, 1}}, {{0, 1, 2}});
  CHECK(shape_report(single).phi == Catch::Approx(M_PI / 4).epsilon(1e-13));

  const Triangulation cc = crisscross(1);
  const ShapeReport rc = shape_report(cc);
  CHECK(rc.phi == Catch::Approx(M_PI / 4).epsilon(1e-13));
  const int center = 4;
  for (int t : cc.vertex_tris[center])
    CHECK(cc.angle_at(t, center) == Catch::Approx(M_PI / 2).epsilon(1e-13));

  const Triangulation eq =
      validate({{0, 0}, {1, 0}, {0.5, std::sqrt(3.0) / 2}}, {{0, 1, 2}});
  CHECK(shape_report(eq).gamma == Catch::Approx(std::sqrt(3.0)).epsilon(1e-12));
}

TEST_CASE("theta on reference configurations") {
  const Triangulation cc = crisscross(1);
  CHECK(theta(cc, 4) <= 1e-12);  // center: all angles pi/2

  const Triangulation single = validate({{0, 0}, {1, 0}, {0, 1}}, {{0, 1, 2}});
  for (int v = 0; v < 3; ++v) CHECK(theta(single, v) == 0.0);

  const Triangulation p = perturb(cc, 4, Vec2(0.01, 0.0));
  CHECK(theta(p, 4) > 1e-3);
}

TEST_CASE("perturbed crisscross: theta at center decreases monotonically with eps") {
  const Triangulation cc = crisscross(1);
  double prev = 2.0;
  for (double eps : {0.1, 0.01, 0.001}) {
    const double th = theta(perturb(cc, 4, Vec2(eps, 0.0)), 4);
    CHECK(th > 0.0);
    CHECK(th < prev);
    prev = th;
  }
}

TEST_CASE("eta0 piecewise formula") {
  CHECK(eta0(M_PI / 4) == Catch::Approx(0.5).epsilon(1e-13));
  CHECK(eta0(M_PI / 8) == Catch::Approx(3.0 / 8.0).epsilon(1e-13));
  CHECK(eta0(M_PI / 3) == Catch::Approx(0.5).epsilon(1e-13));
  CHECK_THROWS_AS(eta0(0.0), std::invalid_argument);
}

TEST_CASE("classify_critical on the reference meshes") {
  const Triangulation cc = crisscross(1);
  const TopologyReport r = classify_critical(cc, 0.01);
  REQUIRE(r.inner.size() == 1);
  CHECK(r.inner[0] == 4);
  CHECK(r.acute.empty());

  const Triangulation single = validate({{0, 0}, {1, 0}, {0, 1}}, {{0, 1, 2}});
  const TopologyReport rs = classify_critical(single, 0.01);
  CHECK(rs.acute.size() == 3);
  CHECK(rs.inner.empty());

  // square split by one diagonal: diagonal endpoints have Theta = |sin(pi/2)| = 1,
  // the other two corners are acute critical
  const Triangulation sq = two_triangle_square();
  const TopologyReport rq = classify_critical(sq, 0.01);
  CHECK(rq.flat.empty());
  CHECK(rq.concave.empty());
  CHECK(rq.acute.size() == 2);
  CHECK(rq.theta[0] == Catch::Approx(1.0).epsilon(1e-12));
  CHECK(rq.theta[3] == Catch::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS(classify_critical(cc, 0.9), EtaTooLarge);
}

TEST_CASE("eta-monotonicity of the critical set") {
  const Triangulation T = perturb(crisscross(2), 4, Vec2(0.002, 0.001));
  const TopologyReport a = classify_critical(T, 0.001);
  const TopologyReport b = classify_critical(T, 0.05);
  for (const auto& [z, kind] : a.critical) {
    CHECK(b.critical.count(z) == 1);
    (void)kind;
  }
}

TEST_CASE("no interior edge joins two eta-critical vertices (eta < eta0)") {
  for (const Triangulation& T :
       {crisscross(2), diagonal_square(2), double_flat_patch(), crisscross_plus_glued()}) {
    const ShapeReport sr = shape_report(T);
    const double eta = 0.9 * eta0(sr.phi);
    const TopologyReport r = classify_critical(T, eta);
    for (const auto& e : T.edges) {
      if (e.boundary) continue;
      CHECK(!(r.critical.count(e.v[0]) && r.critical.count(e.v[1])));
    }
  }
}

TEST_CASE("fan_decomposition on crisscross(1)") {
  const Triangulation cc = crisscross(1);
  TopologyReport r = classify_critical(cc, 0.01);
  const FanDecomposition fd = fan_decomposition(cc, r);
  REQUIRE(fd.fans.size() == 1);
  const Fan& f = fd.fans[0];
  REQUIRE(f.members.size() == 1);
  CHECK(f.members[0] == 4);
  CHECK(f.apex == 0);  // all corners tie at Theta = 1; lowest index wins
  CHECK(f.tris.size() == 2);
  // chosen edge runs from the center to the apex
  const auto& E = cc.edges[f.edges[0]];
  CHECK(((E.v[0] == 0 && E.v[1] == 4) || (E.v[0] == 4 && E.v[1] == 0)));
}

TEST_CASE("fan_decomposition: empty when no obtuse critical points") {
  const Triangulation T = perturb(crisscross(1), 4, Vec2(0.05, 0.02));
  TopologyReport r = classify_critical(T, 0.001);
  const FanDecomposition fd = fan_decomposition(T, r);
  CHECK(fd.fans.empty());
}

TEST_CASE("fan_decomposition groups two flat points into one fan") {
  const Triangulation T = double_flat_patch();
  const ShapeReport sr = shape_report(T);
  REQUIRE(eta0(sr.phi) > 0.01);
  TopologyReport r = classify_critical(T, 0.01);
  REQUIRE(r.flat.size() == 2);
  const FanDecomposition fd = fan_decomposition(T, r);
  REQUIRE(fd.fans.size() == 1);
  const Fan& f = fd.fans[0];
  CHECK(f.apex == 4);
  CHECK(f.members.size() == 2);
  CHECK(f.tris.size() == 3);
  // members ordered counterclockwise around the apex and edge-connected
  CHECK(T.edge_between(f.members[0], f.members[1]) >= 0);
}

TEST_CASE("fan supports have pairwise disjoint interiors") {
  const Triangulation T = double_flat_patch();
  TopologyReport r = classify_critical(T, 0.01);
  const FanDecomposition fd = fan_decomposition(T, r);
  std::vector<std::set<int>> supports;
  for (const Fan& f : fd.fans) {
    std::set<int> tris;
    for (int e : f.edges)
      for (int t : {T.edges[e].tri[0], T.edges[e].tri[1]})
        if (t >= 0) tris.insert(t);
    supports.push_back(std::move(tris));
  }
  for (std::size_t a = 0; a < supports.size(); ++a)
    for (std::size_t b = a + 1; b < supports.size(); ++b)
      for (int t : supports[a]) CHECK(supports[b].count(t) == 0);
}

TEST_CASE("extension_sequence") {
  auto [L0, layers0] = extension_sequence(crisscross(1));
  CHECK(L0 == 0);
  CHECK(layers0.back().size() == 4);

  auto [L1, layers1] = extension_sequence(crisscross_plus_glued());
  CHECK(L1 == 1);
  CHECK(layers1.front().size() == 4);
  CHECK(layers1.back().size() == 5);

  const Triangulation single = validate({{0, 0}, {1, 0}, {0, 1}}, {{0, 1, 2}});
  CHECK_THROWS_AS(extension_sequence(single), NoInnerVertex);
}

TEST_CASE("generators") {
  CHECK(crisscross(1).triangles.size() == 4);
  CHECK(crisscross(2).triangles.size() == 16);
  CHECK(diagonal_square(3).triangles.size() == 18);

  const Triangulation fp = fan_patch({M_PI / 2, M_PI / 2, M_PI / 2, M_PI / 2});
  CHECK(fp.triangles.size() == 4);
  CHECK_FALSE(fp.vertex_on_boundary[0]);
  CHECK(theta(fp, 0) <= 1e-12);

  const Triangulation half = fan_patch({M_PI / 3, M_PI / 3});
  CHECK(half.vertex_on_boundary[0]);

  CHECK_THROWS_AS(fan_patch({-1.0}), InvalidAngles);
  CHECK_THROWS_AS(fan_patch({3.0, 3.0, 3.0}), InvalidAngles);
}

TEST_CASE("brute-force collinearity oracle agrees with Theta = 0 classification") {
  auto critical_by_lines = [](const Triangulation& T, int z) {
    // z is critical iff all incident edges lie on at most two lines
    std::vector<Vec2> dirs;
    for (int e : T.vertex_edges[z]) {
      const int o = T.edges[e].v[0] == z ? T.edges[e].v[1] : T.edges[e].v[0];
      dirs.push_back((T.vertices[o] - T.vertices[z]).normalized());
    }
    std::vector<Vec2> lines;
    for (const Vec2& d : dirs) {
      bool found = false;
      for (const Vec2& l : lines)
        if (std::abs(cross2(d, l)) <= 1e-9) found = true;
      if (!found) lines.push_back(d);
    }
    return lines.size() <= 2;
  };

  std::mt19937 rng(1234);
  std::uniform_real_distribution<double> u(-0.03, 0.03);
  int meshes = 0;
  for (int trial = 0; meshes < 20 && trial < 200; ++trial) {
    Triangulation T = (trial % 3 == 0)   ? crisscross(1 + trial % 2)
                      : (trial % 3 == 1) ? diagonal_square(1 + trial % 2)
                                         : double_flat_patch(u(rng), u(rng));
    if (trial % 2 == 0 && trial % 3 != 2) {
      const int v = trial % static_cast<int>(T.vertices.size());
      try {
        T = perturb(T, v, Vec2(u(rng), u(rng)));
      } catch (const std::exception&) {
        continue;
      }
    }
    ++meshes;
    const TopologyReport r = classify_critical(T, 0.0);
    for (int z = 0; z < static_cast<int>(T.vertices.size()); ++z) {
      const bool oracle = critical_by_lines(T, z);
      const bool ours = r.critical.count(z) > 0;
      INFO("mesh trial " << trial << " vertex " << z);
      CHECK(oracle == ours);
    }
  }
  CHECK(meshes == 20);
}

TEST_CASE("mesh text format round trip and parse errors") {
  const Triangulation T = crisscross(1);
  std::ostringstream out;
  save_mesh(T, out);
  std::istringstream in(out.str());
  const Triangulation U = parse_mesh(in);
  CHECK(U.triangles.size() == T.triangles.size());
  CHECK(U.edges.size() == T.edges.size());

  std::istringstream bad("v 0 0\nv 1 0\nv 0 1\nt 0 1\n");
  try {
    parse_mesh(bad);
    FAIL("expected MeshParseError");
  } catch (const MeshParseError& err) {
    CHECK(std::string(err.what()).find("line 4") != std::string::npos);
  }

  std::istringstream cmt("# header\nv 0 0\nv 1 0\nv 0 1\nt 0 1 2  # tri\n");
  CHECK(parse_mesh(cmt).triangles.size() == 1);
}

TEST_CASE("topology_report bundles classification, fans and extension") {
  const TopologyReport r = topology_report(crisscross(1), 0.01);
  CHECK(r.extension_L == 0);
  CHECK(r.fans.fans.size() == 1);
  CHECK(r.inner.size() == 1);
}

TEST_CASE("validate: an edge shared by three triangles is rejected") {
  std::vector<Vec2> vs = {{0, 0}, {1, 0}, {0, 1}, {0, -1}, {1, 1}};
  std::vector<std::array<int, 3>> ts = {{0, 1, 2}, {0, 3, 1}, {0, 1, 4}};
  CHECK_THROWS_AS(validate(std::move(vs), std::move(ts)), NonConforming);
}
