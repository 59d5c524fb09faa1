#ifndef CRSTOKES_REPORT_JSON_HPP
#define CRSTOKES_REPORT_JSON_HPP

#include <json.hpp>

#include "crstokes/mesh.hpp"
#include "crstokes/rightinverse.hpp"

namespace crstokes {

inline nlohmann::json to_json(const TopologyReport& r) {
  nlohmann::json j;
  j["eta"] = r.eta;
  j["theta"] = r.theta;
  j["theta_min"] = r.theta_min;
  nlohmann::json classes;
  classes["inner"] = r.inner;
  classes["acute"] = r.acute;
  classes["flat"] = r.flat;
  classes["concave"] = r.concave;
  j["classes"] = classes;
  nlohmann::json fans = nlohmann::json::array();
  for (const Fan& f : r.fans.fans) {
    nlohmann::json jf;
    jf["apex"] = f.apex;
    jf["members"] = f.members;
    jf["edges"] = f.edges;
    nlohmann::json normals = nlohmann::json::array();
    for (const Vec2& n : f.normals) normals.push_back({n.x(), n.y()});
    jf["normals"] = normals;
    jf["triangles"] = f.tris;
    fans.push_back(jf);
  }
  j["fans"] = fans;
  j["extension_L"] = r.extension_L;
  return j;
}

/// Per-run report of the divergence corrector: fan solutions, divergence-mean
/// and membership residuals, and the measured norms.
inline nlohmann::json pi_cr_report(const Triangulation& T, int k, const PiecewisePoly& q,
                                   const TopologyReport& rep, const PiCrResult& r) {
  nlohmann::json j;
  j["k"] = k;
  nlohmann::json fans = nlohmann::json::array();
  for (std::size_t f = 0; f < r.fans.size(); ++f) {
    const FanSystem& fs = r.fans[f];
    const Fan& fan = rep.fans.fans[f];
    nlohmann::json jf;
    jf["apex"] = fan.apex;
    jf["members"] = fan.members;
    jf["alpha"] = std::vector<double>(fs.alpha.data(), fs.alpha.data() + fs.alpha.size());
    jf["rhs"] = std::vector<double>(fs.r.data(), fs.r.data() + fs.r.size());
    jf["detT"] = fs.detT;
    const double scale = std::max(1e-300, fs.M_direct.cwiseAbs().maxCoeff());
    jf["matrix_consistency_gap"] = (fs.M_geom - fs.M_direct).cwiseAbs().maxCoeff() / scale;
    fans.push_back(jf);
  }
  j["fans"] = fans;

  PiecewisePoly dv = r.velocity.divergence(T);
  double worst_mean = 0.0;
  for (double m : dv.elementwise_integral(T)) worst_mean = std::max(worst_mean, std::abs(m));
  PiecewisePoly resid = q;
  resid -= dv;
  const SvMembership sv = sv_membership(T, resid, k, rep);
  nlohmann::json res;
  res["worst_divergence_mean"] = worst_mean;
  nlohmann::json per_vertex;
  for (const auto& [z, a] : sv.residuals) per_vertex[std::to_string(z)] = a;
  res["sv_functionals"] = per_vertex;
  res["sv_member"] = sv.member;
  res["cr_expansion"] = r.expansion_residual;
  j["residuals"] = res;

  nlohmann::json norms;
  norms["grad_v"] = r.grad_norm;
  norms["q_l2"] = std::sqrt(const_cast<PiecewisePoly&>(q).l2_norm_sq(T));
  norms["grad_v_over_sqrt_log"] = r.grad_norm / std::sqrt(std::log(k + 1.0));
  j["norms"] = norms;
  return j;
}

}  // namespace crstokes

#endif
