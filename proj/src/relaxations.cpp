#include "mgres/relaxations.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mgres {

double PolygonApprox::max_side(double x) const {
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& s : sides) m = std::max(m, s.eval(x));
  return m;
}

PolygonApprox build_polygon(int num_sides, double range_bound) {
  if (num_sides < 1) throw ConfigError("polygon needs at least one side");
  if (range_bound <= 0) throw ConfigError("polygon range bound must be positive");
  PolygonApprox out;
  out.range_bound = range_bound;
  out.sides.reserve(num_sides);
  for (int c = 0; c < num_sides; ++c) {
    double xc = num_sides == 1
                    ? 0.0
                    : -range_bound + 2.0 * range_bound * c / (num_sides - 1);
    // Tangent at xc: y = 2*xc*x - xc^2.
    out.sides.push_back(PolygonSide{2.0 * xc, -xc * xc});
  }
  return out;
}

std::vector<PolygonRow> polygon_constraints(const PolygonApprox& approx, bool shared_index) {
  std::vector<PolygonRow> rows;
  const auto& s = approx.sides;
  if (shared_index) {
    rows.reserve(s.size());
    for (const auto& c : s) rows.push_back(PolygonRow{c.gamma, c.gamma, 2.0 * c.psi});
  } else {
    rows.reserve(s.size() * s.size());
    for (const auto& c : s)
      for (const auto& cq : s) rows.push_back(PolygonRow{c.gamma, cq.gamma, c.psi + cq.psi});
  }
  return rows;
}

bool hull_contains(const EssHull& hull, double p_ch, double p_dis) {
  if (p_ch < 0.0 || p_dis < 0.0) return false;
  return p_ch / hull.p_ch_max + p_dis / hull.p_dis_max <= 1.0 + 1e-12;
}

double cc_violation(double p_ch, double p_dis) { return p_ch * p_dis; }

}  // namespace mgres
