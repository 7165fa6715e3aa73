#pragma once

#include <vector>

#include "mgres/common.hpp"

namespace mgres {

// One side of the polygon approximating y = x^2 from below: y >= gamma*x + psi.
struct PolygonSide {
  double gamma = 0.0;
  double psi = 0.0;
  double eval(double x) const { return gamma * x + psi; }
};

struct PolygonApprox {
  std::vector<PolygonSide> sides;
  double range_bound = 0.0;

  double max_side(double x) const;  // pointwise maximum of all sides at x
};

// Tangents to y = x^2 at num_sides breakpoints equally spaced over
// [-range_bound, range_bound]; each side under-approximates the square and is
// exact at its breakpoint. Max gap over the range is (spacing/2)^2.
PolygonApprox build_polygon(int num_sides, double range_bound);

// A linear inequality l >= p_coeff*P + q_coeff*Q + rhs on one line/step.
struct PolygonRow {
  double p_coeff = 0.0;
  double q_coeff = 0.0;
  double rhs = 0.0;
};

// Rows bounding l from below by the two-term polygon sum. With independent
// side indices (default) this is the cartesian pairing, |C|^2 rows; with
// shared_index the paper's single-index reading, |C| rows.
std::vector<PolygonRow> polygon_constraints(const PolygonApprox& approx,
                                            bool shared_index = false);

struct EssHull {
  double p_ch_max = 0.0;
  double p_dis_max = 0.0;
};

// Membership in the convex hull of the complementarity-constrained charge /
// discharge region: p_ch >= 0, p_dis >= 0, p_ch/max + p_dis/max <= 1 (+1e-12).
bool hull_contains(const EssHull& hull, double p_ch, double p_dis);

// Product p_ch * p_dis; zero means the complementarity constraint holds.
double cc_violation(double p_ch, double p_dis);

}  // namespace mgres
