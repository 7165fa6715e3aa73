#include <random>

#include "doctest.h"
#include "mgres/lp.hpp"
#include "test_util.hpp"

using namespace mgres;

TEST_CASE("single bounded variable maximizes at its upper bound") {
  LpProblem p;
  int x = p.add_variable("x", 0.0, 1.0);
  p.set_objective(x, 1.0);
  LpSolution s = solve_lp(p);
  REQUIRE(s.status == LpStatus::Optimal);
  CHECK(s.value(x) == doctest::Approx(1.0));
  CHECK(s.objective_value == doctest::Approx(1.0));
}

TEST_CASE("tight simplex face: max x+y s.t. x+y<=1") {
  LpProblem p;
  int x = p.add_variable("x", 0.0, 1.0);
  int y = p.add_variable("y", 0.0, 1.0);
  p.set_objective(x, 1.0);
  p.set_objective(y, 1.0);
  p.add_row({{x, 1.0}, {y, 1.0}}, Relation::LessEqual, 1.0);
  LpSolution s = solve_lp(p);
  REQUIRE(s.status == LpStatus::Optimal);
  CHECK(s.objective_value == doctest::Approx(1.0));
  CHECK(lp_feasibility_error(p, s.values) <= 1e-9);
}

TEST_CASE("infeasible and unbounded problems are flagged exactly") {
  LpProblem p;
  int x = p.add_variable("x", 0.0, kInf);
  int y = p.add_variable("y", 0.0, kInf);
  p.add_row({{x, 1.0}, {y, 1.0}}, Relation::LessEqual, -1.0);
  CHECK(solve_lp(p).status == LpStatus::Infeasible);

  LpProblem q;
  int z = q.add_variable("z", 0.0, kInf);
  q.set_objective(z, 1.0);
  CHECK(solve_lp(q).status == LpStatus::Unbounded);

  LpProblem r;
  int w = r.add_variable("w", -kInf, kInf);
  r.set_objective(w, -1.0);
  r.add_row({{w, 1.0}}, Relation::LessEqual, 5.0);
  CHECK(solve_lp(r).status == LpStatus::Unbounded);
}

TEST_CASE("equality rows and negative bounds") {
  LpProblem p;
  int x = p.add_variable("x", -2.0, 2.0);
  int y = p.add_variable("y", -2.0, 2.0);
  p.set_objective(x, 1.0);
  p.set_objective(y, -1.0);
  p.add_row({{x, 1.0}, {y, 1.0}}, Relation::Equal, 0.5);
  LpSolution s = solve_lp(p);
  REQUIRE(s.status == LpStatus::Optimal);
  // x - y maximal with x + y = 0.5: x = 2, y = -1.5.
  CHECK(s.value(x) == doctest::Approx(2.0));
  CHECK(s.value(y) == doctest::Approx(-1.5));
}

TEST_CASE("malformed problems are rejected") {
  LpProblem p;
  int x = p.add_variable("x", 1.0, 0.0);  // inverted bounds
  p.set_objective(x, 1.0);
  CHECK_THROWS_AS(solve_lp(p), ConfigError);

  LpProblem q;
  q.add_variable("x", 0.0, 1.0);
  q.add_row({{5, 1.0}}, Relation::LessEqual, 1.0);  // undeclared variable
  CHECK_THROWS_AS(solve_lp(q), ConfigError);
}

namespace {

LpProblem random_boxed_lp(Rng& rng) {
  std::uniform_int_distribution<int> nv(2, 6), nr(1, 4), rel(0, 2);
  std::uniform_real_distribution<double> coef(-1.0, 1.0);
  LpProblem p;
  int n = nv(rng);
  for (int j = 0; j < n; ++j) {
    double lo = -1.0 + 0.5 * coef(rng);
    double hi = 1.0 + 0.5 * coef(rng);
    int v = p.add_variable("x" + std::to_string(j), lo, hi);
    p.set_objective(v, coef(rng));
  }
  int m = nr(rng);
  for (int i = 0; i < m; ++i) {
    std::vector<std::pair<int, double>> row;
    for (int j = 0; j < n; ++j)
      if (coef(rng) > -0.3) row.push_back({j, coef(rng)});
    if (row.empty()) row.push_back({0, 1.0});
    p.add_row(std::move(row), static_cast<Relation>(rel(rng)), coef(rng));
  }
  return p;
}

}  // namespace

TEST_CASE("seeded random LPs match the vertex-enumeration oracle") {
  Rng rng(20240601);
  int optimal = 0, infeasible = 0;
  for (int k = 0; k < 100; ++k) {
    LpProblem p = random_boxed_lp(rng);
    auto oracle = testutil::lp_vertex_oracle(p);
    LpSolution s = solve_lp(p);
    if (oracle.feasible) {
      REQUIRE(s.status == LpStatus::Optimal);
      CHECK(std::abs(s.objective_value - oracle.objective) <=
            1e-6 * std::max(1.0, std::abs(oracle.objective)));
      CHECK(lp_feasibility_error(p, s.values) <= 1e-7);
      // Weak-duality certificate.
      CHECK(std::abs(lp_dual_objective(p, s) - s.objective_value) <=
            1e-6 * std::max(1.0, std::abs(s.objective_value)));
      ++optimal;
    } else {
      CHECK(s.status == LpStatus::Infeasible);
      ++infeasible;
    }
  }
  CHECK(optimal > 50);  // the generator mostly produces feasible instances
  CHECK(optimal + infeasible == 100);
}

TEST_CASE("identical problems solve to bit-identical solutions") {
  Rng rng(77);
  for (int k = 0; k < 10; ++k) {
    LpProblem p = random_boxed_lp(rng);
    LpSolution a = solve_lp(p);
    LpSolution b = solve_lp(p);
    REQUIRE(a.status == b.status);
    if (a.status == LpStatus::Optimal) {
      CHECK(a.objective_value == b.objective_value);
      CHECK(a.values == b.values);
    }
  }
}

TEST_CASE("LP text dump emits the interchange format") {
  LpProblem p;
  int x = p.add_variable("x", 0.0, 1.0);
  int y = p.add_variable("y", -kInf, kInf);
  p.set_objective(x, 2.0);
  p.add_row({{x, 1.0}, {y, -1.0}}, Relation::LessEqual, 3.0, "cap");
  std::ostringstream os;
  write_lp_format(p, os);
  std::string text = os.str();
  CHECK(text.find("Maximize") != std::string::npos);
  CHECK(text.find("Subject To") != std::string::npos);
  CHECK(text.find("Bounds") != std::string::npos);
  CHECK(text.find("free") != std::string::npos);
  CHECK(text.find("End") != std::string::npos);
}
