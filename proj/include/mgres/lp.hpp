#pragma once

#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "mgres/common.hpp"

namespace mgres {

constexpr double kInf = std::numeric_limits<double>::infinity();

enum class Relation { LessEqual, Equal, GreaterEqual };

enum class LpStatus { Optimal, Infeasible, Unbounded };

// Bounded-variable linear program, sense = maximize. Rows reference variables
// by index; bounds may be infinite on either side.
class LpProblem {
 public:
  struct Row {
    std::vector<std::pair<int, double>> coeffs;
    Relation rel = Relation::LessEqual;
    double rhs = 0.0;
    std::string name;
  };

  int add_variable(std::string name, double lower, double upper);
  void set_objective(int var, double coeff);
  int add_row(std::vector<std::pair<int, double>> coeffs, Relation rel, double rhs,
              std::string name = "");

  int num_variables() const { return static_cast<int>(lower_.size()); }
  int num_rows() const { return static_cast<int>(rows_.size()); }

  const std::string& variable_name(int j) const { return names_[j]; }
  double lower(int j) const { return lower_[j]; }
  double upper(int j) const { return upper_[j]; }
  double objective(int j) const { return obj_[j]; }
  const Row& row(int i) const { return rows_[i]; }

  // Throws ConfigError on undeclared variables or inverted bounds.
  void check() const;

 private:
  std::vector<std::string> names_;
  std::vector<double> lower_, upper_, obj_;
  std::vector<Row> rows_;
};

struct LpSolution {
  LpStatus status = LpStatus::Infeasible;
  std::vector<double> values;       // per variable, when Optimal
  double objective_value = 0.0;
  std::vector<double> duals;          // per row (y), when Optimal
  std::vector<double> reduced_costs;  // per variable, when Optimal
  int iterations = 0;

  double value(int var) const { return values.at(var); }
};

// Revised simplex with bounded variables, dense basis inverse, Dantzig
// pricing falling back to Bland's rule on degenerate streaks (termination +
// determinism). Tolerances: pivot 1e-10, feasibility 1e-9, optimality 1e-9.
LpSolution solve_lp(const LpProblem& p);

// Maximum violation of rows and bounds at the given point; used as an
// independent feasibility certificate in tests.
double lp_feasibility_error(const LpProblem& p, const std::vector<double>& x);

// Dual objective value from (duals, reduced costs); equals the primal
// objective at optimality (weak-duality certificate).
double lp_dual_objective(const LpProblem& p, const LpSolution& sol);

// Text dump in the CPLEX LP interchange format (debug aid).
void write_lp_format(const LpProblem& p, std::ostream& os);

}  // namespace mgres
