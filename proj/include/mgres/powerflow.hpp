#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <vector>

#include "mgres/scenario.hpp"

namespace mgres {

// Net power injections (MW / MVAr) for every non-slack bus; positive injects
// into the grid, negative withdraws.
struct InjectionSet {
  std::map<int, double> p;
  std::map<int, double> q;
};

// Squared voltages per bus, sending-end line flows and squared currents per
// line (indexed like Network::lines). v at the slack bus is exactly 1.
struct FlowState {
  std::map<int, double> v;
  std::vector<double> p_line;
  std::vector<double> q_line;
  std::vector<double> l_line;
};

// Precomputed tree structure rooted at the slack bus.
struct RadialTopology {
  std::vector<int> order;                    // bus ids, root first (BFS)
  std::map<int, int> parent_line;            // bus id -> incoming line index
  std::map<int, std::vector<int>> child_lines;  // bus id -> outgoing line indices
};

RadialTopology build_topology(const Network& net);

struct DistFlowOptions {
  double tol = 1e-8;
  int max_iter = 200;
};

// Backward/forward sweep from a flat start, iterated to a fixed point of the
// branch-flow equations. Throws NumericalError on non-convergence or voltage
// collapse (negative squared voltage).
FlowState solve_distflow(const Network& net, const InjectionSet& inj,
                         const DistFlowOptions& opts = {});

// Max absolute residual of the four branch-flow equations at the given state;
// power-balance residuals are evaluated at non-slack buses (the slack bus
// absorbs the balance).
double residual(const Network& net, const FlowState& flow, const InjectionSet& inj);

// Slack-bus injection implied by a flow state (sum of outgoing sending-end
// flows); the slack's observation variables.
std::pair<double, double> slack_injection(const Network& net, const FlowState& flow);

// Homogeneous linear system in the total differentials of the branch-flow,
// ESS net-injection, SoC and fuel recursion equations over a window of
// `steps` time steps. Columns cover every differential; the first-step SoC
// and fuel columns are fixed to zero (prescribed by knowledge of the state).
class SensitivitySystem {
 public:
  enum class Var { BusP, BusQ, BusV, LineP, LineQ, LineL, EssCh, EssDis, Soc, Fuel };

  struct Col {
    Var var;
    int id;    // bus id, or line index for Line* vars
    int step;  // 0-based window step
    auto operator<=>(const Col&) const = default;
  };

  int num_rows() const { return static_cast<int>(rows_.size()); }
  int num_cols() const { return static_cast<int>(cols_.size()); }
  int num_fixed_cols() const { return static_cast<int>(fixed_zero_.size()); }
  int num_action_cols() const { return static_cast<int>(action_cols_.size()); }
  int steps() const { return steps_; }

  // Free columns in the Lemma-style count: all columns minus the prescribed
  // zeros minus all-but-one action differential.
  int free_cols_minus_rows() const {
    return num_cols() - num_fixed_cols() - (num_action_cols() - 1) - num_rows();
  }

  int col_index(Var v, int id, int step) const;
  const std::vector<int>& action_cols() const { return action_cols_; }
  bool is_action_col(int c) const;
  bool is_fixed_col(int c) const;

  // Solve-time coupling of load P and Q differentials. None keeps the
  // homogeneous system as built (plus normalisation and slack-voltage pins);
  // PowerFactor adds the pickup ties Q~ dP - P~ dQ = 0 (zero-demand loads
  // pinned), which expose the reactive-power channel to the policy gradient.
  enum class TieMode { None, PowerFactor };

  // Load-bus real-power differentials dP_{i,k} w.r.t. every action
  // differential. Row r of the result corresponds to loads[r] = (bus, step);
  // column j to action_cols()[j]. Solved by minimum-norm least squares with
  // the normalisation row d(action_j) = 1 and the slack-voltage pins
  // dv_slack = 0 appended. In TieMode::None an inconsistent normalised system
  // (the action variable cannot move independently) throws NumericalError;
  // with ties the least-squares direction is returned as is.
  Eigen::MatrixXd load_partials(const std::vector<std::pair<int, int>>& loads,
                                TieMode ties = TieMode::None) const;

 private:
  friend SensitivitySystem build_sensitivity_system(const Network&, const Scenario&,
                                                    const std::vector<FlowState>&, int, int);
  struct Entry {
    int col;
    double coeff;
  };
  std::vector<std::vector<Entry>> rows_;
  std::vector<Col> cols_;
  std::map<Col, int> col_index_;
  std::vector<int> fixed_zero_;
  std::vector<int> action_cols_;
  std::vector<int> slack_v_cols_;
  std::map<std::pair<int, int>, std::pair<double, double>> demand_;  // (bus, step) -> (P~, Q~)
  int steps_ = 0;
};

// Builds the differential system over `steps` window steps; flows[k] supplies
// the observation variables (v, l, P, Q) at window step k and must cover all
// steps. Action columns follow the CMDP flattening order (per step: RES P,Q;
// MT P,Q; ESS ch,dis,Q; buses ascending). t_abs maps window step 0 to an
// absolute scenario step (for the load demand values behind the solve-time
// power-factor ties).
SensitivitySystem build_sensitivity_system(const Network& net, const Scenario& s,
                                           const std::vector<FlowState>& flows, int steps,
                                           int t_abs = 1);

// Derivative of one load-bus real power w.r.t. one action differential.
double partial_load_wrt_action(const SensitivitySystem& sys, std::pair<int, int> load_var,
                               int action_col);

}  // namespace mgres
