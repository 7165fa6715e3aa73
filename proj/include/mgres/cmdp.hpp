#pragma once

#include <Eigen/Dense>
#include <map>
#include <vector>

#include "mgres/powerflow.hpp"
#include "mgres/scenario.hpp"

namespace mgres {

// Flattening of the action vector. Per window step k = 0..H (H = lookahead),
// buses ascending within each family:
//   [RES: P, Q] [MT: P, Q] [ESS: p_ch, p_dis, Q]
// The policy's output indexing and the sensitivity system's action columns
// both follow this order; it must not change.
class ActionLayout {
 public:
  ActionLayout(const Network& net, int lookahead);

  int lookahead() const { return lookahead_; }
  int window() const { return lookahead_ + 1; }
  int per_step() const { return per_step_; }
  int dim() const { return per_step_ * window(); }

  const std::vector<int>& res_buses() const { return res_; }
  const std::vector<int>& mt_buses() const { return mt_; }
  const std::vector<int>& ess_buses() const { return ess_; }

  int res_p(int k, int pos) const { return k * per_step_ + 2 * pos; }
  int res_q(int k, int pos) const { return res_p(k, pos) + 1; }
  int mt_p(int k, int pos) const { return k * per_step_ + 2 * nres() + 2 * pos; }
  int mt_q(int k, int pos) const { return mt_p(k, pos) + 1; }
  int ess_ch(int k, int pos) const { return k * per_step_ + 2 * (nres() + nmt()) + 3 * pos; }
  int ess_dis(int k, int pos) const { return ess_ch(k, pos) + 1; }
  int ess_q(int k, int pos) const { return ess_ch(k, pos) + 2; }

  int nres() const { return static_cast<int>(res_.size()); }
  int nmt() const { return static_cast<int>(mt_.size()); }
  int ness() const { return static_cast<int>(ess_.size()); }

 private:
  std::vector<int> res_, mt_, ess_;
  int lookahead_ = 0;
  int per_step_ = 0;
};

using ActionVector = Eigen::VectorXd;

// CMDP state preceding the action at step t: previous-step stocks and
// pickups, previous MT power, and the forecast window [t, t+H].
struct SystemState {
  int t = 1;
  std::map<int, double> soc;       // ESS bus -> MWh
  std::map<int, double> fuel;      // MT bus -> fuel units
  std::map<int, double> pickup;    // load bus -> [0, 1]
  std::map<int, double> mt_power;  // MT bus -> MW applied at t-1
  std::map<int, std::vector<double>> load_p_fc;  // load bus -> window series
  std::map<int, std::vector<double>> load_q_fc;
  std::map<int, std::vector<double>> res_fc;     // RES bus -> window series
};

// RES realization for a whole episode (steps 1..T+H), sampled once and shared
// between controllers under comparison.
using EpisodeForecast = std::map<int, std::vector<double>>;

EpisodeForecast make_episode_forecast(const Scenario& s, Rng& rng);

SystemState initial_state(const Scenario& s, const EpisodeForecast& fc);

// Flat encoding of SystemState for the policy network: stocks, pickups,
// previous MT power, then the forecast window step by step.
int state_dim(const Scenario& s);
Eigen::VectorXd state_vector(const Scenario& s, const SystemState& st);

struct WindowStepOutcome {
  std::map<int, double> pickups;
  bool feasible = true;
  FlowState flow;  // exact branch-flow re-solve at the applied injections
};

// Deterministic completion of one window step: generation injections fixed
// from the action, pickups chosen by the inner LP (priority-weighted maximal
// restoration subject to the linearised network constraints and the
// almost-monotonic rule), then an exact power-flow re-solve for the
// observation variables. An infeasible inner LP degrades to zero pickup.
WindowStepOutcome complete_step(const Scenario& s, const ActionLayout& lay,
                                const ActionVector& a, int k, int abs_step,
                                const std::map<int, double>& pickup_anchor,
                                const std::map<int, std::vector<double>>& res_window);

// Runs complete_step over the whole window [t, t+H], chaining pickup anchors.
std::vector<WindowStepOutcome> window_rollout(const Scenario& s, const SystemState& st,
                                              const ActionVector& a);

struct TransitionResult {
  SystemState next;
  FlowState flow;
  std::map<int, double> pickups;
  bool lp_feasible = true;
  bool clamped = false;  // SoC/fuel hit a bound and was clamped
};

// One environment step. The first window step of the action is applied;
// stocks advance by the recursion equations; the forecast window rolls
// forward, revealing one new RES value (from `cached` when supplied, else a
// fresh truncated-Gaussian draw from rng).
TransitionResult transition(const Scenario& s, const SystemState& st, const ActionVector& a,
                            Rng& rng, const EpisodeForecast* cached = nullptr);

// Discounted window objective: restored load value minus generation cost,
// future steps evaluated from the forecast-based completions.
double reward(const Scenario& s, const SystemState& st, const ActionVector& a,
              const std::vector<WindowStepOutcome>& outcomes, double gamma);

// Constraint function C(s, a) <= 0. Fixed ordering, per window step:
//   MT (bus asc):  P-p_max, p_min-P, ramp-up, ramp-down, fuel prefix,
//                  Q-q_max, -Q-q_max
//   ESS (bus asc): -ch, ch-max, -dis, dis-max, ch*dis (CC),
//                  SoC prefix upper, SoC prefix lower, Q-q_max, -Q-q_max
//   RES (bus asc): -P, P-forecast, Q-q_max, -Q-q_max
int constraint_dim(const Scenario& s);
Eigen::VectorXd constraints(const Scenario& s, const SystemState& st, const ActionVector& a);
// d C / d a, analytic (every entry is a constant or an action variable).
Eigen::MatrixXd constraints_jacobian(const Scenario& s, const SystemState& st,
                                     const ActionVector& a);

// Stateful episode wrapper; one instance must not be advanced concurrently.
class Environment {
 public:
  Environment(Scenario s, const EpisodeForecast& fc);

  const Scenario& scenario() const { return scenario_; }
  const SystemState& state() const { return state_; }
  const EpisodeForecast& forecast() const { return forecast_; }
  bool done() const { return state_.t > scenario_.horizon; }

  TransitionResult step(const ActionVector& a);

 private:
  Scenario scenario_;
  EpisodeForecast forecast_;
  SystemState state_;
  Rng rng_;  // only used when a step runs past the cached series
};

}  // namespace mgres
