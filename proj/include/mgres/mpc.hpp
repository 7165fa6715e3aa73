#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mgres/cmdp.hpp"
#include "mgres/lp.hpp"
#include "mgres/powerflow.hpp"
#include "mgres/scenario.hpp"

namespace mgres {

// Index bookkeeping for the receding-horizon LP. Keys are (absolute step,
// bus id) or (absolute step, line index).
struct MpcLp {
  LpProblem lp;
  int t_begin = 0;
  int t_end = 0;  // inclusive; window clipped at the horizon
  std::map<std::pair<int, int>, int> rho, kappa, res_q, mt_p, mt_q, ess_ch, ess_dis, ess_q, soc,
      fuel, v;
  std::map<std::pair<int, int>, int> line_p, line_q, line_l;
  std::map<int, int> fuel_trail;             // MT bus -> post-window fuel stock
  std::map<int, int> soc_trail;              // ESS bus -> post-window SoC (only while within T)
};

// Assembles the relaxed window LP at step t: linearised branch flow, voltage
// and current limits, MT bounds/ramp/fuel recursion, ESS hull + SoC
// evolution, RES curtailment, load pickup with the almost-monotonic floor,
// slack voltage pin, polygon rows, and the window objective. State maps must
// cover every MT/ESS/load bus; res_fc supplies the forecast realization for
// steps t..t_end.
MpcLp build_mpc_lp(const Scenario& s, const std::map<int, double>& soc,
                   const std::map<int, double>& fuel, const std::map<int, double>& prev_power,
                   const std::map<int, double>& prev_pickup, int t,
                   const EpisodeForecast& res_fc);

struct MpcStepRecord {
  int t = 0;
  std::map<int, double> pickup;
  std::map<int, double> mt_p, mt_q;
  std::map<int, double> ess_ch, ess_dis, ess_q;
  std::map<int, double> res_p, res_q;
  std::map<int, double> soc;   // start-of-step stock
  std::map<int, double> fuel;
  FlowState flow;              // exact re-solve at the applied injections
  double objective_contrib = 0.0;  // undiscounted single-step objective
  double cc_product_max = 0.0;
  double flow_gap = 0.0;       // max |LP minus exact| over v and l
  double solve_seconds = 0.0;  // diagnostic only; never serialized
};

struct RestorationLog {
  std::vector<MpcStepRecord> steps;
};

struct MpcRunOptions {
  std::optional<std::string> dump_lp_dir;  // write per-step LP text dumps
};

// Receding-horizon loop: for t = 1..T build the window LP, apply the first
// input, advance fuel/SoC by the recursion equations with the applied powers,
// and recompute the realized flows exactly. Throws InfeasibleError (with the
// step index) if a window LP is infeasible.
RestorationLog run_mpc(const Scenario& s, const EpisodeForecast& res_fc,
                       const MpcRunOptions& opts = {});

// Episode forecast stream shared by MPC and CPO evaluation runs; episode 0 is
// the comparison realization.
EpisodeForecast episode_forecast_for(const Scenario& s, int episode_index);

}  // namespace mgres
