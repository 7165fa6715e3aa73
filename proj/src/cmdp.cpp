#include "mgres/cmdp.hpp"

#include <algorithm>
#include <cmath>

#include "mgres/lp.hpp"
#include "mgres/relaxations.hpp"

namespace mgres {

ActionLayout::ActionLayout(const Network& net, int lookahead) : lookahead_(lookahead) {
  res_ = net.bus_ids_of_kind(BusKind::Renewable);
  mt_ = net.bus_ids_of_kind(BusKind::Microturbine);
  ess_ = net.bus_ids_of_kind(BusKind::Storage);
  per_step_ = 2 * nres() + 2 * nmt() + 3 * ness();
}

EpisodeForecast make_episode_forecast(const Scenario& s, Rng& rng) {
  int len = s.horizon + s.cpo_lookahead;
  auto draws = sample_res_forecast(s, 1, len - 1, rng);  // len values from step 1
  return draws;
}

SystemState initial_state(const Scenario& s, const EpisodeForecast& fc) {
  SystemState st;
  st.t = 1;
  for (const auto& [id, e] : s.ess) st.soc[id] = e.soc_init;
  for (const auto& [id, m] : s.mt) {
    st.fuel[id] = m.fuel_init;
    st.mt_power[id] = 0.0;  // black start
  }
  for (const auto& [id, lp] : s.loads) st.pickup[id] = 0.0;
  int H = s.cpo_lookahead;
  for (const auto& [id, lp] : s.loads) {
    auto& p = st.load_p_fc[id];
    auto& q = st.load_q_fc[id];
    for (int k = 0; k <= H; ++k) {
      p.push_back(s.load_p(id, 1 + k));
      q.push_back(s.load_q(id, 1 + k));
    }
  }
  for (const auto& [id, series] : fc) {
    auto& w = st.res_fc[id];
    for (int k = 0; k <= H; ++k) w.push_back(series.at(k));
  }
  return st;
}

int state_dim(const Scenario& s) {
  int n_l = static_cast<int>(s.loads.size());
  int n_mt = static_cast<int>(s.mt.size());
  int n_ess = static_cast<int>(s.ess.size());
  int n_res = static_cast<int>(s.res.size());
  return n_ess + n_mt + n_l + n_mt + (s.cpo_lookahead + 1) * (2 * n_l + n_res);
}

Eigen::VectorXd state_vector(const Scenario& s, const SystemState& st) {
  Eigen::VectorXd v(state_dim(s));
  int i = 0;
  for (const auto& [id, soc] : st.soc) v[i++] = soc;
  for (const auto& [id, f] : st.fuel) v[i++] = f;
  for (const auto& [id, p] : st.pickup) v[i++] = p;
  for (const auto& [id, p] : st.mt_power) v[i++] = p;
  for (int k = 0; k <= s.cpo_lookahead; ++k) {
    for (const auto& [id, w] : st.load_p_fc) v[i++] = w[k];
    for (const auto& [id, w] : st.load_q_fc) v[i++] = w[k];
    for (const auto& [id, w] : st.res_fc) v[i++] = w[k];
  }
  return v;
}

namespace {

struct StepInjections {
  std::map<int, double> p, q;  // device buses only
};

StepInjections device_injections(const Scenario& s, const ActionLayout& lay,
                                 const ActionVector& a, int k) {
  StepInjections inj;
  for (int i = 0; i < lay.nres(); ++i) {
    inj.p[lay.res_buses()[i]] = a[lay.res_p(k, i)];
    inj.q[lay.res_buses()[i]] = a[lay.res_q(k, i)];
  }
  for (int i = 0; i < lay.nmt(); ++i) {
    inj.p[lay.mt_buses()[i]] = a[lay.mt_p(k, i)];
    inj.q[lay.mt_buses()[i]] = a[lay.mt_q(k, i)];
  }
  for (int i = 0; i < lay.ness(); ++i) {
    inj.p[lay.ess_buses()[i]] = a[lay.ess_dis(k, i)] - a[lay.ess_ch(k, i)];
    inj.q[lay.ess_buses()[i]] = a[lay.ess_q(k, i)];
  }
  return inj;
}

// Priority-weighted maximal pickup subject to the linearised branch-flow
// model, voltage/current limits, the polygon rows and the almost-monotonic
// floor. Generation injections enter as constants.
struct PickupLp {
  bool feasible = false;
  std::map<int, double> rho;
};

PickupLp solve_pickup_lp(const Scenario& s, const StepInjections& gen,
                         const std::map<int, double>& demand_p,
                         const std::map<int, double>& demand_q,
                         const std::map<int, double>& anchor) {
  const Network& net = s.network;
  LpProblem lp;
  std::map<int, int> rho_var, v_var;
  std::vector<int> pl_var(net.lines.size()), ql_var(net.lines.size()), ll_var(net.lines.size());

  for (const auto& [id, lpar] : s.loads) {
    double lo = std::max(0.0, anchor.count(id) ? anchor.at(id) - s.epsilon : 0.0);
    lo = std::min(lo, 1.0);
    rho_var[id] = lp.add_variable("rho_" + std::to_string(id), lo, 1.0);
    lp.set_objective(rho_var[id], lpar.priority * demand_p.at(id));
  }
  for (const auto& b : net.buses) {
    bool slack = b.id == net.slack_bus;
    v_var[b.id] = lp.add_variable("v_" + std::to_string(b.id), slack ? 1.0 : s.v_min,
                                  slack ? 1.0 : s.v_max);
  }
  for (size_t e = 0; e < net.lines.size(); ++e) {
    pl_var[e] = lp.add_variable("P_" + std::to_string(e), -kInf, kInf);
    ql_var[e] = lp.add_variable("Q_" + std::to_string(e), -kInf, kInf);
    ll_var[e] = lp.add_variable("l_" + std::to_string(e), 0.0, net.lines[e].l_max);
  }

  RadialTopology topo = build_topology(net);
  for (const auto& b : net.buses) {
    std::vector<std::pair<int, double>> rp, rq;
    auto cit = topo.child_lines.find(b.id);
    if (cit != topo.child_lines.end()) {
      for (int e : cit->second) {
        rp.push_back({pl_var[e], 1.0});
        rq.push_back({ql_var[e], 1.0});
      }
    }
    auto pit = topo.parent_line.find(b.id);
    if (pit != topo.parent_line.end()) {
      int e = pit->second;
      rp.push_back({pl_var[e], -1.0});
      rp.push_back({ll_var[e], net.lines[e].r});
      rq.push_back({ql_var[e], -1.0});
      rq.push_back({ll_var[e], net.lines[e].x});
    }
    double rhs_p = 0.0, rhs_q = 0.0;
    if (s.loads.count(b.id)) {
      // injection = -rho * demand, moved onto the flow side of the equality
      rp.push_back({rho_var[b.id], demand_p.at(b.id)});
      rq.push_back({rho_var[b.id], demand_q.at(b.id)});
    } else {
      rhs_p = gen.p.count(b.id) ? gen.p.at(b.id) : 0.0;
      rhs_q = gen.q.count(b.id) ? gen.q.at(b.id) : 0.0;
    }
    // sum_out P - (P_in - r l_in) = injection
    lp.add_row(std::move(rp), Relation::Equal, rhs_p);
    lp.add_row(std::move(rq), Relation::Equal, rhs_q);
  }
  for (size_t e = 0; e < net.lines.size(); ++e) {
    const Line& ln = net.lines[e];
    lp.add_row({{v_var[ln.to], 1.0},
                {v_var[ln.from], -1.0},
                {pl_var[e], 2.0 * ln.r},
                {ql_var[e], 2.0 * ln.x},
                {ll_var[e], -(ln.r * ln.r + ln.x * ln.x)}},
               Relation::Equal, 0.0);
  }
  PolygonApprox poly;
  std::vector<PolygonRow> prows;
  for (size_t e = 0; e < net.lines.size(); ++e) {
    double range = std::sqrt(net.lines[e].l_max) * s.v_max;
    poly = build_polygon(s.polygon_sides, range);
    prows = polygon_constraints(poly);
    for (const auto& pr : prows) {
      lp.add_row({{ll_var[e], 1.0}, {pl_var[e], -pr.p_coeff}, {ql_var[e], -pr.q_coeff}},
                 Relation::GreaterEqual, pr.rhs);
    }
  }

  PickupLp out;
  LpSolution sol = solve_lp(lp);
  if (sol.status != LpStatus::Optimal) return out;
  out.feasible = true;
  for (const auto& [id, var] : rho_var) out.rho[id] = sol.value(var);
  return out;
}

FlowState flat_flow(const Network& net) {
  FlowState f;
  for (const auto& b : net.buses) f.v[b.id] = 1.0;
  f.p_line.assign(net.lines.size(), 0.0);
  f.q_line.assign(net.lines.size(), 0.0);
  f.l_line.assign(net.lines.size(), 0.0);
  return f;
}

}  // namespace

WindowStepOutcome complete_step(const Scenario& s, const ActionLayout& lay,
                                const ActionVector& a, int k, int abs_step,
                                const std::map<int, double>& pickup_anchor,
                                const std::map<int, std::vector<double>>& res_window) {
  (void)res_window;  // RES injection comes from the action; forecast bounds live in C
  WindowStepOutcome out;
  StepInjections gen = device_injections(s, lay, a, k);
  std::map<int, double> dp, dq;
  for (const auto& [id, lpar] : s.loads) {
    dp[id] = s.load_p(id, abs_step);
    dq[id] = s.load_q(id, abs_step);
  }
  PickupLp pick = solve_pickup_lp(s, gen, dp, dq, pickup_anchor);
  out.feasible = pick.feasible;
  if (pick.feasible) {
    out.pickups = pick.rho;
  } else {
    for (const auto& [id, lpar] : s.loads) out.pickups[id] = 0.0;
  }

  InjectionSet inj;
  for (const auto& [id, p] : gen.p) {
    if (id == s.network.slack_bus) continue;  // slack absorbs the balance
    inj.p[id] = p;
    inj.q[id] = gen.q.at(id);
  }
  for (const auto& [id, rho] : out.pickups) {
    if (id == s.network.slack_bus) continue;
    inj.p[id] = -rho * dp[id];
    inj.q[id] = -rho * dq[id];
  }
  try {
    out.flow = solve_distflow(s.network, inj);
  } catch (const NumericalError&) {
    // No physical flow solution for this action; degrade like the
    // infeasible-LP path so exploration can continue.
    out.feasible = false;
    for (auto& [id, rho] : out.pickups) rho = 0.0;
    InjectionSet gen_only;
    for (const auto& [id, p] : gen.p) {
      if (id == s.network.slack_bus) continue;
      gen_only.p[id] = p;
      gen_only.q[id] = gen.q.at(id);
    }
    try {
      out.flow = solve_distflow(s.network, gen_only);
    } catch (const NumericalError&) {
      out.flow = flat_flow(s.network);
    }
  }
  return out;
}

std::vector<WindowStepOutcome> window_rollout(const Scenario& s, const SystemState& st,
                                              const ActionVector& a) {
  ActionLayout lay(s.network, s.cpo_lookahead);
  if (a.size() != lay.dim())
    throw ConfigError("action dimension " + std::to_string(a.size()) + " does not match " +
                      std::to_string(lay.dim()));
  std::vector<WindowStepOutcome> out;
  std::map<int, double> anchor = st.pickup;
  for (int k = 0; k <= s.cpo_lookahead; ++k) {
    out.push_back(complete_step(s, lay, a, k, st.t + k, anchor, st.res_fc));
    anchor = out.back().pickups;
  }
  return out;
}

TransitionResult transition(const Scenario& s, const SystemState& st, const ActionVector& a,
                            Rng& rng, const EpisodeForecast* cached) {
  ActionLayout lay(s.network, s.cpo_lookahead);
  if (a.size() != lay.dim())
    throw ConfigError("action dimension " + std::to_string(a.size()) + " does not match " +
                      std::to_string(lay.dim()));
  TransitionResult res;
  WindowStepOutcome first = complete_step(s, lay, a, 0, st.t, st.pickup, st.res_fc);
  res.flow = first.flow;
  res.pickups = first.pickups;
  res.lp_feasible = first.feasible;

  SystemState next;
  next.t = st.t + 1;
  next.pickup = first.pickups;
  int H = s.cpo_lookahead;
  // Stock recursions with the applied first-step action.
  for (int i = 0; i < lay.ness(); ++i) {
    int id = lay.ess_buses()[i];
    const EssParams& e = s.ess.at(id);
    double soc = st.soc.at(id) + e.eta_ch * a[lay.ess_ch(0, i)] * s.dt -
                 a[lay.ess_dis(0, i)] * s.dt / e.eta_dis;
    if (soc < e.soc_min - 1e-12 || soc > e.soc_max + 1e-12) res.clamped = true;
    next.soc[id] = std::min(std::max(soc, e.soc_min), e.soc_max);
  }
  for (int i = 0; i < lay.nmt(); ++i) {
    int id = lay.mt_buses()[i];
    const MtParams& m = s.mt.at(id);
    double fuel = st.fuel.at(id) - m.tau * a[lay.mt_p(0, i)];
    if (fuel < -1e-12) res.clamped = true;
    next.fuel[id] = std::max(fuel, 0.0);
    next.mt_power[id] = a[lay.mt_p(0, i)];
  }
  // Roll the forecast window one step. The post-horizon terminal state is
  // never acted on; clamp its window to the end of the stored series.
  for (const auto& [id, lpar] : s.loads) {
    auto& p = next.load_p_fc[id];
    auto& q = next.load_q_fc[id];
    int len = static_cast<int>(s.loads.at(id).p_demand.size());
    for (int k = 0; k <= H; ++k) {
      int step = std::min(next.t + k, len);
      p.push_back(s.load_p(id, step));
      q.push_back(s.load_q(id, step));
    }
  }
  for (const auto& [id, w] : st.res_fc) {
    auto& nw = next.res_fc[id];
    for (int k = 1; k <= H; ++k) nw.push_back(w[k]);
    double fresh;
    int reveal = next.t + H;  // newly visible absolute step
    if (cached && cached->count(id) && reveal <= static_cast<int>(cached->at(id).size())) {
      fresh = cached->at(id)[reveal - 1];
    } else {
      const ResParams& r = s.res.at(id);
      std::normal_distribution<double> unit(0.0, 1.0);
      fresh = std::max(0.0, r.forecast_mean + r.forecast_sd * unit(rng));
    }
    nw.push_back(fresh);
  }
  res.next = std::move(next);
  return res;
}

double reward(const Scenario& s, const SystemState& st, const ActionVector& a,
              const std::vector<WindowStepOutcome>& outcomes, double gamma) {
  ActionLayout lay(s.network, s.cpo_lookahead);
  double r = 0.0;
  double g = 1.0;
  for (int k = 0; k <= s.cpo_lookahead; ++k) {
    double term = 0.0;
    for (const auto& [id, lpar] : s.loads) {
      double pl = -outcomes.at(k).pickups.at(id) * s.load_p(id, st.t + k);
      term += lpar.priority * pl;
    }
    for (int i = 0; i < lay.nmt(); ++i)
      term += s.mt.at(lay.mt_buses()[i]).cost_coeff * a[lay.mt_p(k, i)];
    r -= g * term;
    g *= gamma;
  }
  return r;
}

int constraint_dim(const Scenario& s) {
  int per_step = 7 * static_cast<int>(s.mt.size()) + 9 * static_cast<int>(s.ess.size()) +
                 4 * static_cast<int>(s.res.size());
  return (s.cpo_lookahead + 1) * per_step;
}

Eigen::VectorXd constraints(const Scenario& s, const SystemState& st, const ActionVector& a) {
  ActionLayout lay(s.network, s.cpo_lookahead);
  Eigen::VectorXd c(constraint_dim(s));
  int i = 0;
  for (int k = 0; k <= s.cpo_lookahead; ++k) {
    for (int m = 0; m < lay.nmt(); ++m) {
      int id = lay.mt_buses()[m];
      const MtParams& mp = s.mt.at(id);
      double p = a[lay.mt_p(k, m)];
      double prev = k == 0 ? st.mt_power.at(id) : a[lay.mt_p(k - 1, m)];
      double burn = 0.0;
      for (int j = 0; j <= k; ++j) burn += a[lay.mt_p(j, m)];
      c[i++] = p - mp.p_max;
      c[i++] = mp.p_min - p;
      c[i++] = (p - prev) - mp.ramp_up_max;
      c[i++] = mp.ramp_down_min - (p - prev);
      c[i++] = mp.tau * burn - st.fuel.at(id);
      c[i++] = a[lay.mt_q(k, m)] - mp.q_max;
      c[i++] = -a[lay.mt_q(k, m)] - mp.q_max;
    }
    for (int e = 0; e < lay.ness(); ++e) {
      int id = lay.ess_buses()[e];
      const EssParams& ep = s.ess.at(id);
      double ch = a[lay.ess_ch(k, e)], dis = a[lay.ess_dis(k, e)];
      double soc = st.soc.at(id);
      for (int j = 0; j <= k; ++j)
        soc += (ep.eta_ch * a[lay.ess_ch(j, e)] - a[lay.ess_dis(j, e)] / ep.eta_dis) * s.dt;
      c[i++] = -ch;
      c[i++] = ch - ep.p_ch_max;
      c[i++] = -dis;
      c[i++] = dis - ep.p_dis_max;
      c[i++] = ch * dis;
      c[i++] = soc - ep.soc_max;
      c[i++] = ep.soc_min - soc;
      c[i++] = a[lay.ess_q(k, e)] - ep.q_max;
      c[i++] = -a[lay.ess_q(k, e)] - ep.q_max;
    }
    for (int r = 0; r < lay.nres(); ++r) {
      int id = lay.res_buses()[r];
      const ResParams& rp = s.res.at(id);
      double p = a[lay.res_p(k, r)];
      c[i++] = -p;
      c[i++] = p - st.res_fc.at(id).at(k);
      c[i++] = a[lay.res_q(k, r)] - rp.q_max;
      c[i++] = -a[lay.res_q(k, r)] - rp.q_max;
    }
  }
  return c;
}

Eigen::MatrixXd constraints_jacobian(const Scenario& s, const SystemState& st,
                                     const ActionVector& a) {
  ActionLayout lay(s.network, s.cpo_lookahead);
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(constraint_dim(s), lay.dim());
  int i = 0;
  for (int k = 0; k <= s.cpo_lookahead; ++k) {
    for (int m = 0; m < lay.nmt(); ++m) {
      int id = lay.mt_buses()[m];
      const MtParams& mp = s.mt.at(id);
      J(i++, lay.mt_p(k, m)) = 1.0;
      J(i++, lay.mt_p(k, m)) = -1.0;
      J(i, lay.mt_p(k, m)) += 1.0;
      if (k > 0) J(i, lay.mt_p(k - 1, m)) -= 1.0;
      ++i;
      J(i, lay.mt_p(k, m)) -= 1.0;
      if (k > 0) J(i, lay.mt_p(k - 1, m)) += 1.0;
      ++i;
      for (int j = 0; j <= k; ++j) J(i, lay.mt_p(j, m)) = mp.tau;
      ++i;
      J(i++, lay.mt_q(k, m)) = 1.0;
      J(i++, lay.mt_q(k, m)) = -1.0;
    }
    for (int e = 0; e < lay.ness(); ++e) {
      const EssParams& ep = s.ess.at(lay.ess_buses()[e]);
      J(i++, lay.ess_ch(k, e)) = -1.0;
      J(i++, lay.ess_ch(k, e)) = 1.0;
      J(i++, lay.ess_dis(k, e)) = -1.0;
      J(i++, lay.ess_dis(k, e)) = 1.0;
      J(i, lay.ess_ch(k, e)) = a[lay.ess_dis(k, e)];
      J(i, lay.ess_dis(k, e)) = a[lay.ess_ch(k, e)];
      ++i;
      for (int j = 0; j <= k; ++j) {
        J(i, lay.ess_ch(j, e)) = ep.eta_ch * s.dt;
        J(i, lay.ess_dis(j, e)) = -s.dt / ep.eta_dis;
      }
      ++i;
      for (int j = 0; j <= k; ++j) {
        J(i, lay.ess_ch(j, e)) = -ep.eta_ch * s.dt;
        J(i, lay.ess_dis(j, e)) = s.dt / ep.eta_dis;
      }
      ++i;
      J(i++, lay.ess_q(k, e)) = 1.0;
      J(i++, lay.ess_q(k, e)) = -1.0;
    }
    for (int r = 0; r < lay.nres(); ++r) {
      J(i++, lay.res_p(k, r)) = -1.0;
      J(i++, lay.res_p(k, r)) = 1.0;
      J(i++, lay.res_q(k, r)) = 1.0;
      J(i++, lay.res_q(k, r)) = -1.0;
    }
  }
  (void)st;
  return J;
}

Environment::Environment(Scenario s, const EpisodeForecast& fc)
    : scenario_(std::move(s)), forecast_(fc), rng_(derive_seed(scenario_.rng_seed, 0x9e)) {
  state_ = initial_state(scenario_, forecast_);
}

TransitionResult Environment::step(const ActionVector& a) {
  if (done()) throw ConfigError("episode already finished");
  TransitionResult r = transition(scenario_, state_, a, rng_, &forecast_);
  state_ = r.next;
  return r;
}

}  // namespace mgres
