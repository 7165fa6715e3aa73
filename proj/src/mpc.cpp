#include "mgres/mpc.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "mgres/relaxations.hpp"

namespace mgres {

EpisodeForecast episode_forecast_for(const Scenario& s, int episode_index) {
  Rng rng(derive_seed(s.rng_seed, 0xf0 + static_cast<std::uint64_t>(episode_index)));
  int len = s.horizon + std::max(s.mpc_lookahead, s.cpo_lookahead);
  return sample_res_forecast(s, 1, len - 1, rng);
}

MpcLp build_mpc_lp(const Scenario& s, const std::map<int, double>& soc,
                   const std::map<int, double>& fuel, const std::map<int, double>& prev_power,
                   const std::map<int, double>& prev_pickup, int t,
                   const EpisodeForecast& res_fc) {
  if (t < 1 || t > s.horizon) throw ConfigError("MPC step out of horizon");
  for (const auto& [id, m] : s.mt)
    if (!fuel.count(id) || !prev_power.count(id))
      throw ConfigError("missing MT state for bus " + std::to_string(id));
  for (const auto& [id, e] : s.ess)
    if (!soc.count(id)) throw ConfigError("missing SoC state for bus " + std::to_string(id));
  for (const auto& [id, l] : s.loads)
    if (!prev_pickup.count(id))
      throw ConfigError("missing pickup state for bus " + std::to_string(id));

  MpcLp M;
  M.t_begin = t;
  M.t_end = std::min(t + s.mpc_lookahead, s.horizon);
  const Network& net = s.network;
  LpProblem& lp = M.lp;

  auto res_at = [&](int bus, int step) { return res_fc.at(bus).at(step - 1); };

  for (int k = t; k <= M.t_end; ++k) {
    std::string suf = "_" + std::to_string(k);
    for (const auto& [id, lpar] : s.loads) {
      double lo = 0.0;
      if (k == t) lo = std::min(1.0, std::max(0.0, prev_pickup.at(id) - s.epsilon));
      M.rho[{k, id}] = lp.add_variable("rho" + std::to_string(id) + suf, lo, 1.0);
      lp.set_objective(M.rho[{k, id}], lpar.priority * s.load_p(id, k));
    }
    for (const auto& [id, r] : s.res) {
      M.kappa[{k, id}] = lp.add_variable("kappa" + std::to_string(id) + suf, 0.0, 1.0);
      M.res_q[{k, id}] = lp.add_variable("resQ" + std::to_string(id) + suf, -r.q_max, r.q_max);
    }
    for (const auto& [id, m] : s.mt) {
      M.mt_p[{k, id}] = lp.add_variable("mtP" + std::to_string(id) + suf, m.p_min, m.p_max);
      M.mt_q[{k, id}] = lp.add_variable("mtQ" + std::to_string(id) + suf, -m.q_max, m.q_max);
      lp.set_objective(M.mt_p[{k, id}], -m.cost_coeff);
      M.fuel[{k, id}] = lp.add_variable("fuel" + std::to_string(id) + suf,
                                        k == t ? fuel.at(id) : 0.0,
                                        k == t ? fuel.at(id) : kInf);
    }
    for (const auto& [id, e] : s.ess) {
      M.ess_ch[{k, id}] = lp.add_variable("ch" + std::to_string(id) + suf, 0.0, e.p_ch_max);
      M.ess_dis[{k, id}] = lp.add_variable("dis" + std::to_string(id) + suf, 0.0, e.p_dis_max);
      // The window objective is indifferent to when a fixed discharge budget
      // is spent; an infinitesimal early-dispatch weight breaks those ties
      // deterministically (well below every optimality tolerance in use).
      lp.set_objective(M.ess_dis[{k, id}], 1e-7 * (M.t_end - k + 1));
      M.ess_q[{k, id}] = lp.add_variable("essQ" + std::to_string(id) + suf, -e.q_max, e.q_max);
      M.soc[{k, id}] = lp.add_variable("soc" + std::to_string(id) + suf,
                                       k == t ? soc.at(id) : e.soc_min,
                                       k == t ? soc.at(id) : e.soc_max);
    }
    for (const auto& b : net.buses) {
      bool slack = b.id == net.slack_bus;
      M.v[{k, b.id}] = lp.add_variable("v" + std::to_string(b.id) + suf,
                                       slack ? 1.0 : s.v_min, slack ? 1.0 : s.v_max);
    }
    for (size_t e = 0; e < net.lines.size(); ++e) {
      int ei = static_cast<int>(e);
      M.line_p[{k, ei}] = lp.add_variable("P" + std::to_string(ei) + suf, -kInf, kInf);
      M.line_q[{k, ei}] = lp.add_variable("Q" + std::to_string(ei) + suf, -kInf, kInf);
      M.line_l[{k, ei}] = lp.add_variable("l" + std::to_string(ei) + suf, 0.0,
                                          net.lines[e].l_max);
    }
  }
  // Post-window stocks: fuel always (no overspend in the window's last step),
  // SoC only while the next step is still inside the horizon (the recursion
  // is undefined past T).
  for (const auto& [id, m] : s.mt)
    M.fuel_trail[id] = lp.add_variable("fuelEnd" + std::to_string(id), 0.0, kInf);
  if (M.t_end + 1 <= s.horizon)
    for (const auto& [id, e] : s.ess)
      M.soc_trail[id] = lp.add_variable("socEnd" + std::to_string(id), e.soc_min, e.soc_max);

  RadialTopology topo = build_topology(net);
  PolygonApprox poly;
  std::vector<PolygonRow> prows;

  for (int k = t; k <= M.t_end; ++k) {
    // Power balance (2a, 2b) at every bus.
    for (const auto& b : net.buses) {
      std::vector<std::pair<int, double>> rp, rq;
      auto cit = topo.child_lines.find(b.id);
      if (cit != topo.child_lines.end()) {
        for (int e : cit->second) {
          rp.push_back({M.line_p[{k, e}], 1.0});
          rq.push_back({M.line_q[{k, e}], 1.0});
        }
      }
      auto pit = topo.parent_line.find(b.id);
      if (pit != topo.parent_line.end()) {
        int e = pit->second;
        rp.push_back({M.line_p[{k, e}], -1.0});
        rp.push_back({M.line_l[{k, e}], net.lines[e].r});
        rq.push_back({M.line_q[{k, e}], -1.0});
        rq.push_back({M.line_l[{k, e}], net.lines[e].x});
      }
      double rhs_p = 0.0, rhs_q = 0.0;
      switch (b.kind) {
        case BusKind::Load:
          rp.push_back({M.rho[{k, b.id}], s.load_p(b.id, k)});
          rq.push_back({M.rho[{k, b.id}], s.load_q(b.id, k)});
          break;
        case BusKind::Microturbine:
          rp.push_back({M.mt_p[{k, b.id}], -1.0});
          rq.push_back({M.mt_q[{k, b.id}], -1.0});
          break;
        case BusKind::Renewable:
          // injection = (1-kappa) * forecast
          rp.push_back({M.kappa[{k, b.id}], res_at(b.id, k)});
          rhs_p = res_at(b.id, k);
          rq.push_back({M.res_q[{k, b.id}], -1.0});
          break;
        case BusKind::Storage:
          rp.push_back({M.ess_dis[{k, b.id}], -1.0});
          rp.push_back({M.ess_ch[{k, b.id}], 1.0});
          rq.push_back({M.ess_q[{k, b.id}], -1.0});
          break;
      }
      lp.add_row(std::move(rp), Relation::Equal, rhs_p,
                 "bal_p_" + std::to_string(b.id) + "_" + std::to_string(k));
      lp.add_row(std::move(rq), Relation::Equal, rhs_q,
                 "bal_q_" + std::to_string(b.id) + "_" + std::to_string(k));
    }
    // Voltage drop (2c) and polygon rows (current identity relaxation).
    for (size_t e = 0; e < net.lines.size(); ++e) {
      const Line& ln = net.lines[e];
      int ei = static_cast<int>(e);
      lp.add_row({{M.v[{k, ln.to}], 1.0},
                  {M.v[{k, ln.from}], -1.0},
                  {M.line_p[{k, ei}], 2.0 * ln.r},
                  {M.line_q[{k, ei}], 2.0 * ln.x},
                  {M.line_l[{k, ei}], -(ln.r * ln.r + ln.x * ln.x)}},
                 Relation::Equal, 0.0);
      double range = std::sqrt(ln.l_max) * s.v_max;
      poly = build_polygon(s.polygon_sides, range);
      prows = polygon_constraints(poly);
      for (const auto& pr : prows)
        lp.add_row({{M.line_l[{k, ei}], 1.0},
                    {M.line_p[{k, ei}], -pr.p_coeff},
                    {M.line_q[{k, ei}], -pr.q_coeff}},
                   Relation::GreaterEqual, pr.rhs);
    }
    // MT ramp and fuel recursion.
    for (const auto& [id, m] : s.mt) {
      if (k == t) {
        lp.add_row({{M.mt_p[{k, id}], 1.0}}, Relation::LessEqual,
                   m.ramp_up_max + prev_power.at(id));
        lp.add_row({{M.mt_p[{k, id}], 1.0}}, Relation::GreaterEqual,
                   m.ramp_down_min + prev_power.at(id));
      } else {
        lp.add_row({{M.mt_p[{k, id}], 1.0}, {M.mt_p[{k - 1, id}], -1.0}}, Relation::LessEqual,
                   m.ramp_up_max);
        lp.add_row({{M.mt_p[{k, id}], 1.0}, {M.mt_p[{k - 1, id}], -1.0}}, Relation::GreaterEqual,
                   m.ramp_down_min);
      }
      int next_var = k < M.t_end ? M.fuel[{k + 1, id}] : M.fuel_trail[id];
      lp.add_row({{next_var, 1.0}, {M.fuel[{k, id}], -1.0}, {M.mt_p[{k, id}], m.tau}},
                 Relation::Equal, 0.0);
    }
    // ESS hull and SoC recursion.
    for (const auto& [id, e] : s.ess) {
      lp.add_row({{M.ess_ch[{k, id}], 1.0 / e.p_ch_max}, {M.ess_dis[{k, id}], 1.0 / e.p_dis_max}},
                 Relation::LessEqual, 1.0);
      int next_var = -1;
      if (k < M.t_end)
        next_var = M.soc[{k + 1, id}];
      else if (M.soc_trail.count(id))
        next_var = M.soc_trail[id];
      if (next_var >= 0)
        lp.add_row({{next_var, 1.0},
                    {M.soc[{k, id}], -1.0},
                    {M.ess_ch[{k, id}], -e.eta_ch * s.dt},
                    {M.ess_dis[{k, id}], s.dt / e.eta_dis}},
                   Relation::Equal, 0.0);
    }
    // Almost-monotonic pickup inside the window.
    if (k > t)
      for (const auto& [id, lpar] : s.loads)
        lp.add_row({{M.rho[{k, id}], 1.0}, {M.rho[{k - 1, id}], -1.0}}, Relation::GreaterEqual,
                   -s.epsilon);
  }
  return M;
}

RestorationLog run_mpc(const Scenario& s, const EpisodeForecast& res_fc,
                       const MpcRunOptions& opts) {
  RestorationLog log;
  std::map<int, double> soc, fuel, prev_power, prev_pickup;
  for (const auto& [id, e] : s.ess) soc[id] = e.soc_init;
  for (const auto& [id, m] : s.mt) {
    fuel[id] = m.fuel_init;
    prev_power[id] = 0.0;
  }
  for (const auto& [id, l] : s.loads) prev_pickup[id] = 0.0;

  for (int t = 1; t <= s.horizon; ++t) {
    auto t0 = std::chrono::steady_clock::now();
    MpcLp M = build_mpc_lp(s, soc, fuel, prev_power, prev_pickup, t, res_fc);
    if (opts.dump_lp_dir) {
      std::ofstream os(*opts.dump_lp_dir + "/mpc_step_" + std::to_string(t) + ".lp");
      write_lp_format(M.lp, os);
    }
    LpSolution sol = solve_lp(M.lp);
    if (sol.status != LpStatus::Optimal)
      throw InfeasibleError("MPC window LP at step " + std::to_string(t) + " is " +
                            (sol.status == LpStatus::Infeasible ? "infeasible" : "unbounded"));

    MpcStepRecord rec;
    rec.t = t;
    rec.soc = soc;
    rec.fuel = fuel;
    InjectionSet inj;
    double restored_value = 0.0, mt_cost = 0.0;
    for (const auto& [id, lpar] : s.loads) {
      double rho = sol.value(M.rho[{t, id}]);
      rec.pickup[id] = rho;
      restored_value += lpar.priority * rho * s.load_p(id, t);
      if (id != s.network.slack_bus) {
        inj.p[id] = -rho * s.load_p(id, t);
        inj.q[id] = -rho * s.load_q(id, t);
      }
    }
    for (const auto& [id, m] : s.mt) {
      rec.mt_p[id] = sol.value(M.mt_p[{t, id}]);
      rec.mt_q[id] = sol.value(M.mt_q[{t, id}]);
      mt_cost += m.cost_coeff * rec.mt_p[id];
      if (id != s.network.slack_bus) {
        inj.p[id] = rec.mt_p[id];
        inj.q[id] = rec.mt_q[id];
      }
    }
    for (const auto& [id, r] : s.res) {
      double kappa = sol.value(M.kappa[{t, id}]);
      rec.res_p[id] = (1.0 - kappa) * res_fc.at(id).at(t - 1);
      rec.res_q[id] = sol.value(M.res_q[{t, id}]);
      if (id != s.network.slack_bus) {
        inj.p[id] = rec.res_p[id];
        inj.q[id] = rec.res_q[id];
      }
    }
    for (const auto& [id, e] : s.ess) {
      rec.ess_ch[id] = sol.value(M.ess_ch[{t, id}]);
      rec.ess_dis[id] = sol.value(M.ess_dis[{t, id}]);
      rec.ess_q[id] = sol.value(M.ess_q[{t, id}]);
      rec.cc_product_max = std::max(rec.cc_product_max, rec.ess_ch[id] * rec.ess_dis[id]);
      if (id != s.network.slack_bus) {
        inj.p[id] = rec.ess_dis[id] - rec.ess_ch[id];
        inj.q[id] = rec.ess_q[id];
      }
    }
    rec.objective_contrib = restored_value - mt_cost;
    rec.flow = solve_distflow(s.network, inj);
    for (const auto& b : s.network.buses)
      rec.flow_gap = std::max(rec.flow_gap,
                              std::abs(rec.flow.v.at(b.id) - sol.value(M.v[{t, b.id}])));
    for (size_t e = 0; e < s.network.lines.size(); ++e)
      rec.flow_gap = std::max(
          rec.flow_gap,
          std::abs(rec.flow.l_line[e] - sol.value(M.line_l[{t, static_cast<int>(e)}])));

    // Advance the stocks with the applied first inputs.
    for (const auto& [id, m] : s.mt) {
      fuel[id] = fuel[id] - m.tau * rec.mt_p[id];
      prev_power[id] = rec.mt_p[id];
    }
    for (const auto& [id, e] : s.ess)
      soc[id] = soc[id] + e.eta_ch * rec.ess_ch[id] * s.dt - rec.ess_dis[id] * s.dt / e.eta_dis;
    prev_pickup = rec.pickup;

    rec.solve_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.steps.push_back(std::move(rec));
  }
  return log;
}

}  // namespace mgres
