#include <cmath>

#include "doctest.h"
#include "mgres/mpc.hpp"
#include "mgres/relaxations.hpp"
#include "test_util.hpp"

using namespace mgres;

namespace {

struct CarriedState {
  std::map<int, double> soc, fuel, prev_power, prev_pickup;
};

CarriedState initial_carried(const Scenario& s) {
  CarriedState c;
  for (const auto& [id, e] : s.ess) c.soc[id] = e.soc_init;
  for (const auto& [id, m] : s.mt) {
    c.fuel[id] = m.fuel_init;
    c.prev_power[id] = 0.0;
  }
  for (const auto& [id, l] : s.loads) c.prev_pickup[id] = 0.0;
  return c;
}

}  // namespace

TEST_CASE("12-bus window LP at t=1 is feasible with slack voltage pinned") {
  Scenario s = load_scenario(testutil::data_path("case12da.json"));
  EpisodeForecast fc = episode_forecast_for(s, 0);
  CarriedState c = initial_carried(s);
  MpcLp M = build_mpc_lp(s, c.soc, c.fuel, c.prev_power, c.prev_pickup, 1, fc);
  LpSolution sol = solve_lp(M.lp);
  REQUIRE(sol.status == LpStatus::Optimal);
  for (int k = M.t_begin; k <= M.t_end; ++k)
    CHECK(sol.value(M.v[{k, s.network.slack_bus}]) == doctest::Approx(1.0));
  CHECK(lp_feasibility_error(M.lp, sol.values) <= 1e-7);
}

TEST_CASE("no stored or fuel energy and no sun means no pickup") {
  Scenario s = load_scenario(testutil::data_path("case12da.json"));
  s.mt.at(2).fuel_init = 0.0;
  s.ess.at(4).soc_init = s.ess.at(4).soc_min;
  s.res.at(10).forecast_mean = 0.0;
  s.res.at(10).forecast_sd = 0.0;
  EpisodeForecast fc = episode_forecast_for(s, 0);
  CarriedState c = initial_carried(s);
  MpcLp M = build_mpc_lp(s, c.soc, c.fuel, c.prev_power, c.prev_pickup, 1, fc);
  LpSolution sol = solve_lp(M.lp);
  REQUIRE(sol.status == LpStatus::Optimal);
  for (const auto& [id, l] : s.loads) {
    if (s.load_p(id, 1) == 0.0) continue;  // zero-demand pickups are free
    CHECK(sol.value(M.rho[{1, id}]) <= 1e-7);
  }
}

TEST_CASE("two-bus window: full pickup at minimal generation") {
  // Lossless line, demand 0.1 per step, ample fuel: the optimum serves the
  // load exactly (rho = 1, MT P = 0.1). Brute-force grid search over (rho, P)
  // confirms on the single-step window.
  Scenario s = testutil::two_bus_scenario(0.0, 0.0, 0.1, 0.0, 2, 0);
  s.mpc_lookahead = 0;
  EpisodeForecast fc;  // no RES devices
  CarriedState c = initial_carried(s);
  MpcLp M = build_mpc_lp(s, c.soc, c.fuel, c.prev_power, c.prev_pickup, 1, fc);
  LpSolution sol = solve_lp(M.lp);
  REQUIRE(sol.status == LpStatus::Optimal);
  CHECK(sol.value(M.rho[{1, 2}]) == doctest::Approx(1.0));
  CHECK(sol.value(M.mt_p[{1, 1}]) == doctest::Approx(0.1));

  double best = -1e9, best_rho = 0, best_p = 0;
  for (int i = 0; i <= 100; ++i)
    for (int j = 0; j <= 300; ++j) {
      double rho = i / 100.0, p = j / 1000.0;
      if (std::abs(p - rho * 0.1) > 1e-9) continue;  // lossless power balance
      double obj = rho * 0.1 - 0.1 * p;
      if (obj > best) {
        best = obj;
        best_rho = rho;
        best_p = p;
      }
    }
  CHECK(best_rho == doctest::Approx(1.0));
  CHECK(best_p == doctest::Approx(0.1));
  CHECK(sol.objective_value == doctest::Approx(best).epsilon(1e-6));
}

TEST_CASE("missing state maps are rejected") {
  Scenario s = load_scenario(testutil::data_path("case12da.json"));
  EpisodeForecast fc = episode_forecast_for(s, 0);
  CarriedState c = initial_carried(s);
  auto soc_missing = c.soc;
  soc_missing.erase(4);
  CHECK_THROWS_AS(build_mpc_lp(s, soc_missing, c.fuel, c.prev_power, c.prev_pickup, 1, fc),
                  ConfigError);
}

TEST_CASE("receding-horizon run on the bundled 12-bus case") {
  Scenario s = load_scenario(testutil::data_path("case12da.json"));
  EpisodeForecast fc = episode_forecast_for(s, 0);
  RestorationLog log = run_mpc(s, fc);
  REQUIRE(log.steps.size() == 8);

  EssHull hull{s.ess.at(4).p_ch_max, s.ess.at(4).p_dis_max};
  int max_discharge_steps = 0;
  for (const auto& st : log.steps) {
    // Voltage limits, slack pin, line limits on the realized flows.
    CHECK(st.flow.v.at(1) == doctest::Approx(1.0));
    for (const auto& [id, v] : st.flow.v) {
      CHECK(v >= s.v_min - 1e-7);
      CHECK(v <= s.v_max + 1e-7);
    }
    for (size_t e = 0; e < st.flow.l_line.size(); ++e)
      CHECK(st.flow.l_line[e] <= s.network.lines[e].l_max + 1e-7);
    // MT bounds; SoC within limits at every logged step.
    CHECK(st.mt_p.at(2) >= s.mt.at(2).p_min - 1e-7);
    CHECK(st.mt_p.at(2) <= s.mt.at(2).p_max + 1e-7);
    CHECK(st.soc.at(4) >= s.ess.at(4).soc_min - 1e-7);
    CHECK(st.soc.at(4) <= s.ess.at(4).soc_max + 1e-7);
    CHECK(st.fuel.at(2) >= -1e-9);
    // Hull always holds for the applied charge/discharge pair.
    CHECK(hull_contains(hull, st.ess_ch.at(4) + 1e-15, st.ess_dis.at(4) + 1e-15));
    if (st.ess_dis.at(4) >= s.ess.at(4).p_dis_max - 1e-6) max_discharge_steps++;
  }
  // Ramp and almost-monotonic pickup across steps.
  for (size_t i = 0; i < log.steps.size(); ++i) {
    double prev_p = i == 0 ? 0.0 : log.steps[i - 1].mt_p.at(2);
    double dp = log.steps[i].mt_p.at(2) - prev_p;
    CHECK(dp <= s.mt.at(2).ramp_up_max + 1e-7);
    CHECK(dp >= s.mt.at(2).ramp_down_min - 1e-7);
    if (i > 0)
      for (const auto& [id, rho] : log.steps[i].pickup)
        CHECK(rho >= log.steps[i - 1].pickup.at(id) - s.epsilon - 1e-7);
  }
  // Fuel telescoping is exact.
  double burned = 0.0;
  for (size_t i = 0; i + 1 < log.steps.size(); ++i) burned += log.steps[i].mt_p.at(2);
  CHECK(std::abs(log.steps.back().fuel.at(2) -
                 (s.mt.at(2).fuel_init - s.mt.at(2).tau * burned)) <= 1e-9);
  // The storage discharges at full power for most of the horizon.
  CHECK(max_discharge_steps >= 6);
}

TEST_CASE("MPC run is deterministic for a fixed seed") {
  Scenario s = load_scenario(testutil::data_path("case12da.json"));
  EpisodeForecast fc = episode_forecast_for(s, 0);
  RestorationLog a = run_mpc(s, fc);
  RestorationLog b = run_mpc(s, fc);
  REQUIRE(a.steps.size() == b.steps.size());
  for (size_t i = 0; i < a.steps.size(); ++i) {
    CHECK(a.steps[i].pickup == b.steps[i].pickup);
    CHECK(a.steps[i].mt_p == b.steps[i].mt_p);
    CHECK(a.steps[i].ess_dis == b.steps[i].ess_dis);
    CHECK(a.steps[i].flow.v == b.steps[i].flow.v);
  }
}
