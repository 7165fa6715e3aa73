#include <cstdio>
#include <queue>
#include <set>

#include "doctest.h"
#include "mgres/scenario.hpp"
#include "test_util.hpp"

using namespace mgres;

TEST_CASE("bundled case12da loads with the published parameters") {
  Scenario s = load_scenario(testutil::data_path("case12da.json"));
  CHECK(s.horizon == 8);
  CHECK(s.v_min == doctest::Approx(0.95));
  CHECK(s.v_max == doctest::Approx(1.05));
  CHECK(s.network.buses.size() == 12);
  CHECK(s.network.lines.size() == 11);
  const EssParams& e = s.ess.at(4);
  CHECK(e.p_ch_max == doctest::Approx(0.2));
  CHECK(e.p_dis_max == doctest::Approx(0.15));
  CHECK(e.soc_min == doctest::Approx(1.0));
  CHECK(e.soc_max == doctest::Approx(5.0));
  CHECK(e.soc_init == doctest::Approx(2.0));
  CHECK(e.eta_ch == doctest::Approx(0.8));
  CHECK(e.eta_dis == doctest::Approx(0.8));
  CHECK(s.mt.count(2) == 1);
  CHECK(s.res.count(10) == 1);
  CHECK(s.loads.size() == 9);
  CHECK(validate(s).empty());
}

TEST_CASE("two-bus scenario is the smallest valid tree") {
  Scenario s = testutil::two_bus_scenario();
  CHECK(validate(s).empty());
}

TEST_CASE("a cycle among three buses is rejected as non-radial") {
  std::string text = R"({
    "name": "cycle",
    "horizon": {"T": 2, "dt_hours": 1.0, "epsilon": 0.0, "mpc_lookahead": 1,
                "cpo_lookahead": 1, "polygon_sides": 2, "rng_seed": 0},
    "network": {"slack_bus": 1, "v_min": 0.95, "v_max": 1.05},
    "buses": [
      {"id": 1, "kind": "load", "p_demand": 0.0, "q_demand": 0.0, "priority": 1.0},
      {"id": 2, "kind": "load", "p_demand": 0.0, "q_demand": 0.0, "priority": 1.0},
      {"id": 3, "kind": "load", "p_demand": 0.0, "q_demand": 0.0, "priority": 1.0}
    ],
    "lines": [
      {"from": 1, "to": 2, "r": 0.01, "x": 0.01, "l_max": 1.0},
      {"from": 2, "to": 3, "r": 0.01, "x": 0.01, "l_max": 1.0},
      {"from": 3, "to": 2, "r": 0.01, "x": 0.01, "l_max": 1.0}
    ]
  })";
  CHECK_THROWS_WITH_AS(scenario_from_json_text(text), doctest::Contains("not radial"),
                       ConfigError);
}

TEST_CASE("validate flags out-of-range device parameters") {
  Scenario s = testutil::two_bus_scenario();
  EssParams e;
  e.p_ch_max = 0.2;
  e.p_dis_max = 0.15;
  e.soc_min = 1.0;
  e.soc_max = 5.0;
  e.soc_init = 2.0;
  e.eta_ch = 1.2;  // invalid
  e.eta_dis = 0.8;
  e.q_max = 0.2;
  s.ess[2] = e;
  auto v = validate(s);
  bool found = false;
  for (const auto& msg : v)
    if (msg.find("eta_ch out of (0,1]") != std::string::npos) found = true;
  CHECK(found);

  Scenario s2 = testutil::two_bus_scenario();
  EssParams e2 = e;
  e2.eta_ch = 0.8;
  e2.soc_init = 6.0;
  s2.ess[2] = e2;
  auto v2 = validate(s2);
  found = false;
  for (const auto& msg : v2)
    if (msg.find("soc_init above soc_max") != std::string::npos) found = true;
  CHECK(found);
}

TEST_CASE("scenario round-trips through serialization") {
  Scenario s = load_scenario(testutil::data_path("case12da.json"));
  std::string text = scenario_to_json_text(s);
  Scenario s2 = scenario_from_json_text(text);
  CHECK(s == s2);

  Scenario tb = testutil::two_bus_scenario(0.013, 0.007, 0.11, 0.04);
  CHECK(tb == scenario_from_json_text(scenario_to_json_text(tb)));
}

TEST_CASE("every loaded scenario forms a spanning tree rooted at the slack") {
  Scenario s = load_scenario(testutil::data_path("case12da.json"));
  std::map<int, std::vector<int>> children;
  for (const auto& l : s.network.lines) children[l.from].push_back(l.to);
  std::set<int> seen{s.network.slack_bus};
  std::queue<int> q;
  q.push(s.network.slack_bus);
  while (!q.empty()) {
    int b = q.front();
    q.pop();
    for (int c : children[b])
      if (seen.insert(c).second) q.push(c);
  }
  CHECK(seen.size() == s.network.buses.size());
  CHECK(s.network.lines.size() + 1 == s.network.buses.size());
}

TEST_CASE("RES forecast sampling: zero variance reproduces the mean") {
  Scenario s = testutil::two_bus_scenario();
  ResParams r;
  r.forecast_mean = 0.07;
  r.forecast_sd = 0.0;
  r.q_max = 0.1;
  s.res[2] = r;  // sampling only; kind mismatch is irrelevant here
  Rng rng(1);
  auto fc = sample_res_forecast(s, 1, 3, rng);
  REQUIRE(fc.at(2).size() == 4);
  for (double v : fc.at(2)) CHECK(v == doctest::Approx(0.07));

  s.res[2].forecast_mean = 0.0;
  auto zero = sample_res_forecast(s, 1, 3, rng);
  for (double v : zero.at(2)) CHECK(v == 0.0);
}

TEST_CASE("RES forecast sampling: seeded Monte Carlo mean and truncation") {
  Scenario s = testutil::two_bus_scenario();
  ResParams r;
  r.forecast_mean = 0.07;
  r.forecast_sd = 0.01;
  r.q_max = 0.1;
  s.res[2] = r;

  Rng rng(42);
  double sum = 0.0;
  int n = 0;
  for (int i = 0; i < 2500; ++i) {
    auto fc = sample_res_forecast(s, 1, 3, rng);
    for (double v : fc.at(2)) {
      CHECK(v >= 0.0);
      sum += v;
      ++n;
    }
  }
  CHECK(n == 10000);
  CHECK(std::abs(sum / n - 0.07) < 0.001);

  Rng r1(9), r2(9);
  auto a = sample_res_forecast(s, 1, 3, r1);
  auto b = sample_res_forecast(s, 1, 3, r2);
  CHECK(a == b);

  s.res[2].forecast_mean = 0.0;
  s.res[2].forecast_sd = 0.5;
  Rng r3(5);
  for (int i = 0; i < 200; ++i) {
    auto fc = sample_res_forecast(s, 1, 3, r3);
    for (double v : fc.at(2)) CHECK(v >= 0.0);
  }
}

TEST_CASE("forecast horizon beyond the stored series is an error") {
  Scenario s = testutil::two_bus_scenario();
  ResParams r;
  r.forecast_mean = 0.07;
  r.forecast_sd = 0.01;
  r.q_max = 0.1;
  s.res[2] = r;
  Rng rng(1);
  CHECK_THROWS_AS(sample_res_forecast(s, 1, 100, rng), ConfigError);
}
