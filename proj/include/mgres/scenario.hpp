#pragma once

#include <map>
#include <string>
#include <vector>

#include "mgres/common.hpp"

namespace mgres {

enum class BusKind { Load, Microturbine, Renewable, Storage };

std::string to_string(BusKind k);
BusKind bus_kind_from_string(const std::string& s);

struct Bus {
  int id = 0;
  BusKind kind = BusKind::Load;
  bool operator==(const Bus&) const = default;
};

// Directed line, oriented away from the slack bus. r/x/l_max in p.u. on the
// scenario base (1 MVA, so MW and p.u. coincide numerically).
struct Line {
  int from = 0;
  int to = 0;
  double r = 0.0;
  double x = 0.0;
  double l_max = 0.0;  // squared-current limit
  bool operator==(const Line&) const = default;
};

struct MtParams {
  double p_min = 0.0;
  double p_max = 0.0;
  double ramp_up_max = 0.0;    // upper bound on P_t - P_{t-1}
  double ramp_down_min = 0.0;  // lower bound on P_t - P_{t-1} (typically negative)
  double tau = 1.0;            // fuel consumed per MW per step
  double fuel_init = 0.0;
  double cost_coeff = 0.0;  // generation cost weight in the objective
  double q_max = 0.0;
  bool operator==(const MtParams&) const = default;
};

struct EssParams {
  double p_ch_max = 0.0;
  double p_dis_max = 0.0;
  double soc_min = 0.0;
  double soc_max = 0.0;
  double soc_init = 0.0;
  double eta_ch = 1.0;
  double eta_dis = 1.0;
  double q_max = 0.0;
  bool operator==(const EssParams&) const = default;
};

struct ResParams {
  double forecast_mean = 0.0;
  double forecast_sd = 0.0;
  double q_max = 0.0;
  bool operator==(const ResParams&) const = default;
};

struct LoadParams {
  std::vector<double> p_demand;  // indexed by time step (1-based step t -> [t-1])
  std::vector<double> q_demand;
  double priority = 1.0;  // restoration priority weight in the objective
  bool operator==(const LoadParams&) const = default;
};

struct Network {
  std::vector<Bus> buses;   // sorted by id
  std::vector<Line> lines;  // arbitrary order, directed away from slack
  int slack_bus = 0;
  bool operator==(const Network&) const = default;

  const Bus* find_bus(int id) const;
  std::vector<int> bus_ids_of_kind(BusKind k) const;
};

struct Scenario {
  std::string name;
  Network network;
  std::map<int, MtParams> mt;
  std::map<int, EssParams> ess;
  std::map<int, ResParams> res;
  std::map<int, LoadParams> loads;

  int horizon = 0;       // T
  double dt = 1.0;       // hours per step
  double v_min = 0.95;   // squared-voltage bounds, p.u.^2
  double v_max = 1.05;
  double epsilon = 0.0;  // pickup almost-monotonicity leeway
  int mpc_lookahead = 1;
  int cpo_lookahead = 1;
  int polygon_sides = 6;
  std::uint64_t rng_seed = 0;

  bool operator==(const Scenario&) const = default;

  double load_p(int bus, int step) const;  // 1-based step
  double load_q(int bus, int step) const;
};

// Parses and validates a scenario file (JSON; schema documented in the
// README). Throws ConfigError on parse or validation failure.
Scenario load_scenario(const std::string& path);

// Inverse of load_scenario; the written file reloads to an identical Scenario.
void save_scenario(const Scenario& s, const std::string& path);

Scenario scenario_from_json_text(const std::string& text);
std::string scenario_to_json_text(const Scenario& s);

// Returns one message per violated invariant; empty means valid. Violations
// are data, not errors.
std::vector<std::string> validate(const Scenario& s);

// Draws horizon+1 i.i.d. values from N(mean, sd^2) per renewable bus,
// truncated below at zero. Step indices t..t+horizon must stay within the
// scenario's forecast series length.
std::map<int, std::vector<double>> sample_res_forecast(const Scenario& s, int t,
                                                       int horizon, Rng& rng);

}  // namespace mgres
