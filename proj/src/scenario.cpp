#include "mgres/scenario.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include "json.hpp"

namespace mgres {

using nlohmann::json;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string to_string(BusKind k) {
  switch (k) {
    case BusKind::Load: return "load";
    case BusKind::Microturbine: return "microturbine";
    case BusKind::Renewable: return "renewable";
    case BusKind::Storage: return "storage";
  }
  return "load";
}

BusKind bus_kind_from_string(const std::string& s) {
  if (s == "load") return BusKind::Load;
  if (s == "microturbine") return BusKind::Microturbine;
  if (s == "renewable") return BusKind::Renewable;
  if (s == "storage") return BusKind::Storage;
  throw ConfigError("unknown bus kind '" + s + "'");
}

const Bus* Network::find_bus(int id) const {
  for (const auto& b : buses)
    if (b.id == id) return &b;
  return nullptr;
}

std::vector<int> Network::bus_ids_of_kind(BusKind k) const {
  std::vector<int> out;
  for (const auto& b : buses)
    if (b.kind == k) out.push_back(b.id);
  return out;
}

double Scenario::load_p(int bus, int step) const {
  const auto& lp = loads.at(bus);
  if (step < 1 || step > static_cast<int>(lp.p_demand.size()))
    throw ConfigError("load forecast step " + std::to_string(step) + " out of range for bus " +
                      std::to_string(bus));
  return lp.p_demand[step - 1];
}

double Scenario::load_q(int bus, int step) const {
  const auto& lp = loads.at(bus);
  if (step < 1 || step > static_cast<int>(lp.q_demand.size()))
    throw ConfigError("load forecast step " + std::to_string(step) + " out of range for bus " +
                      std::to_string(bus));
  return lp.q_demand[step - 1];
}

namespace {

std::vector<double> series_from_json(const json& j, int min_len) {
  std::vector<double> out;
  if (j.is_number()) {
    out.assign(static_cast<size_t>(min_len), j.get<double>());
  } else if (j.is_array()) {
    out = j.get<std::vector<double>>();
  } else {
    throw ConfigError("demand series must be a number or an array");
  }
  return out;
}

json series_to_json(const std::vector<double>& v) {
  // Scalars in input files are a convenience; saved files always carry the
  // full series so reloading reproduces the scenario exactly.
  return json(v);
}

}  // namespace

Scenario scenario_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("scenario parse error: ") + e.what());
  }
  Scenario s;
  try {
    s.name = j.value("name", "");
    const json& h = j.at("horizon");
    s.horizon = h.at("T").get<int>();
    s.dt = h.at("dt_hours").get<double>();
    s.epsilon = h.at("epsilon").get<double>();
    s.mpc_lookahead = h.at("mpc_lookahead").get<int>();
    s.cpo_lookahead = h.at("cpo_lookahead").get<int>();
    s.polygon_sides = h.at("polygon_sides").get<int>();
    s.rng_seed = h.value("rng_seed", 0ull);

    const json& net = j.at("network");
    s.network.slack_bus = net.at("slack_bus").get<int>();
    s.v_min = net.at("v_min").get<double>();
    s.v_max = net.at("v_max").get<double>();

    int min_series = s.horizon + std::max(s.mpc_lookahead, s.cpo_lookahead);
    for (const auto& jb : j.at("buses")) {
      Bus b;
      b.id = jb.at("id").get<int>();
      b.kind = bus_kind_from_string(jb.at("kind").get<std::string>());
      s.network.buses.push_back(b);
      switch (b.kind) {
        case BusKind::Load: {
          LoadParams lp;
          lp.p_demand = series_from_json(jb.at("p_demand"), min_series);
          lp.q_demand = series_from_json(jb.at("q_demand"), min_series);
          lp.priority = jb.at("priority").get<double>();
          s.loads[b.id] = lp;
          break;
        }
        case BusKind::Microturbine: {
          MtParams m;
          m.p_min = jb.at("p_min").get<double>();
          m.p_max = jb.at("p_max").get<double>();
          m.ramp_up_max = jb.at("ramp_up_max").get<double>();
          m.ramp_down_min = jb.at("ramp_down_min").get<double>();
          m.tau = jb.at("tau").get<double>();
          m.fuel_init = jb.at("fuel_init").get<double>();
          m.cost_coeff = jb.at("cost_coeff").get<double>();
          m.q_max = jb.at("q_max").get<double>();
          s.mt[b.id] = m;
          break;
        }
        case BusKind::Renewable: {
          ResParams r;
          r.forecast_mean = jb.at("forecast_mean").get<double>();
          r.forecast_sd = jb.at("forecast_sd").get<double>();
          r.q_max = jb.at("q_max").get<double>();
          s.res[b.id] = r;
          break;
        }
        case BusKind::Storage: {
          EssParams e;
          e.p_ch_max = jb.at("p_ch_max").get<double>();
          e.p_dis_max = jb.at("p_dis_max").get<double>();
          e.soc_min = jb.at("soc_min").get<double>();
          e.soc_max = jb.at("soc_max").get<double>();
          e.soc_init = jb.at("soc_init").get<double>();
          e.eta_ch = jb.at("eta_ch").get<double>();
          e.eta_dis = jb.at("eta_dis").get<double>();
          e.q_max = jb.at("q_max").get<double>();
          s.ess[b.id] = e;
          break;
        }
      }
    }
    std::sort(s.network.buses.begin(), s.network.buses.end(),
              [](const Bus& a, const Bus& b) { return a.id < b.id; });

    for (const auto& jl : j.at("lines")) {
      Line l;
      l.from = jl.at("from").get<int>();
      l.to = jl.at("to").get<int>();
      l.r = jl.at("r").get<double>();
      l.x = jl.at("x").get<double>();
      l.l_max = jl.at("l_max").get<double>();
      s.network.lines.push_back(l);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("scenario field error: ") + e.what());
  }

  auto violations = validate(s);
  if (!violations.empty()) {
    std::ostringstream oss;
    oss << "scenario validation failed:";
    for (const auto& v : violations) oss << "\n  - " << v;
    throw ConfigError(oss.str());
  }
  return s;
}

std::string scenario_to_json_text(const Scenario& s) {
  json j;
  j["name"] = s.name;
  j["horizon"] = {{"T", s.horizon},
                  {"dt_hours", s.dt},
                  {"epsilon", s.epsilon},
                  {"mpc_lookahead", s.mpc_lookahead},
                  {"cpo_lookahead", s.cpo_lookahead},
                  {"polygon_sides", s.polygon_sides},
                  {"rng_seed", s.rng_seed}};
  j["network"] = {{"slack_bus", s.network.slack_bus}, {"v_min", s.v_min}, {"v_max", s.v_max}};
  json buses = json::array();
  for (const auto& b : s.network.buses) {
    json jb;
    jb["id"] = b.id;
    jb["kind"] = to_string(b.kind);
    switch (b.kind) {
      case BusKind::Load: {
        const auto& lp = s.loads.at(b.id);
        jb["p_demand"] = series_to_json(lp.p_demand);
        jb["q_demand"] = series_to_json(lp.q_demand);
        jb["priority"] = lp.priority;
        break;
      }
      case BusKind::Microturbine: {
        const auto& m = s.mt.at(b.id);
        jb["p_min"] = m.p_min;
        jb["p_max"] = m.p_max;
        jb["ramp_up_max"] = m.ramp_up_max;
        jb["ramp_down_min"] = m.ramp_down_min;
        jb["tau"] = m.tau;
        jb["fuel_init"] = m.fuel_init;
        jb["cost_coeff"] = m.cost_coeff;
        jb["q_max"] = m.q_max;
        break;
      }
      case BusKind::Renewable: {
        const auto& r = s.res.at(b.id);
        jb["forecast_mean"] = r.forecast_mean;
        jb["forecast_sd"] = r.forecast_sd;
        jb["q_max"] = r.q_max;
        break;
      }
      case BusKind::Storage: {
        const auto& e = s.ess.at(b.id);
        jb["p_ch_max"] = e.p_ch_max;
        jb["p_dis_max"] = e.p_dis_max;
        jb["soc_min"] = e.soc_min;
        jb["soc_max"] = e.soc_max;
        jb["soc_init"] = e.soc_init;
        jb["eta_ch"] = e.eta_ch;
        jb["eta_dis"] = e.eta_dis;
        jb["q_max"] = e.q_max;
        break;
      }
    }
    buses.push_back(jb);
  }
  j["buses"] = buses;
  json lines = json::array();
  for (const auto& l : s.network.lines) {
    lines.push_back({{"from", l.from}, {"to", l.to}, {"r", l.r}, {"x", l.x}, {"l_max", l.l_max}});
  }
  j["lines"] = lines;
  return j.dump(2) + "\n";
}

Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open scenario file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return scenario_from_json_text(ss.str());
}

void save_scenario(const Scenario& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write scenario file '" + path + "'");
  out << scenario_to_json_text(s);
}

std::vector<std::string> validate(const Scenario& s) {
  std::vector<std::string> v;
  auto bus_str = [](int id) { return "bus " + std::to_string(id); };

  if (s.horizon < 1) v.push_back("horizon T must be >= 1");
  if (s.dt <= 0) v.push_back("dt must be positive");
  if (!(s.v_min > 0 && s.v_min <= 1.0 && s.v_max >= 1.0))
    v.push_back("voltage bounds must satisfy 0 < v_min <= 1 <= v_max");
  if (s.epsilon < 0) v.push_back("epsilon must be nonnegative");
  if (s.mpc_lookahead < 0 || s.mpc_lookahead > s.horizon)
    v.push_back("mpc_lookahead must be in [0, T]");
  if (s.cpo_lookahead < 0) v.push_back("cpo_lookahead must be nonnegative");
  if (s.polygon_sides < 1) v.push_back("polygon_sides must be >= 1");

  std::set<int> ids;
  for (const auto& b : s.network.buses) {
    if (!ids.insert(b.id).second) v.push_back(bus_str(b.id) + ": duplicate id");
  }
  if (!ids.count(s.network.slack_bus)) v.push_back("slack bus id not present in bus list");

  // Device parameter ranges.
  for (const auto& [id, m] : s.mt) {
    if (m.p_min > m.p_max) v.push_back(bus_str(id) + ": p_min above p_max");
    if (m.tau <= 0) v.push_back(bus_str(id) + ": tau must be positive");
    if (m.fuel_init < 0) v.push_back(bus_str(id) + ": fuel_init negative");
    if (m.q_max < 0) v.push_back(bus_str(id) + ": q_max negative");
    if (m.ramp_up_max < m.ramp_down_min) v.push_back(bus_str(id) + ": ramp bounds inverted");
  }
  for (const auto& [id, e] : s.ess) {
    if (e.p_ch_max <= 0) v.push_back(bus_str(id) + ": p_ch_max must be positive");
    if (e.p_dis_max <= 0) v.push_back(bus_str(id) + ": p_dis_max must be positive");
    if (e.soc_min > e.soc_max) v.push_back(bus_str(id) + ": soc_min above soc_max");
    if (e.soc_init < e.soc_min) v.push_back(bus_str(id) + ": soc_init below soc_min");
    if (e.soc_init > e.soc_max) v.push_back(bus_str(id) + ": soc_init above soc_max");
    if (!(e.eta_ch > 0 && e.eta_ch <= 1.0)) v.push_back(bus_str(id) + ": eta_ch out of (0,1]");
    if (!(e.eta_dis > 0 && e.eta_dis <= 1.0)) v.push_back(bus_str(id) + ": eta_dis out of (0,1]");
    if (e.q_max < 0) v.push_back(bus_str(id) + ": q_max negative");
  }
  for (const auto& [id, r] : s.res) {
    if (r.forecast_sd < 0) v.push_back(bus_str(id) + ": forecast_sd negative");
    if (r.q_max < 0) v.push_back(bus_str(id) + ": q_max negative");
  }
  int min_series = s.horizon + std::max(s.mpc_lookahead, s.cpo_lookahead);
  for (const auto& [id, lp] : s.loads) {
    for (double d : lp.p_demand)
      if (d < 0) {
        v.push_back(bus_str(id) + ": negative demand entry");
        break;
      }
    if (static_cast<int>(lp.p_demand.size()) < min_series ||
        static_cast<int>(lp.q_demand.size()) < min_series)
      v.push_back(bus_str(id) + ": demand series shorter than T + lookahead");
    if (lp.p_demand.size() != lp.q_demand.size())
      v.push_back(bus_str(id) + ": p/q demand series lengths differ");
  }

  // Lines and radial topology.
  for (size_t i = 0; i < s.network.lines.size(); ++i) {
    const Line& l = s.network.lines[i];
    std::string ls = "line " + std::to_string(l.from) + "->" + std::to_string(l.to);
    if (!ids.count(l.from) || !ids.count(l.to)) v.push_back(ls + ": endpoint not a known bus");
    if (l.r < 0) v.push_back(ls + ": negative resistance");
    if (l.x < 0) v.push_back(ls + ": negative reactance");
    if (l.l_max <= 0) v.push_back(ls + ": l_max must be positive");
    if (l.to == s.network.slack_bus) v.push_back(ls + ": slack bus has an incoming line");
  }
  if (s.network.lines.size() + 1 != s.network.buses.size()) {
    v.push_back("network is not radial: |E| = " + std::to_string(s.network.lines.size()) +
                ", |N| = " + std::to_string(s.network.buses.size()));
  } else if (ids.count(s.network.slack_bus)) {
    // BFS along line direction from the slack; a radial network reaches every
    // bus exactly once.
    std::map<int, std::vector<int>> children;
    std::map<int, int> indeg;
    for (const auto& l : s.network.lines) {
      children[l.from].push_back(l.to);
      indeg[l.to]++;
    }
    bool multi_in = false;
    for (const auto& [id, n] : indeg)
      if (n > 1) {
        v.push_back("network is not radial: bus " + std::to_string(id) + " has " +
                    std::to_string(n) + " incoming lines");
        multi_in = true;
      }
    if (!multi_in) {
      std::set<int> seen{s.network.slack_bus};
      std::queue<int> q;
      q.push(s.network.slack_bus);
      while (!q.empty()) {
        int b = q.front();
        q.pop();
        for (int c : children[b])
          if (seen.insert(c).second) q.push(c);
      }
      if (seen.size() != ids.size())
        v.push_back("network is not radial: " + std::to_string(ids.size() - seen.size()) +
                    " bus(es) unreachable from slack");
    }
  }
  return v;
}

std::map<int, std::vector<double>> sample_res_forecast(const Scenario& s, int t, int horizon,
                                                       Rng& rng) {
  if (horizon < 0) throw ConfigError("forecast horizon must be nonnegative");
  int max_len = 0;
  for (const auto& [id, lp] : s.loads) max_len = std::max<int>(max_len, lp.p_demand.size());
  if (!s.loads.empty() && t + horizon > max_len)
    throw ConfigError("forecast horizon exceeds scenario series length");
  std::map<int, std::vector<double>> out;
  std::normal_distribution<double> unit(0.0, 1.0);
  for (const auto& [id, r] : s.res) {
    std::vector<double>& series = out[id];
    series.reserve(horizon + 1);
    for (int k = 0; k <= horizon; ++k) {
      double draw = r.forecast_mean + r.forecast_sd * unit(rng);
      series.push_back(std::max(0.0, draw));  // negative generation is unphysical
    }
  }
  return out;
}

}  // namespace mgres
