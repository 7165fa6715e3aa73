#include "mgres/powerflow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <sstream>

namespace mgres {

RadialTopology build_topology(const Network& net) {
  RadialTopology topo;
  std::map<int, std::vector<int>> out_lines;
  for (size_t e = 0; e < net.lines.size(); ++e) {
    out_lines[net.lines[e].from].push_back(static_cast<int>(e));
  }
  std::queue<int> q;
  q.push(net.slack_bus);
  std::map<int, bool> seen;
  seen[net.slack_bus] = true;
  while (!q.empty()) {
    int b = q.front();
    q.pop();
    topo.order.push_back(b);
    for (int e : out_lines[b]) {
      int child = net.lines[e].to;
      if (seen[child]) throw ConfigError("network is not radial: bus revisited in BFS");
      seen[child] = true;
      topo.parent_line[child] = e;
      topo.child_lines[b].push_back(e);
      q.push(child);
    }
  }
  if (topo.order.size() != net.buses.size())
    throw ConfigError("network is not radial: not all buses reachable from slack");
  return topo;
}

namespace {
double residual_impl(const Network& net, const RadialTopology& topo, const FlowState& flow,
                     const InjectionSet& inj);
}

FlowState solve_distflow(const Network& net, const InjectionSet& inj,
                         const DistFlowOptions& opts) {
  RadialTopology topo = build_topology(net);
  FlowState f;
  for (const auto& b : net.buses) f.v[b.id] = 1.0;
  f.p_line.assign(net.lines.size(), 0.0);
  f.q_line.assign(net.lines.size(), 0.0);
  f.l_line.assign(net.lines.size(), 0.0);

  auto inj_p = [&](int bus) {
    auto it = inj.p.find(bus);
    return it == inj.p.end() ? 0.0 : it->second;
  };
  auto inj_q = [&](int bus) {
    auto it = inj.q.find(bus);
    return it == inj.q.end() ? 0.0 : it->second;
  };

  double res = 0.0;
  for (int iter = 0; iter < opts.max_iter; ++iter) {
    // Backward sweep: aggregate downstream power into each parent line,
    // with the line's own loss term from the current l estimate.
    for (auto it = topo.order.rbegin(); it != topo.order.rend(); ++it) {
      int j = *it;
      if (j == net.slack_bus) continue;
      int e = topo.parent_line.at(j);
      const Line& ln = net.lines[e];
      double sum_p = 0.0, sum_q = 0.0;
      auto cit = topo.child_lines.find(j);
      if (cit != topo.child_lines.end()) {
        for (int ce : cit->second) {
          sum_p += f.p_line[ce];
          sum_q += f.q_line[ce];
        }
      }
      f.p_line[e] = sum_p - inj_p(j) + ln.r * f.l_line[e];
      f.q_line[e] = sum_q - inj_q(j) + ln.x * f.l_line[e];
    }
    // Current identity from the sending-end voltage.
    for (size_t e = 0; e < net.lines.size(); ++e) {
      double vi = f.v.at(net.lines[e].from);
      f.l_line[e] = (f.p_line[e] * f.p_line[e] + f.q_line[e] * f.q_line[e]) / vi;
      if (!std::isfinite(f.l_line[e]) || f.l_line[e] > 1e6)
        throw NumericalError("DistFlow sweep diverged (no physical solution for the "
                             "requested injections)");
    }
    // Forward sweep: propagate voltages from the slack reference.
    for (int j : topo.order) {
      if (j == net.slack_bus) {
        f.v[j] = 1.0;
        continue;
      }
      int e = topo.parent_line.at(j);
      const Line& ln = net.lines[e];
      double vj = f.v.at(ln.from) - 2.0 * (ln.r * f.p_line[e] + ln.x * f.q_line[e]) +
                  (ln.r * ln.r + ln.x * ln.x) * f.l_line[e];
      if (vj <= 0.0)
        throw NumericalError("voltage collapse at bus " + std::to_string(j) +
                             " (squared voltage " + format_double(vj) + ")");
      f.v[j] = vj;
    }
    res = residual_impl(net, topo, f, inj);
    if (res <= opts.tol) return f;
  }
  throw NumericalError("DistFlow sweep did not converge after " + std::to_string(opts.max_iter) +
                       " iterations (residual " + format_double(res) + ")");
}

namespace {

double residual_impl(const Network& net, const RadialTopology& topo, const FlowState& flow,
                     const InjectionSet& inj) {
  // NaN anywhere means the state diverged; report it as unbounded error
  // rather than letting max() drop the comparison.
  for (const auto& [id, v] : flow.v)
    if (!std::isfinite(v)) return std::numeric_limits<double>::infinity();
  for (size_t e = 0; e < flow.l_line.size(); ++e)
    if (!std::isfinite(flow.p_line[e]) || !std::isfinite(flow.q_line[e]) ||
        !std::isfinite(flow.l_line[e]))
      return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (const auto& b : net.buses) {
    if (b.id == net.slack_bus) continue;
    double sum_out_p = 0.0, sum_out_q = 0.0;
    auto cit = topo.child_lines.find(b.id);
    if (cit != topo.child_lines.end()) {
      for (int ce : cit->second) {
        sum_out_p += flow.p_line[ce];
        sum_out_q += flow.q_line[ce];
      }
    }
    int e = topo.parent_line.at(b.id);
    const Line& ln = net.lines[e];
    double in_p = flow.p_line[e] - ln.r * flow.l_line[e];
    double in_q = flow.q_line[e] - ln.x * flow.l_line[e];
    double pj = inj.p.count(b.id) ? inj.p.at(b.id) : 0.0;
    double qj = inj.q.count(b.id) ? inj.q.at(b.id) : 0.0;
    worst = std::max(worst, std::abs(pj - (sum_out_p - in_p)));
    worst = std::max(worst, std::abs(qj - (sum_out_q - in_q)));
  }
  for (size_t e = 0; e < net.lines.size(); ++e) {
    const Line& ln = net.lines[e];
    double vi = flow.v.at(ln.from), vj = flow.v.at(ln.to);
    double drop = vi - 2.0 * (ln.r * flow.p_line[e] + ln.x * flow.q_line[e]) +
                  (ln.r * ln.r + ln.x * ln.x) * flow.l_line[e];
    worst = std::max(worst, std::abs(vj - drop));
    double quad = flow.p_line[e] * flow.p_line[e] + flow.q_line[e] * flow.q_line[e];
    worst = std::max(worst, std::abs(flow.l_line[e] * vi - quad));
  }
  return worst;
}

}  // namespace

double residual(const Network& net, const FlowState& flow, const InjectionSet& inj) {
  return residual_impl(net, build_topology(net), flow, inj);
}

std::pair<double, double> slack_injection(const Network& net, const FlowState& flow) {
  double p = 0.0, q = 0.0;
  for (size_t e = 0; e < net.lines.size(); ++e) {
    if (net.lines[e].from == net.slack_bus) {
      p += flow.p_line[e];
      q += flow.q_line[e];
    }
  }
  return {p, q};
}

int SensitivitySystem::col_index(Var v, int id, int step) const {
  auto it = col_index_.find(Col{v, id, step});
  if (it == col_index_.end())
    throw ConfigError("sensitivity system has no such differential column");
  return it->second;
}

bool SensitivitySystem::is_action_col(int c) const {
  return std::find(action_cols_.begin(), action_cols_.end(), c) != action_cols_.end();
}

bool SensitivitySystem::is_fixed_col(int c) const {
  return std::find(fixed_zero_.begin(), fixed_zero_.end(), c) != fixed_zero_.end();
}

SensitivitySystem build_sensitivity_system(const Network& net, const Scenario& s,
                                           const std::vector<FlowState>& flows, int steps,
                                           int t_abs) {
  if (steps < 1) throw ConfigError("sensitivity window needs at least one step");
  if (static_cast<int>(flows.size()) < steps)
    throw ConfigError("missing flow data: " + std::to_string(flows.size()) +
                      " flow states for a " + std::to_string(steps) + "-step window");
  for (int k = 0; k < steps; ++k) {
    if (flows[k].v.size() != net.buses.size() || flows[k].l_line.size() != net.lines.size())
      throw ConfigError("missing flow data at window step " + std::to_string(k));
  }

  SensitivitySystem sys;
  sys.steps_ = steps;
  auto add_col = [&](SensitivitySystem::Var v, int id, int step) {
    SensitivitySystem::Col c{v, id, step};
    int idx = static_cast<int>(sys.cols_.size());
    sys.cols_.push_back(c);
    sys.col_index_[c] = idx;
    return idx;
  };
  using V = SensitivitySystem::Var;

  std::vector<int> mt_buses = net.bus_ids_of_kind(BusKind::Microturbine);
  std::vector<int> res_buses = net.bus_ids_of_kind(BusKind::Renewable);
  std::vector<int> ess_buses = net.bus_ids_of_kind(BusKind::Storage);

  for (int k = 0; k < steps; ++k) {
    for (const auto& b : net.buses) {
      add_col(V::BusP, b.id, k);
      add_col(V::BusQ, b.id, k);
      add_col(V::BusV, b.id, k);
    }
    for (size_t e = 0; e < net.lines.size(); ++e) {
      add_col(V::LineP, static_cast<int>(e), k);
      add_col(V::LineQ, static_cast<int>(e), k);
      add_col(V::LineL, static_cast<int>(e), k);
    }
    for (int b : ess_buses) {
      add_col(V::EssCh, b, k);
      add_col(V::EssDis, b, k);
    }
  }
  // Stock differentials; the first step is prescribed by knowledge of the
  // state, so its columns are fixed to zero.
  for (int b : ess_buses)
    for (int k = 0; k < steps; ++k) {
      int c = add_col(V::Soc, b, k);
      if (k == 0) sys.fixed_zero_.push_back(c);
    }
  for (int b : mt_buses)
    for (int k = 0; k < steps; ++k) {
      int c = add_col(V::Fuel, b, k);
      if (k == 0) sys.fixed_zero_.push_back(c);
    }

  // Action differentials in the CMDP flattening order.
  for (int k = 0; k < steps; ++k) {
    for (int b : res_buses) {
      sys.action_cols_.push_back(sys.col_index(V::BusP, b, k));
      sys.action_cols_.push_back(sys.col_index(V::BusQ, b, k));
    }
    for (int b : mt_buses) {
      sys.action_cols_.push_back(sys.col_index(V::BusP, b, k));
      sys.action_cols_.push_back(sys.col_index(V::BusQ, b, k));
    }
    for (int b : ess_buses) {
      sys.action_cols_.push_back(sys.col_index(V::EssCh, b, k));
      sys.action_cols_.push_back(sys.col_index(V::EssDis, b, k));
      sys.action_cols_.push_back(sys.col_index(V::BusQ, b, k));
    }
  }
  for (int k = 0; k < steps; ++k)
    sys.slack_v_cols_.push_back(sys.col_index(V::BusV, net.slack_bus, k));
  for (const auto& [id, lp] : s.loads)
    for (int k = 0; k < steps; ++k) {
      int len = static_cast<int>(lp.p_demand.size());
      int step = std::min(t_abs + k, len);
      sys.demand_[{id, k}] = {s.load_p(id, step), s.load_q(id, step)};
    }

  RadialTopology topo = build_topology(net);
  auto add_row = [&](std::vector<SensitivitySystem::Entry> entries) {
    sys.rows_.push_back(std::move(entries));
  };

  for (int k = 0; k < steps; ++k) {
    const FlowState& f = flows[k];
    // Power-balance differentials at every bus (slack included; its bus
    // injection differential is a free column).
    for (const auto& b : net.buses) {
      std::vector<SensitivitySystem::Entry> rp{{sys.col_index(V::BusP, b.id, k), 1.0}};
      std::vector<SensitivitySystem::Entry> rq{{sys.col_index(V::BusQ, b.id, k), 1.0}};
      auto cit = topo.child_lines.find(b.id);
      if (cit != topo.child_lines.end()) {
        for (int e : cit->second) {
          rp.push_back({sys.col_index(V::LineP, e, k), -1.0});
          rq.push_back({sys.col_index(V::LineQ, e, k), -1.0});
        }
      }
      auto pit = topo.parent_line.find(b.id);
      if (pit != topo.parent_line.end()) {
        int e = pit->second;
        rp.push_back({sys.col_index(V::LineP, e, k), 1.0});
        rp.push_back({sys.col_index(V::LineL, e, k), -net.lines[e].r});
        rq.push_back({sys.col_index(V::LineQ, e, k), 1.0});
        rq.push_back({sys.col_index(V::LineL, e, k), -net.lines[e].x});
      }
      add_row(std::move(rp));
      add_row(std::move(rq));
    }
    for (size_t e = 0; e < net.lines.size(); ++e) {
      const Line& ln = net.lines[e];
      int ei = static_cast<int>(e);
      // Voltage-drop differential.
      add_row({{sys.col_index(V::BusV, ln.to, k), 1.0},
               {sys.col_index(V::BusV, ln.from, k), -1.0},
               {sys.col_index(V::LineP, ei, k), 2.0 * ln.r},
               {sys.col_index(V::LineQ, ei, k), 2.0 * ln.x},
               {sys.col_index(V::LineL, ei, k), -(ln.r * ln.r + ln.x * ln.x)}});
      // Current-identity differential of l*v_i = P^2 + Q^2.
      add_row({{sys.col_index(V::LineL, ei, k), f.v.at(ln.from)},
               {sys.col_index(V::BusV, ln.from, k), f.l_line[e]},
               {sys.col_index(V::LineP, ei, k), -2.0 * f.p_line[e]},
               {sys.col_index(V::LineQ, ei, k), -2.0 * f.q_line[e]}});
    }
    for (int b : ess_buses) {
      add_row({{sys.col_index(V::BusP, b, k), 1.0},
               {sys.col_index(V::EssDis, b, k), -1.0},
               {sys.col_index(V::EssCh, b, k), 1.0}});
    }
  }
  for (int k = 0; k + 1 < steps; ++k) {
    for (int b : ess_buses) {
      const EssParams& e = s.ess.at(b);
      add_row({{sys.col_index(V::Soc, b, k + 1), 1.0},
               {sys.col_index(V::Soc, b, k), -1.0},
               {sys.col_index(V::EssCh, b, k), -e.eta_ch * s.dt},
               {sys.col_index(V::EssDis, b, k), s.dt / e.eta_dis}});
    }
    for (int b : mt_buses) {
      const MtParams& m = s.mt.at(b);
      add_row({{sys.col_index(V::Fuel, b, k + 1), 1.0},
               {sys.col_index(V::Fuel, b, k), -1.0},
               {sys.col_index(V::BusP, b, k), m.tau}});
    }
  }
  return sys;
}

Eigen::MatrixXd SensitivitySystem::load_partials(const std::vector<std::pair<int, int>>& loads,
                                                 TieMode ties) const {
  const int n_act = num_action_cols();
  // Map retained columns (everything except the prescribed zeros) into a
  // dense column range.
  std::vector<int> dense_of_col(num_cols(), -1);
  int n_dense = 0;
  for (int c = 0; c < num_cols(); ++c) {
    if (is_fixed_col(c)) continue;
    dense_of_col[c] = n_dense++;
  }
  int n_tie = 0;
  if (ties == TieMode::PowerFactor)
    for (const auto& [key, dq] : demand_)
      n_tie += (dq.first == 0.0 && dq.second == 0.0) ? 2 : 1;
  const int n_rows = num_rows() + static_cast<int>(slack_v_cols_.size()) + n_tie + n_act;
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n_rows, n_dense);
  for (int r = 0; r < num_rows(); ++r)
    for (const auto& [c, coeff] : rows_[r])
      if (dense_of_col[c] >= 0) M(r, dense_of_col[c]) = coeff;
  int r = num_rows();
  // Slack voltage is pinned at 1 in every transition, so its differential
  // vanishes; anchoring it here removes the voltage-shift drift.
  for (int c : slack_v_cols_) M(r++, dense_of_col[c]) = 1.0;
  if (ties == TieMode::PowerFactor) {
    for (const auto& [key, dq] : demand_) {
      int cp = col_index(Var::BusP, key.first, key.second);
      int cq = col_index(Var::BusQ, key.first, key.second);
      if (dq.first == 0.0 && dq.second == 0.0) {
        M(r++, dense_of_col[cp]) = 1.0;
        M(r++, dense_of_col[cq]) = 1.0;
      } else {
        double scale = std::max(std::abs(dq.first), std::abs(dq.second));
        M(r, dense_of_col[cp]) = dq.second / scale;
        M(r, dense_of_col[cq]) = -dq.first / scale;
        ++r;
      }
    }
  }
  const int norm_base = r;
  for (int j = 0; j < n_act; ++j) M(r++, dense_of_col[action_cols_[j]]) = 1.0;

  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n_rows, n_act);
  for (int j = 0; j < n_act; ++j) rhs(norm_base + j, j) = 1.0;

  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(M);
  Eigen::MatrixXd X = cod.solve(rhs);
  if (ties == TieMode::None) {
    double resid = (M * X - rhs).cwiseAbs().maxCoeff();
    if (resid > 1e-6)
      throw NumericalError(
          "sensitivity normalisation is inconsistent (an action differential cannot move "
          "independently); residual " +
          format_double(resid));
  }

  Eigen::MatrixXd out(loads.size(), n_act);
  for (size_t i = 0; i < loads.size(); ++i) {
    int c = col_index(Var::BusP, loads[i].first, loads[i].second);
    out.row(i) = X.row(dense_of_col[c]);
  }
  return out;
}

double partial_load_wrt_action(const SensitivitySystem& sys, std::pair<int, int> load_var,
                               int action_col) {
  const auto& acts = sys.action_cols();
  auto it = std::find(acts.begin(), acts.end(), action_col);
  if (it == acts.end()) throw ConfigError("column is not an action differential");
  Eigen::MatrixXd all = sys.load_partials({load_var});
  return all(0, static_cast<int>(it - acts.begin()));
}

}  // namespace mgres
