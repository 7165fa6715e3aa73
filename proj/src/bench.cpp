#include "mgres/bench.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

namespace mgres {

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write output file '" + path + "'");
  return os;
}

void row(std::ostream& os, int t, const std::string& quantity, int id, double value) {
  os << t << "," << quantity << "," << id << "," << format_double(value) << "\n";
}

}  // namespace

void write_restoration_csv(const RestorationLog& log, const std::string& path) {
  std::ofstream os = open_out(path);
  os << "t,quantity,id,value\n";
  for (const auto& st : log.steps) {
    for (const auto& [id, v] : st.pickup) row(os, st.t, "pickup", id, v);
    for (const auto& [id, v] : st.mt_p) row(os, st.t, "mt_p", id, v);
    for (const auto& [id, v] : st.mt_q) row(os, st.t, "mt_q", id, v);
    for (const auto& [id, v] : st.ess_ch) row(os, st.t, "ess_ch", id, v);
    for (const auto& [id, v] : st.ess_dis) row(os, st.t, "ess_dis", id, v);
    for (const auto& [id, v] : st.ess_q) row(os, st.t, "ess_q", id, v);
    for (const auto& [id, v] : st.res_p) row(os, st.t, "res_p", id, v);
    for (const auto& [id, v] : st.res_q) row(os, st.t, "res_q", id, v);
    for (const auto& [id, v] : st.soc) row(os, st.t, "soc", id, v);
    for (const auto& [id, v] : st.fuel) row(os, st.t, "fuel", id, v);
    for (const auto& [id, v] : st.flow.v) row(os, st.t, "v", id, v);
    for (size_t e = 0; e < st.flow.p_line.size(); ++e) {
      row(os, st.t, "line_p", static_cast<int>(e), st.flow.p_line[e]);
      row(os, st.t, "line_q", static_cast<int>(e), st.flow.q_line[e]);
      row(os, st.t, "line_l", static_cast<int>(e), st.flow.l_line[e]);
    }
    row(os, st.t, "objective", 0, st.objective_contrib);
    row(os, st.t, "cc_product", 0, st.cc_product_max);
    row(os, st.t, "flow_gap", 0, st.flow_gap);
  }
}

void write_series_csv(const Scenario& s, const RestorationLog& log, FigureSeries which,
                      const std::string& path) {
  if (log.steps.empty()) throw ConfigError("empty restoration log");
  std::ofstream os = open_out(path);
  switch (which) {
    case FigureSeries::EssPower: {
      os << "t";
      for (const auto& [id, e] : s.ess) os << ",ch_" << id << ",dis_" << id;
      os << "\n";
      for (const auto& st : log.steps) {
        os << st.t;
        for (const auto& [id, e] : s.ess)
          os << "," << format_double(st.ess_ch.at(id)) << ","
             << format_double(st.ess_dis.at(id));
        os << "\n";
      }
      break;
    }
    case FigureSeries::EssSoc: {
      os << "t";
      for (const auto& [id, e] : s.ess) os << ",soc_" << id;
      os << "\n";
      for (const auto& st : log.steps) {
        os << st.t;
        for (const auto& [id, e] : s.ess) os << "," << format_double(st.soc.at(id));
        os << "\n";
      }
      break;
    }
    case FigureSeries::MtFuel: {
      os << "t";
      for (const auto& [id, m] : s.mt) os << ",fuel_" << id;
      os << "\n";
      for (const auto& st : log.steps) {
        os << st.t;
        for (const auto& [id, m] : s.mt) os << "," << format_double(st.fuel.at(id));
        os << "\n";
      }
      break;
    }
    case FigureSeries::Voltages: {
      os << "t";
      for (const auto& b : s.network.buses) os << ",v_" << b.id;
      os << "\n";
      for (const auto& st : log.steps) {
        os << st.t;
        for (const auto& b : s.network.buses) os << "," << format_double(st.flow.v.at(b.id));
        os << "\n";
      }
      break;
    }
    case FigureSeries::Pickups: {
      os << "t";
      for (const auto& [id, l] : s.loads) os << ",rho_" << id;
      os << "\n";
      for (const auto& st : log.steps) {
        os << st.t;
        for (const auto& [id, l] : s.loads) os << "," << format_double(st.pickup.at(id));
        os << "\n";
      }
      break;
    }
  }
}

void write_train_report_csv(const TrainReport& report, const std::string& path) {
  std::ofstream os = open_out(path);
  os << "episode,reward\n";
  for (size_t i = 0; i < report.episode_reward.size(); ++i)
    os << (i + 1) << "," << format_double(report.episode_reward[i]) << "\n";
}

RestorationLog eval_to_log(const Scenario& s, const std::vector<EvalStep>& steps) {
  ActionLayout lay(s.network, s.cpo_lookahead);
  RestorationLog log;
  for (const auto& es : steps) {
    MpcStepRecord rec;
    rec.t = es.t;
    rec.soc = es.soc;
    rec.fuel = es.fuel;
    rec.pickup = es.result.pickups;
    for (int i = 0; i < lay.nmt(); ++i) {
      int id = lay.mt_buses()[i];
      rec.mt_p[id] = es.action[lay.mt_p(0, i)];
      rec.mt_q[id] = es.action[lay.mt_q(0, i)];
    }
    for (int i = 0; i < lay.nres(); ++i) {
      int id = lay.res_buses()[i];
      rec.res_p[id] = es.action[lay.res_p(0, i)];
      rec.res_q[id] = es.action[lay.res_q(0, i)];
    }
    double cc = 0.0;
    for (int i = 0; i < lay.ness(); ++i) {
      int id = lay.ess_buses()[i];
      rec.ess_ch[id] = es.action[lay.ess_ch(0, i)];
      rec.ess_dis[id] = es.action[lay.ess_dis(0, i)];
      rec.ess_q[id] = es.action[lay.ess_q(0, i)];
      cc = std::max(cc, rec.ess_ch[id] * rec.ess_dis[id]);
    }
    rec.cc_product_max = cc;
    rec.flow = es.result.flow;
    double restored = 0.0, cost = 0.0;
    for (const auto& [id, l] : s.loads)
      restored += l.priority * rec.pickup.at(id) * s.load_p(id, es.t);
    for (const auto& [id, m] : s.mt) cost += m.cost_coeff * rec.mt_p.at(id);
    rec.objective_contrib = restored - cost;
    log.steps.push_back(std::move(rec));
  }
  return log;
}

namespace {

double step_objective(const Scenario& s, const MpcStepRecord& rec) {
  double restored = 0.0, cost = 0.0;
  for (const auto& [id, l] : s.loads)
    restored += l.priority * rec.pickup.at(id) * s.load_p(id, rec.t);
  for (const auto& [id, m] : s.mt) cost += m.cost_coeff * rec.mt_p.at(id);
  return restored - cost;
}

}  // namespace

void write_compare_csvs(const Scenario& s, const RestorationLog& mpc_log,
                        const RestorationLog& cpo_log, double gamma,
                        const std::string& out_dir) {
  if (mpc_log.steps.size() != cpo_log.steps.size())
    throw ConfigError("compare: logs have different lengths");
  const int T = static_cast<int>(mpc_log.steps.size());
  const int H = s.cpo_lookahead;
  {
    std::ofstream os = open_out(out_dir + "/compare_reward.csv");
    // Both series are reported as J_t = sum_{k=t..min(t+H,T)} gamma^(k-t) *
    // (restored load value - generation cost at k), so the MPC cost carries
    // the same discounting as the CPO reward.
    os << "# J_t = sum_{k=t}^{min(t+" << H << ",T)} " << format_double(gamma)
       << "^(k-t) * (sum_i xi_i rho_{i,k} P_{i,k} - sum_m xi_m P_{m,k})\n";
    os << "t,mpc_cost,cpo_reward\n";
    for (int t = 1; t <= T; ++t) {
      double jm = 0.0, jc = 0.0, g = 1.0;
      for (int k = t; k <= std::min(t + H, T); ++k) {
        jm += g * step_objective(s, mpc_log.steps[k - 1]);
        jc += g * step_objective(s, cpo_log.steps[k - 1]);
        g *= gamma;
      }
      os << t << "," << format_double(jm) << "," << format_double(jc) << "\n";
    }
  }
  {
    std::ofstream os = open_out(out_dir + "/compare_ess_power.csv");
    os << "t";
    for (const auto& [id, e] : s.ess)
      os << ",ch_mpc_" << id << ",dis_mpc_" << id << ",ch_cpo_" << id << ",dis_cpo_" << id;
    os << "\n";
    for (int t = 1; t <= T; ++t) {
      os << t;
      for (const auto& [id, e] : s.ess)
        os << "," << format_double(mpc_log.steps[t - 1].ess_ch.at(id)) << ","
           << format_double(mpc_log.steps[t - 1].ess_dis.at(id)) << ","
           << format_double(cpo_log.steps[t - 1].ess_ch.at(id)) << ","
           << format_double(cpo_log.steps[t - 1].ess_dis.at(id));
      os << "\n";
    }
  }
  {
    std::ofstream os = open_out(out_dir + "/compare_ess_soc.csv");
    os << "t";
    for (const auto& [id, e] : s.ess) os << ",soc_mpc_" << id << ",soc_cpo_" << id;
    os << "\n";
    for (int t = 1; t <= T; ++t) {
      os << t;
      for (const auto& [id, e] : s.ess)
        os << "," << format_double(mpc_log.steps[t - 1].soc.at(id)) << ","
           << format_double(cpo_log.steps[t - 1].soc.at(id));
      os << "\n";
    }
  }
  {
    std::ofstream os = open_out(out_dir + "/compare_mt_fuel.csv");
    os << "t";
    for (const auto& [id, m] : s.mt) os << ",fuel_mpc_" << id << ",fuel_cpo_" << id;
    os << "\n";
    for (int t = 1; t <= T; ++t) {
      os << t;
      for (const auto& [id, m] : s.mt)
        os << "," << format_double(mpc_log.steps[t - 1].fuel.at(id)) << ","
           << format_double(cpo_log.steps[t - 1].fuel.at(id));
      os << "\n";
    }
  }
  {
    std::ofstream os = open_out(out_dir + "/compare_pickups.csv");
    os << "t";
    for (const auto& [id, l] : s.loads) os << ",rho_mpc_" << id << ",rho_cpo_" << id;
    os << "\n";
    for (int t = 1; t <= T; ++t) {
      os << t;
      for (const auto& [id, l] : s.loads)
        os << "," << format_double(mpc_log.steps[t - 1].pickup.at(id)) << ","
           << format_double(cpo_log.steps[t - 1].pickup.at(id));
      os << "\n";
    }
  }
  write_series_csv(s, cpo_log, FigureSeries::Voltages, out_dir + "/voltages_cpo.csv");
  write_series_csv(s, mpc_log, FigureSeries::Voltages, out_dir + "/voltages_mpc.csv");
}

std::string resolve_scenario_path(const std::string& arg) {
  namespace fs = std::filesystem;
  if (fs::exists(arg)) return arg;
  if (const char* dir = std::getenv("MGRES_SCENARIO_DIR")) {
    std::string p = std::string(dir) + "/" + arg + ".json";
    if (fs::exists(p)) return p;
  }
  std::string local = "data/" + arg + ".json";
  if (fs::exists(local)) return local;
  throw ConfigError("scenario '" + arg + "' not found (tried literal path, "
                    "$MGRES_SCENARIO_DIR, ./data)");
}

namespace {

void emit_log_bundle(const Scenario& s, const RestorationLog& log, const std::string& dir) {
  write_restoration_csv(log, dir + "/restoration_log.csv");
  write_series_csv(s, log, FigureSeries::Voltages, dir + "/voltages.csv");
  write_series_csv(s, log, FigureSeries::Pickups, dir + "/pickups.csv");
  if (!s.ess.empty()) {
    write_series_csv(s, log, FigureSeries::EssPower, dir + "/ess_power.csv");
    write_series_csv(s, log, FigureSeries::EssSoc, dir + "/ess_soc.csv");
  }
  if (!s.mt.empty()) write_series_csv(s, log, FigureSeries::MtFuel, dir + "/mt_fuel.csv");
}

}  // namespace

int cli_run(const std::vector<std::string>& args) {
  CLI::App app{"Islanded-microgrid load restoration: receding-horizon control and "
               "constrained policy learning"};
  app.require_subcommand(1);

  std::string scenario_arg, out_dir, checkpoint, dump_lp;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int episodes = 200, samples = 40;
  double delta = 0.1, gamma = 0.9;
  int mpc_lookahead = -1, cpo_lookahead = -1, checkpoint_every = 0;

  auto add_common = [&](CLI::App* cmd, bool needs_out) {
    cmd->add_option("--scenario", scenario_arg, "scenario file or bundled name")->required();
    auto* o = cmd->add_option("--out", out_dir, "output directory");
    if (needs_out) o->required();
    cmd->add_option("--seed", seed, "override the scenario RNG seed")
        ->each([&](const std::string&) { seed_set = true; });
  };

  auto* c_validate = app.add_subcommand("validate", "validate a scenario file");
  add_common(c_validate, false);

  auto* c_mpc = app.add_subcommand("run-mpc", "receding-horizon restoration run");
  add_common(c_mpc, true);
  c_mpc->add_option("--lookahead", mpc_lookahead, "override the MPC look-ahead");
  c_mpc->add_option("--dump-lp", dump_lp, "directory for per-step LP text dumps");

  auto* c_train = app.add_subcommand("run-cpo", "train a restoration policy");
  add_common(c_train, true);
  c_train->add_option("--episodes", episodes, "training episodes");
  c_train->add_option("--samples", samples, "epsilon samples per update");
  c_train->add_option("--delta", delta, "trust-region radius");
  c_train->add_option("--gamma", gamma, "discount factor");
  c_train->add_option("--lookahead", cpo_lookahead, "override the policy look-ahead");
  c_train->add_option("--checkpoint-every", checkpoint_every, "checkpoint cadence (episodes)");

  auto* c_eval = app.add_subcommand("eval-cpo", "greedy policy evaluation episode");
  add_common(c_eval, true);
  c_eval->add_option("--checkpoint", checkpoint, "policy checkpoint")->required();
  c_eval->add_option("--gamma", gamma, "discount factor");

  auto* c_cmp = app.add_subcommand("compare", "run MPC and a trained policy side by side");
  add_common(c_cmp, true);
  c_cmp->add_option("--checkpoint", checkpoint, "policy checkpoint")->required();
  c_cmp->add_option("--gamma", gamma, "discount factor");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    Scenario s = load_scenario(resolve_scenario_path(scenario_arg));
    if (seed_set) s.rng_seed = seed;
    if (mpc_lookahead >= 0) s.mpc_lookahead = std::min(mpc_lookahead, s.horizon);
    if (cpo_lookahead >= 0) s.cpo_lookahead = cpo_lookahead;
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    if (*c_validate) {
      auto v = validate(s);
      for (const auto& msg : v) std::cout << msg << "\n";
      std::cout << (v.empty() ? "scenario ok" : "scenario invalid") << "\n";
      return v.empty() ? 0 : 2;
    }
    if (*c_mpc) {
      MpcRunOptions opts;
      if (!dump_lp.empty()) {
        std::filesystem::create_directories(dump_lp);
        opts.dump_lp_dir = dump_lp;
      }
      RestorationLog log = run_mpc(s, episode_forecast_for(s, 0), opts);
      emit_log_bundle(s, log, out_dir);
      return 0;
    }
    if (*c_train) {
      TrainConfig cfg;
      cfg.episodes = episodes;
      cfg.n_samples = samples;
      cfg.delta = delta;
      cfg.gamma = gamma;
      cfg.seed = s.rng_seed;
      cfg.checkpoint_every = checkpoint_every;
      StateNormalizer norm = make_state_normalizer(s);
      if (checkpoint_every > 0)
        cfg.checkpoint_sink = [&](int ep, const PolicyParams& p) {
          save_checkpoint(p, norm, out_dir + "/checkpoint_ep" + std::to_string(ep) + ".json");
        };
      auto [params, report] = train(s, cfg);
      save_checkpoint(params, norm, out_dir + "/checkpoint.json");
      write_train_report_csv(report, out_dir + "/train_report.csv");
      std::cout << "episodes=" << report.episode_reward.size()
                << " recovery_steps=" << report.recovery_steps
                << " failed_updates=" << report.failed_updates << "\n";
      return 0;
    }
    if (*c_eval) {
      auto [params, norm] = load_checkpoint(checkpoint);
      auto steps = evaluate_policy(s, params, norm, episode_forecast_for(s, 0), gamma);
      RestorationLog log = eval_to_log(s, steps);
      emit_log_bundle(s, log, out_dir);
      return 0;
    }
    if (*c_cmp) {
      auto [params, norm] = load_checkpoint(checkpoint);
      EpisodeForecast fc = episode_forecast_for(s, 0);
      RestorationLog mpc_log = run_mpc(s, fc);
      RestorationLog cpo_log = eval_to_log(s, evaluate_policy(s, params, norm, fc, gamma));
      write_restoration_csv(mpc_log, out_dir + "/mpc_restoration_log.csv");
      write_restoration_csv(cpo_log, out_dir + "/cpo_restoration_log.csv");
      write_compare_csvs(s, mpc_log, cpo_log, gamma, out_dir);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  }
  return 2;
}

}  // namespace mgres
