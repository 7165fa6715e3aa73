#pragma once

#include <string>
#include <vector>

#include "mgres/cpo.hpp"
#include "mgres/mpc.hpp"

namespace mgres {

// Per-figure plot-ready series emitted from a single restoration log.
enum class FigureSeries { EssPower, EssSoc, MtFuel, Voltages, Pickups };

// Long-format trace: one row per (t, quantity, id). Deterministic order,
// full-precision values, no timing data.
void write_restoration_csv(const RestorationLog& log, const std::string& path);

void write_series_csv(const Scenario& s, const RestorationLog& log, FigureSeries which,
                      const std::string& path);

// episode,reward rows (the training-curve series).
void write_train_report_csv(const TrainReport& report, const std::string& path);

// Joined MPC/CPO series: per-step discounted window objectives on a common
// scale (the discount adjustment is documented in the file header), ESS
// charge/discharge, SoC, MT fuel and pickups side by side.
void write_compare_csvs(const Scenario& s, const RestorationLog& mpc_log,
                        const RestorationLog& cpo_log, double gamma,
                        const std::string& out_dir);

// Greedy-evaluation trace in the restoration-log schema.
RestorationLog eval_to_log(const Scenario& s, const std::vector<EvalStep>& steps);

// Resolves a scenario argument: literal path, then $MGRES_SCENARIO_DIR/<name>.json,
// then ./data/<name>.json.
std::string resolve_scenario_path(const std::string& arg);

// Command-line entry point (also used by tests); returns the process exit
// code: 0 ok, 2 config error, 3 infeasible optimization, 4 numerical failure.
int cli_run(const std::vector<std::string>& args);

}  // namespace mgres
