#include "mgres/cpo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace mgres {

namespace {

// Symmetric-packed index for the trace-term rows: (i, j) with i >= j.
inline int packed_index(int i, int j) { return i * (i + 1) / 2 + j; }

}  // namespace

FisherOperator::FisherOperator(const GaussianOut& g, const PolicyJacobians& jac, int h_mu,
                               double damping)
    : damping_(damping) {
  const int d = static_cast<int>(g.mu.size());
  h_mu_ = h_mu;
  h_sig_ = static_cast<int>(jac.dmu.cols()) - h_mu;

  auto lower = g.L.triangularView<Eigen::Lower>();
  a_mu_ = lower.solve(jac.dmu.leftCols(h_mu_));

  // Trace-term rows in symmetric-packed form (off-diagonals scaled by
  // sqrt(2)), which preserves every inner product of the symmetric matrices
  // vec'd here while halving the row count.
  const int np = d * (d + 1) / 2;
  const double s2 = std::sqrt(2.0);
  const double inv_sqrt2 = 1.0 / s2;
  a_sig_ = Eigen::MatrixXd::Zero(np, h_sig_);
  Eigen::MatrixXd Linv = Eigen::MatrixXd::Identity(d, d);
  lower.solveInPlace(Linv);

  for (int c = 0; c < h_sig_; ++c) {
    // Most columns (the factor net's output layer) touch a single L entry;
    // their trace-term row has closed form alpha * (u e_c' + e_c u') with
    // u = L^{-1} e_r, avoiding dense solves.
    int nnz = 0, last = -1;
    for (int rix = 0; rix < d * d; ++rix) {
      if (jac.dvecL(rix, h_mu_ + c) != 0.0) {
        ++nnz;
        last = rix;
        if (nnz > 1) break;
      }
    }
    if (nnz == 0) continue;
    if (nnz == 1) {
      int i = last % d, j = last / d;  // column-major vec: entry (i, j)
      double alpha = jac.dvecL(last, h_mu_ + c) * inv_sqrt2;
      for (int k = 0; k < d; ++k) {
        double ukalpha = alpha * Linv(k, i);
        if (ukalpha == 0.0) continue;
        if (k == j)
          a_sig_(packed_index(j, j), c) += 2.0 * ukalpha;
        else
          a_sig_(packed_index(std::max(k, j), std::min(k, j)), c) += s2 * ukalpha;
      }
      continue;
    }
    Eigen::MatrixXd E =
        Eigen::Map<const Eigen::MatrixXd>(jac.dvecL.col(h_mu_ + c).data(), d, d);
    Eigen::MatrixXd P = E * g.L.transpose() + g.L * E.transpose();
    Eigen::MatrixXd M = lower.solve(P);
    M = lower.solve(M.transpose()).transpose();
    for (int i = 0; i < d; ++i) {
      a_sig_(packed_index(i, i), c) = inv_sqrt2 * M(i, i);
      for (int j = 0; j < i; ++j) a_sig_(packed_index(i, j), c) = M(i, j);  // sqrt2/sqrt2
    }
  }

  factor_grams();
}

FisherOperator::FisherOperator(Eigen::MatrixXd a_mu, Eigen::MatrixXd a_sig, double damping)
    : a_mu_(std::move(a_mu)), a_sig_(std::move(a_sig)), damping_(damping) {
  h_mu_ = static_cast<int>(a_mu_.cols());
  h_sig_ = static_cast<int>(a_sig_.cols());
  factor_grams();
}

void FisherOperator::factor_grams() {
  Eigen::MatrixXd gm = a_mu_ * a_mu_.transpose();
  gm.diagonal().array() += damping_;
  gram_mu_.compute(gm);
  Eigen::MatrixXd gs = a_sig_ * a_sig_.transpose();
  gs.diagonal().array() += damping_;
  // LDLT tolerates the numerically semidefinite Grams that appear when the
  // covariance factor sits at its diagonal floor.
  gram_sig_.compute(gs);
}

Eigen::VectorXd FisherOperator::solve_once(const Eigen::VectorXd& v) const {
  // Woodbury: (lambda I + A'A)^{-1} v = (v - A'(lambda I + AA')^{-1} A v)/lambda.
  Eigen::VectorXd out(dim());
  Eigen::VectorXd t1 = a_mu_ * v.head(h_mu_);
  out.head(h_mu_) = (v.head(h_mu_) - a_mu_.transpose() * gram_mu_.solve(t1)) / damping_;
  Eigen::VectorXd t2 = a_sig_ * v.tail(h_sig_);
  out.tail(h_sig_) = (v.tail(h_sig_) - a_sig_.transpose() * gram_sig_.solve(t2)) / damping_;
  return out;
}

Eigen::VectorXd FisherOperator::apply(const Eigen::VectorXd& v) const {
  Eigen::VectorXd out(dim());
  out.head(h_mu_) = a_mu_.transpose() * (a_mu_ * v.head(h_mu_)) + damping_ * v.head(h_mu_);
  out.tail(h_sig_) = a_sig_.transpose() * (a_sig_ * v.tail(h_sig_)) + damping_ * v.tail(h_sig_);
  return out;
}

Eigen::VectorXd FisherOperator::solve(const Eigen::VectorXd& v) const {
  // The Woodbury form cancels badly when damping is tiny; two rounds of
  // iterative refinement against apply() restore row-space precision.
  Eigen::VectorXd x = solve_once(v);
  x += solve_once(v - apply(x));
  x += solve_once(v - apply(x));
  if (!x.allFinite()) throw NumericalError("Fisher solve produced non-finite values");
  return x;
}

Eigen::MatrixXd FisherOperator::solve_many(const Eigen::MatrixXd& V) const {
  auto once = [&](const Eigen::MatrixXd& W) {
    Eigen::MatrixXd out(W.rows(), W.cols());
    out.topRows(h_mu_) =
        (W.topRows(h_mu_) - a_mu_.transpose() * gram_mu_.solve(a_mu_ * W.topRows(h_mu_))) /
        damping_;
    out.bottomRows(h_sig_) = (W.bottomRows(h_sig_) -
                              a_sig_.transpose() * gram_sig_.solve(a_sig_ * W.bottomRows(h_sig_))) /
                             damping_;
    return out;
  };
  auto apply_m = [&](const Eigen::MatrixXd& X) {
    Eigen::MatrixXd out(X.rows(), X.cols());
    out.topRows(h_mu_) =
        a_mu_.transpose() * (a_mu_ * X.topRows(h_mu_)) + damping_ * X.topRows(h_mu_);
    out.bottomRows(h_sig_) =
        a_sig_.transpose() * (a_sig_ * X.bottomRows(h_sig_)) + damping_ * X.bottomRows(h_sig_);
    return out;
  };
  Eigen::MatrixXd X = once(V);
  X += once(V - apply_m(X));  // one refinement pass suffices for the duals
  if (!X.allFinite()) throw NumericalError("Fisher solve produced non-finite values");
  return X;
}

double FisherOperator::quad(const Eigen::VectorXd& v) const {
  double q = damping_ * v.squaredNorm();
  q += (a_mu_ * v.head(h_mu_)).squaredNorm();
  q += (a_sig_ * v.tail(h_sig_)).squaredNorm();
  return q;
}

namespace {

// Dual of the trust-region QCQP at fixed multipliers nu >= 0:
//   dual(nu) = sqrt(delta * q(nu)) - nu'c,  q(nu) = (a - B nu)' F^{-1} (a - B nu).
// Coordinate minimisation over nu using the precomputed F^{-1} Grams.
struct DualSolve {
  Eigen::VectorXd nu;
  double lambda = 0.0;
  int iterations = 0;
  bool converged = true;
  std::vector<double> values;
};

DualSolve minimize_dual(double r_aa, const Eigen::VectorXd& r_ab, const Eigen::MatrixXd& R_bb,
                        const Eigen::VectorXd& c, double delta) {
  const int M = static_cast<int>(c.size());
  DualSolve out;
  out.nu = Eigen::VectorXd::Zero(M);
  auto q_of = [&](const Eigen::VectorXd& nu) {
    return r_aa - 2.0 * nu.dot(r_ab) + nu.dot(R_bb * nu);
  };
  auto dual_of = [&](const Eigen::VectorXd& nu) {
    return std::sqrt(std::max(delta * q_of(nu), 0.0)) - nu.dot(c);
  };
  double prev = dual_of(out.nu);
  out.values.push_back(prev);
  const int max_sweeps = 400;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    for (int m = 0; m < M; ++m) {
      double alpha = R_bb(m, m);
      if (alpha < 1e-16) continue;
      // q as a function of nu_m: alpha nu^2 - 2 beta nu + g0.
      double beta = r_ab[m];
      for (int j = 0; j < M; ++j)
        if (j != m) beta -= R_bb(m, j) * out.nu[j];
      double nu_m = out.nu[m];
      double g0 = q_of(out.nu) - alpha * nu_m * nu_m + 2.0 * beta * nu_m;
      double cm = c[m];
      // Stationarity: sqrt(delta) (alpha nu - beta) = cm sqrt(q).
      double best_nu = 0.0;
      double best_val = std::numeric_limits<double>::infinity();
      auto consider = [&](double cand) {
        if (!(cand >= 0.0) || !std::isfinite(cand)) return;
        double q = alpha * cand * cand - 2.0 * beta * cand + g0;
        if (q < 0.0) q = 0.0;
        double val = std::sqrt(delta * q) - cand * cm;
        // include the rest of the -nu'c term implicitly (constant here)
        if (val < best_val) {
          best_val = val;
          best_nu = cand;
        }
      };
      consider(0.0);
      double A2 = delta * alpha * alpha - cm * cm * alpha;
      double B1 = -2.0 * beta * (delta * alpha - cm * cm);
      double C0 = delta * beta * beta - cm * cm * g0;
      if (std::abs(A2) > 1e-300) {
        double disc = B1 * B1 - 4.0 * A2 * C0;
        if (disc >= 0.0) {
          double sq = std::sqrt(disc);
          for (double root : {(-B1 + sq) / (2.0 * A2), (-B1 - sq) / (2.0 * A2)}) {
            if (root < 0.0) continue;
            // keep only roots satisfying the sign condition of stationarity
            double qr = alpha * root * root - 2.0 * beta * root + g0;
            if (qr <= 0.0) continue;
            if ((alpha * root - beta) * cm < 0.0 && std::abs(cm) > 0.0) continue;
            consider(root);
          }
        }
      }
      out.nu[m] = best_nu;
    }
    double cur = dual_of(out.nu);
    out.values.push_back(cur);
    out.iterations = sweep + 1;
    if (prev - cur < 1e-12 * std::max(1.0, std::abs(prev))) {
      prev = cur;
      break;
    }
    prev = cur;
    if (sweep == max_sweeps - 1) out.converged = false;
  }
  double q = std::max(q_of(out.nu), 0.0);
  out.lambda = std::sqrt(q / std::max(delta, 1e-300));
  return out;
}

}  // namespace

QcqpStep solve_qcqp(const QcqpData& q) {
  QcqpStep out;
  const int h = static_cast<int>(q.a.size());
  const int M = static_cast<int>(q.c.size());
  out.step = Eigen::VectorXd::Zero(h);
  if (q.delta <= 0.0) {
    out.diag.mode = QcqpDiagnostics::Mode::Zero;
    return out;
  }

  Eigen::VectorXd p = q.F->solve(q.a);
  double r_aa = q.a.dot(p);
  // Unconstrained trust-region optimum.
  Eigen::VectorXd x_u = Eigen::VectorXd::Zero(h);
  if (r_aa > 1e-18) x_u = std::sqrt(q.delta / r_aa) * p;

  if (M == 0 || ((q.B.transpose() * x_u + q.c).array() <= 1e-10).all()) {
    if (r_aa <= 1e-18) {
      out.diag.mode = QcqpDiagnostics::Mode::Zero;
      return out;
    }
    out.step = x_u;
    out.diag.mode = QcqpDiagnostics::Mode::NaturalGradient;
    return out;
  }

  Eigen::MatrixXd S = q.F->solve_many(q.B);   // h x M
  Eigen::VectorXd r_ab = S.transpose() * q.a;  // B' F^{-1} a
  Eigen::MatrixXd R_bb = q.B.transpose() * S;  // B' F^{-1} B

  // Per-row feasibility within the trust region: min_x b'x + c over the
  // ellipsoid is c - sqrt(delta b'F^{-1}b).
  int worst = -1;
  double worst_c = 0.0;
  for (int m = 0; m < M; ++m) {
    double reach = std::sqrt(std::max(q.delta * R_bb(m, m), 0.0));
    if (q.c[m] - reach > 1e-10 && q.c[m] > worst_c) {
      worst_c = q.c[m];
      worst = m;
    }
  }
  if (worst >= 0) {
    // Pure constraint reduction along the most violated gradient.
    double r_bb = std::max(R_bb(worst, worst), 1e-18);
    out.step = -std::sqrt(q.delta / r_bb) * S.col(worst);
    out.diag.mode = QcqpDiagnostics::Mode::Recovery;
    return out;
  }

  DualSolve ds = minimize_dual(r_aa, r_ab, R_bb, q.c, q.delta);
  out.diag.mode = QcqpDiagnostics::Mode::Dual;
  out.diag.dual_iterations = ds.iterations;
  out.diag.dual_converged = ds.converged;
  out.diag.dual_values = ds.values;
  out.diag.nu = ds.nu;
  out.diag.lambda = ds.lambda;
  if (!ds.converged) {
    double resid = 0.0;
    for (double v : ds.values) resid = v;
    throw NumericalError("QCQP dual did not converge (last dual value " + format_double(resid) +
                         " after " + std::to_string(ds.iterations) + " sweeps)");
  }
  if (ds.lambda < 1e-14) {
    // Objective gradient fully cancelled by the active constraints: fall back
    // to the most binding direction at the boundary.
    out.step = Eigen::VectorXd::Zero(h);
    out.diag.mode = QcqpDiagnostics::Mode::Zero;
    return out;
  }
  out.step = (p - S * ds.nu) / ds.lambda;
  // Numerical guard: scale onto the trust region if rounding overshoots.
  double quad = out.step.dot(q.F->apply(out.step));
  if (quad > q.delta * (1.0 + 1e-9) && quad > 0.0)
    out.step *= std::sqrt(q.delta / quad);
  return out;
}

namespace {

// dR/da at a sampled action: analytic MT cost terms plus the chained load
// responses from the window differential system. Load rows at infeasible
// window steps do not respond and contribute zero.
Eigen::RowVectorXd reward_grad_wrt_action(const Scenario& s, const SystemState& st,
                                          const std::vector<WindowStepOutcome>& roll,
                                          double gamma) {
  ActionLayout lay(s.network, s.cpo_lookahead);
  const int K = s.cpo_lookahead + 1;
  Eigen::RowVectorXd u = Eigen::RowVectorXd::Zero(lay.dim());

  std::vector<FlowState> flows;
  for (const auto& o : roll) flows.push_back(o.flow);
  SensitivitySystem sys = build_sensitivity_system(s.network, s, flows, K, st.t);

  std::vector<std::pair<int, int>> load_vars;
  std::vector<double> load_weight;  // -gamma^k * priority
  int k = 0;
  double g = 1.0;
  for (const auto& o : roll) {
    if (o.feasible) {
      for (const auto& [id, lp] : s.loads) {
        load_vars.push_back({id, k});
        load_weight.push_back(-g * lp.priority);
      }
    }
    ++k;
    g *= gamma;
  }
  if (!load_vars.empty()) {
    // Power-factor ties route the reactive channel into the gradient.
    Eigen::MatrixXd partials =
        sys.load_partials(load_vars, SensitivitySystem::TieMode::PowerFactor);
    for (size_t i = 0; i < load_vars.size(); ++i)
      u += load_weight[i] * partials.row(static_cast<int>(i));
  }
  // MT generation cost: -gamma^k * cost_coeff on each MT P coordinate.
  g = 1.0;
  for (int kk = 0; kk < K; ++kk) {
    for (int m = 0; m < lay.nmt(); ++m)
      u[lay.mt_p(kk, m)] += -g * s.mt.at(lay.mt_buses()[m]).cost_coeff;
    g *= gamma;
  }
  return u;
}

}  // namespace

QcqpData estimate_qcqp(const Scenario& s, const PolicyParams& p, const StateNormalizer& norm,
                       const SystemState& st, const EstimateOptions& opts, Rng& rng) {
  if (opts.n_samples < 1) throw ConfigError("estimate_qcqp needs at least one sample");
  const int d = p.action_dim;
  const int M = constraint_dim(s);
  Eigen::VectorXd x = norm.normalize(state_vector(s, st));
  GaussianOut g = forward(p, x);
  PolicyJacobians jac = jacobians(p, x);
  const int h = p.num_params();

  Eigen::RowVectorXd mean_u = Eigen::RowVectorXd::Zero(d);
  Eigen::RowVectorXd mean_eps_u = Eigen::RowVectorXd::Zero(d * d);
  Eigen::MatrixXd mean_cj = Eigen::MatrixXd::Zero(M, d);
  Eigen::MatrixXd mean_eps_cj = Eigen::MatrixXd::Zero(M, d * d);
  Eigen::VectorXd mean_c = Eigen::VectorXd::Zero(M);

  std::normal_distribution<double> unit(0.0, 1.0);
  for (int n = 0; n < opts.n_samples; ++n) {
    Eigen::VectorXd eps(d);
    for (int i = 0; i < d; ++i) eps[i] = unit(rng);
    Eigen::VectorXd a = g.L * eps + g.mu;

    auto roll = window_rollout(s, st, a);
    Eigen::RowVectorXd u = reward_grad_wrt_action(s, st, roll, opts.gamma);
    Eigen::VectorXd cv = constraints(s, st, a);
    Eigen::MatrixXd cj = constraints_jacobian(s, st, a);

    mean_u += u;
    mean_c += cv;
    mean_cj += cj;
    // (eps' (x) row) entries: col (c*d + r) = eps_c * row_r.
    for (int c = 0; c < d; ++c) {
      mean_eps_u.segment(c * d, d) += eps[c] * u;
      mean_eps_cj.middleCols(c * d, d) += eps[c] * cj;
    }
  }
  double inv = 1.0 / opts.n_samples;
  mean_u *= inv;
  mean_eps_u *= inv;
  mean_c *= inv;
  mean_cj *= inv;
  mean_eps_cj *= inv;

  QcqpData q;
  q.delta = opts.delta;
  q.a = (mean_eps_u * jac.dvecL + mean_u * jac.dmu).transpose();
  q.B = (mean_eps_cj * jac.dvecL + mean_cj * jac.dmu).transpose();
  q.c = mean_c;
  q.F = std::make_shared<FisherOperator>(g, jac, static_cast<int>(p.theta_mu.size()));
  return q;
}

std::pair<PolicyParams, TrainReport> train(const Scenario& s, const TrainConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  PolicyParams params = init_policy(s, cfg.seed);
  StateNormalizer norm = make_state_normalizer(s);
  TrainReport report;

  for (int ep = 0; ep < cfg.episodes; ++ep) {
    // Slightly different initial stocks per episode (+-5% uniform).
    Scenario s_ep = s;
    Rng pert_rng(derive_seed(cfg.seed, 0x200 + static_cast<std::uint64_t>(ep)));
    std::uniform_real_distribution<double> u5(-0.05, 0.05);
    for (auto& [id, e] : s_ep.ess) {
      e.soc_init = std::min(std::max(e.soc_init * (1.0 + u5(pert_rng)), e.soc_min), e.soc_max);
    }
    for (auto& [id, m] : s_ep.mt) m.fuel_init = std::max(0.0, m.fuel_init * (1.0 + u5(pert_rng)));

    Rng fc_rng(derive_seed(cfg.seed, 0x300 + static_cast<std::uint64_t>(ep)));
    EpisodeForecast fc = make_episode_forecast(s_ep, fc_rng);
    Environment env(s_ep, fc);
    Rng step_rng(derive_seed(cfg.seed, 0x400 + static_cast<std::uint64_t>(ep)));
    std::normal_distribution<double> unit(0.0, 1.0);

    double ep_reward = 0.0;
    for (int t = 1; t <= s.horizon; ++t) {
      SystemState st = env.state();
      try {
        EstimateOptions eo{cfg.n_samples, cfg.delta, cfg.gamma};
        QcqpData q = estimate_qcqp(s_ep, params, norm, st, eo, step_rng);
        QcqpStep step = solve_qcqp(q);
        if (step.diag.mode == QcqpDiagnostics::Mode::Recovery) report.recovery_steps++;
        params.theta_mu += step.step.head(params.theta_mu.size());
        params.theta_sigma += step.step.tail(params.theta_sigma.size());
        report.violation_norms.push_back(std::max(0.0, q.c.maxCoeff()));
      } catch (const std::exception&) {
        report.failed_updates++;  // zero update, episode continues
      }
      // Act with the updated policy.
      Eigen::VectorXd x = norm.normalize(state_vector(s_ep, st));
      Eigen::VectorXd eps(params.action_dim);
      for (int i = 0; i < params.action_dim; ++i) eps[i] = unit(step_rng);
      ActionVector a = sample(params, x, eps);
      auto roll = window_rollout(s_ep, st, a);
      ep_reward += reward(s_ep, st, a, roll, cfg.gamma);
      env.step(a);
    }
    report.episode_reward.push_back(ep_reward);
    if (cfg.checkpoint_every > 0 && cfg.checkpoint_sink && (ep + 1) % cfg.checkpoint_every == 0)
      cfg.checkpoint_sink(ep + 1, params);
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {params, report};
}

std::vector<EvalStep> evaluate_policy(const Scenario& s, const PolicyParams& p,
                                      const StateNormalizer& norm, const EpisodeForecast& fc,
                                      double gamma) {
  Environment env(s, fc);
  std::vector<EvalStep> out;
  for (int t = 1; t <= s.horizon; ++t) {
    SystemState st = env.state();
    Eigen::VectorXd x = norm.normalize(state_vector(s, st));
    GaussianOut g = forward(p, x);
    EvalStep step;
    step.t = t;
    step.action = g.mu;  // exploration off
    step.soc = st.soc;
    step.fuel = st.fuel;
    auto roll = window_rollout(s, st, g.mu);
    step.reward = reward(s, st, g.mu, roll, gamma);
    step.result = env.step(g.mu);
    out.push_back(std::move(step));
  }
  return out;
}

}  // namespace mgres
