#include <cmath>

#include "doctest.h"
#include "mgres/cpo.hpp"
#include "test_util.hpp"

using namespace mgres;

namespace {

std::shared_ptr<FisherOperator> identity_fisher(int h) {
  return std::make_shared<FisherOperator>(Eigen::MatrixXd::Identity(h, h),
                                          Eigen::MatrixXd(0, 0), 1e-12);
}

// Dense grid search over the trust-region disk for 2-d toy instances.
double qcqp_grid_oracle(const Eigen::VectorXd& a, const Eigen::MatrixXd& B,
                        const Eigen::VectorXd& c, double delta) {
  double best = -1e30;
  double r = std::sqrt(delta);
  int n = 700;
  for (int i = -n; i <= n; ++i)
    for (int j = -n; j <= n; ++j) {
      Eigen::Vector2d x(r * i / n, r * j / n);
      if (x.squaredNorm() > delta) continue;
      if (((B.transpose() * x + c).array() > 1e-12).any()) continue;
      best = std::max(best, a.dot(x));
    }
  return best;
}

Scenario small_cpo_scenario() {
  // 3-bus: MT slack, ESS, one load; purely resistive.
  Scenario s;
  s.name = "cpo3";
  s.horizon = 3;
  s.dt = 1.0;
  s.v_min = 0.9;
  s.v_max = 1.1;
  s.epsilon = 1.0;
  s.mpc_lookahead = 1;
  s.cpo_lookahead = 1;
  s.polygon_sides = 11;
  s.rng_seed = 5;
  s.network.slack_bus = 1;
  s.network.buses = {{1, BusKind::Microturbine}, {2, BusKind::Storage}, {3, BusKind::Load}};
  s.network.lines = {{1, 2, 0.008, 0.0, 0.09}, {1, 3, 0.01, 0.0, 0.09}};
  MtParams m;
  m.p_min = 0.0;
  m.p_max = 0.25;
  m.ramp_up_max = 0.25;
  m.ramp_down_min = -0.25;
  m.tau = 0.5;
  m.fuel_init = 5.0;
  m.cost_coeff = 0.1;
  m.q_max = 0.3;
  s.mt[1] = m;
  EssParams e;
  e.p_ch_max = 0.1;
  e.p_dis_max = 0.1;
  e.soc_min = 0.2;
  e.soc_max = 2.0;
  e.soc_init = 1.0;
  e.eta_ch = 0.9;
  e.eta_dis = 0.9;
  e.q_max = 0.2;
  s.ess[2] = e;
  LoadParams lp;
  lp.p_demand.assign(5, 0.3);
  lp.q_demand.assign(5, 0.0);
  lp.priority = 1.0;
  s.loads[3] = lp;
  return s;
}

}  // namespace

TEST_CASE("fisher operator agrees with the materialised matrix") {
  Scenario s = small_cpo_scenario();
  PolicyParams p = init_policy(s, 3);
  StateNormalizer n = make_state_normalizer(s);
  Rng rng(derive_seed(s.rng_seed, 1));
  EpisodeForecast fc = make_episode_forecast(s, rng);
  SystemState st = initial_state(s, fc);
  Eigen::VectorXd x = n.normalize(state_vector(s, st));
  GaussianOut g = forward(p, x);
  PolicyJacobians jac = jacobians(p, x);
  Eigen::MatrixXd F = fim(p, x);
  FisherOperator op(g, jac, static_cast<int>(p.theta_mu.size()));

  Rng vr(7);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (int k = 0; k < 5; ++k) {
    Eigen::VectorXd v(p.num_params());
    for (int i = 0; i < v.size(); ++i) v[i] = unit(vr);
    Eigen::VectorXd lhs = op.apply(v);
    Eigen::VectorXd rhs = F * v;
    CHECK((lhs - rhs).norm() <= 1e-8 * std::max(1.0, rhs.norm()));
    // Solve accuracy where it matters: gradients live in the row space, so
    // probe with w = F v (null components of a damped low-rank operator are
    // not recoverable to full precision and are never used).
    Eigen::VectorXd w = op.apply(v);
    Eigen::VectorXd back = op.apply(op.solve(w));
    CHECK((back - w).norm() <= 1e-6 * std::max(1.0, w.norm()));
    CHECK(op.quad(v) == doctest::Approx(v.dot(F * v)).epsilon(1e-7));
  }
}

TEST_CASE("natural gradient closed form: F=I, a=(1,0), delta=0.1") {
  QcqpData q;
  q.a = Eigen::Vector2d(1.0, 0.0);
  q.B = Eigen::MatrixXd(2, 0);
  q.c = Eigen::VectorXd(0);
  q.F = identity_fisher(2);
  q.delta = 0.1;
  QcqpStep st = solve_qcqp(q);
  CHECK(st.diag.mode == QcqpDiagnostics::Mode::NaturalGradient);
  CHECK(st.step[0] == doctest::Approx(std::sqrt(0.1)).epsilon(1e-10));
  CHECK(std::abs(st.step[1]) <= 1e-10);
}

TEST_CASE("no ascent direction yields the zero step") {
  QcqpData q;
  q.a = Eigen::Vector2d::Zero();
  q.B = Eigen::MatrixXd::Zero(2, 1);
  q.B(0, 0) = 1.0;
  q.c = Eigen::VectorXd::Constant(1, -0.5);
  q.F = identity_fisher(2);
  q.delta = 0.1;
  QcqpStep st = solve_qcqp(q);
  CHECK(st.step.norm() == 0.0);

  q.delta = 0.0;  // degenerate trust region: every step collapses
  q.a = Eigen::Vector2d(1.0, 1.0);
  CHECK(solve_qcqp(q).step.norm() == 0.0);
}

TEST_CASE("toy constrained instances match a dense grid search") {
  struct Case {
    Eigen::Vector2d a;
    Eigen::Vector2d b;
    double c;
  };
  std::vector<Case> cases = {
      {{1.0, 0.2}, {1.0, 0.0}, -0.05},   // constraint active at the optimum
      {{0.3, 1.0}, {0.5, 0.5}, -0.01},
      {{1.0, -0.4}, {-0.2, 1.0}, -0.2},  // inactive constraint
  };
  for (const auto& tc : cases) {
    QcqpData q;
    q.a = tc.a;
    q.B = tc.b;
    q.c = Eigen::VectorXd::Constant(1, tc.c);
    q.F = identity_fisher(2);
    q.delta = 0.1;
    QcqpStep st = solve_qcqp(q);
    double obj = q.a.dot(st.step);
    double oracle = qcqp_grid_oracle(q.a, q.B, q.c, q.delta);
    CHECK(obj == doctest::Approx(oracle).epsilon(2e-3));
    CHECK(st.step.squaredNorm() <= q.delta * (1.0 + 1e-6));
    CHECK((q.B.transpose() * st.step + q.c).maxCoeff() <= 1e-8);
    // The minimised dual never increases between sweeps.
    for (size_t i = 1; i < st.diag.dual_values.size(); ++i)
      CHECK(st.diag.dual_values[i] <= st.diag.dual_values[i - 1] + 1e-12);
  }
}

TEST_CASE("infeasible subproblems take the recovery step") {
  QcqpData q;
  q.a = Eigen::Vector2d(1.0, 0.0);
  q.B = Eigen::Vector2d(0.0, 1.0);
  q.c = Eigen::VectorXd::Constant(1, 5.0);  // unreachable within the region
  q.F = identity_fisher(2);
  q.delta = 0.1;
  QcqpStep st = solve_qcqp(q);
  CHECK(st.diag.mode == QcqpDiagnostics::Mode::Recovery);
  // Pure constraint reduction along the violated gradient.
  CHECK((q.B.transpose() * st.step)(0) < 0.0);
  CHECK(st.step.squaredNorm() <= q.delta * (1.0 + 1e-6));
}

TEST_CASE("deterministic-policy limit: the epsilon term vanishes") {
  Scenario s = small_cpo_scenario();
  PolicyParams p = init_policy(s, 9);
  // Push every diagonal output bias far negative: L collapses to the floor.
  int bias_off = p.chol_spec.num_params() - p.chol_spec.output_dim;
  ActionLayout lay(s.network, s.cpo_lookahead);
  int idx = 0;
  for (int i = 0; i < lay.dim(); ++i)
    for (int j = 0; j <= i; ++j, ++idx)
      p.theta_sigma[bias_off + idx] = i == j ? -40.0 : p.theta_sigma[bias_off + idx];
  p.theta_sigma.head(bias_off).setZero();  // no state dependence in the factor

  StateNormalizer n = make_state_normalizer(s);
  Rng rng1(derive_seed(s.rng_seed, 1));
  EpisodeForecast fc = make_episode_forecast(s, rng1);
  SystemState st = initial_state(s, fc);

  EstimateOptions eo;
  eo.n_samples = 1;
  eo.delta = 0.1;
  eo.gamma = 0.9;
  Rng ra(100), rb(20231);
  QcqpData qa = estimate_qcqp(s, p, n, st, eo, ra);
  QcqpData qb = estimate_qcqp(s, p, n, st, eo, rb);
  // With L at the floor all sampled actions collapse onto mu, so the
  // mean-parameter block reduces to the chain-rule gradient through mu alone
  // and no longer depends on the draws. (The sigma block keeps a zero-mean
  // epsilon term that only vanishes in expectation.)
  int h_mu = static_cast<int>(p.theta_mu.size());
  CHECK((qa.a.head(h_mu) - qb.a.head(h_mu)).cwiseAbs().maxCoeff() <=
        1e-6 * std::max(1.0, qa.a.head(h_mu).cwiseAbs().maxCoeff()));
  CHECK((qa.c - qb.c).cwiseAbs().maxCoeff() <= 1e-5);
}

TEST_CASE("monte-carlo estimates agree within sampling error") {
  Scenario s = small_cpo_scenario();
  PolicyParams p = init_policy(s, 11);
  StateNormalizer n = make_state_normalizer(s);
  Rng rng1(derive_seed(s.rng_seed, 1));
  EpisodeForecast fc = make_episode_forecast(s, rng1);
  SystemState st = initial_state(s, fc);

  EstimateOptions eo;
  eo.n_samples = 160;
  Rng ra(1), rb(2);
  QcqpData qa = estimate_qcqp(s, p, n, st, eo, ra);
  QcqpData qb = estimate_qcqp(s, p, n, st, eo, rb);
  double scale = std::max(qa.a.norm(), qb.a.norm());
  CHECK((qa.a - qb.a).norm() <= 0.5 * scale);  // loose 3-sigma style bound
}

TEST_CASE("linear constraint rows chain through the mean jacobian") {
  Scenario s = small_cpo_scenario();
  PolicyParams p = init_policy(s, 9);
  int bias_off = p.chol_spec.num_params() - p.chol_spec.output_dim;
  ActionLayout lay(s.network, s.cpo_lookahead);
  int idx = 0;
  for (int i = 0; i < lay.dim(); ++i)
    for (int j = 0; j <= i; ++j, ++idx)
      if (i == j) p.theta_sigma[bias_off + idx] = -40.0;
  p.theta_sigma.head(bias_off).setZero();

  StateNormalizer n = make_state_normalizer(s);
  Rng rng1(derive_seed(s.rng_seed, 1));
  EpisodeForecast fc = make_episode_forecast(s, rng1);
  SystemState st = initial_state(s, fc);
  Eigen::VectorXd x = n.normalize(state_vector(s, st));
  PolicyJacobians jac = jacobians(p, x);

  EstimateOptions eo;
  eo.n_samples = 1;
  Rng ra(5);
  QcqpData q = estimate_qcqp(s, p, n, st, eo, ra);
  // Constraint row 0 is the MT upper bound at window step 0: dC/da is the
  // unit vector on that coordinate, so the mean-parameter block of the B
  // column equals the dmu row for that coordinate.
  int coord = lay.mt_p(0, 0);
  int h_mu = static_cast<int>(p.theta_mu.size());
  Eigen::VectorXd expected = jac.dmu.row(coord).head(h_mu).transpose();
  CHECK((q.B.col(0).head(h_mu) - expected).cwiseAbs().maxCoeff() <=
        1e-6 * std::max(1.0, expected.cwiseAbs().maxCoeff()));
}

TEST_CASE("zero episodes leave the parameters at initialisation") {
  Scenario s = small_cpo_scenario();
  TrainConfig cfg;
  cfg.episodes = 0;
  cfg.seed = s.rng_seed;
  auto [params, report] = train(s, cfg);
  PolicyParams fresh = init_policy(s, cfg.seed);
  CHECK(params.theta_mu == fresh.theta_mu);
  CHECK(params.theta_sigma == fresh.theta_sigma);
  CHECK(report.episode_reward.empty());
}

TEST_CASE("zero trust region freezes the policy through an episode") {
  Scenario s = small_cpo_scenario();
  TrainConfig cfg;
  cfg.episodes = 1;
  cfg.n_samples = 2;
  cfg.delta = 0.0;
  cfg.seed = s.rng_seed;
  auto [params, report] = train(s, cfg);
  PolicyParams fresh = init_policy(s, cfg.seed);
  CHECK(params.theta_mu == fresh.theta_mu);
  CHECK(params.theta_sigma == fresh.theta_sigma);
  CHECK(report.episode_reward.size() == 1);
}

TEST_CASE("updates respect the trust region and the KL bound") {
  Scenario s = small_cpo_scenario();
  PolicyParams p = init_policy(s, 13);
  StateNormalizer n = make_state_normalizer(s);
  Rng rng1(derive_seed(s.rng_seed, 2));
  EpisodeForecast fc = make_episode_forecast(s, rng1);
  Environment env(s, fc);
  Rng er(3);
  std::normal_distribution<double> unit(0.0, 1.0);

  EstimateOptions eo;
  eo.n_samples = 8;
  eo.delta = 0.1;
  for (int t = 1; t <= s.horizon; ++t) {
    SystemState st = env.state();
    Eigen::VectorXd x = n.normalize(state_vector(s, st));
    QcqpData q = estimate_qcqp(s, p, n, st, eo, er);
    QcqpStep step = solve_qcqp(q);
    double quad = step.step.dot(q.F->apply(step.step));
    CHECK(quad <= eo.delta * (1.0 + 1e-6));

    PolicyParams p_new = p;
    p_new.theta_mu += step.step.head(p.theta_mu.size());
    p_new.theta_sigma += step.step.tail(p.theta_sigma.size());
    double kl = gaussian_kl(forward(p_new, x), forward(p, x));
    CHECK(kl <= 1.5 * eo.delta);
    p = p_new;

    Eigen::VectorXd eps(p.action_dim);
    for (int i = 0; i < eps.size(); ++i) eps[i] = unit(er);
    env.step(sample(p, x, eps));
  }
}
