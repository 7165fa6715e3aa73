#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "mgres/cmdp.hpp"
#include "mgres/policy.hpp"

namespace mgres {

// Damped Fisher information in factored form. The matrix is block diagonal
// over (theta_mu, theta_sigma) and each block is a low-rank Gram, so
// (F + damping I)^{-1} v goes through Woodbury with d- and d^2-sized Grams
// instead of an h^3 factorization. Algebraically identical to dense solves
// with the matrix fim() materialises.
class FisherOperator {
 public:
  // h_mu: number of leading parameter columns belonging to the mean network.
  FisherOperator(const GaussianOut& g, const PolicyJacobians& jac, int h_mu,
                 double damping = 1e-8);
  // Direct factored form F = blockdiag(a_mu'a_mu, a_sig'a_sig) + damping I.
  FisherOperator(Eigen::MatrixXd a_mu, Eigen::MatrixXd a_sig, double damping);

  int dim() const { return h_mu_ + h_sig_; }
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const;
  Eigen::VectorXd solve(const Eigen::VectorXd& v) const;
  Eigen::MatrixXd solve_many(const Eigen::MatrixXd& V) const;
  double quad(const Eigen::VectorXd& v) const;  // v' (F + damping I) v

 private:
  void factor_grams();

  Eigen::VectorXd solve_once(const Eigen::VectorXd& v) const;

  Eigen::MatrixXd a_mu_;   // d x h_mu : L^{-1} dmu
  Eigen::MatrixXd a_sig_;  // d(d+1)/2 x h_sig : L^{-1} P_i L^{-T}, symmetric-packed
  Eigen::LDLT<Eigen::MatrixXd> gram_mu_;   // damping I + a_mu a_mu'
  Eigen::LDLT<Eigen::MatrixXd> gram_sig_;
  double damping_;
  int h_mu_ = 0, h_sig_ = 0;
};

// Theorem-style QCQP data: linearised objective gradient a, constraint
// gradients B with values c, the Fisher operator, and the trust radius.
struct QcqpData {
  Eigen::VectorXd a;  // h
  Eigen::MatrixXd B;  // h x M
  Eigen::VectorXd c;  // M
  std::shared_ptr<FisherOperator> F;
  double delta = 0.0;
};

struct QcqpDiagnostics {
  enum class Mode { Zero, NaturalGradient, Dual, Recovery };
  Mode mode = Mode::Zero;
  int dual_iterations = 0;
  bool dual_converged = true;
  std::vector<double> dual_values;  // per sweep, nonincreasing (minimisation)
  Eigen::VectorXd nu;
  double lambda = 0.0;
};

struct QcqpStep {
  Eigen::VectorXd step;
  QcqpDiagnostics diag;
};

// Trust-region subproblem: max a'x s.t. B'x + c <= 0, x'Fx <= delta.
// Natural-gradient fast path when no linear row is active; otherwise the
// concave dual over (nu >= 0, lambda) by coordinate minimisation; recovery
// step along the most-violated constraint when infeasible within the region.
QcqpStep solve_qcqp(const QcqpData& q);

struct EstimateOptions {
  int n_samples = 40;
  double delta = 0.1;
  double gamma = 0.9;
};

// Monte Carlo assembly of the QCQP at one state: for each standard-normal
// draw, chain dR/da (analytic MT terms plus the load sensitivities from the
// differential system) and dC/da through the policy Jacobians, then average.
QcqpData estimate_qcqp(const Scenario& s, const PolicyParams& p, const StateNormalizer& norm,
                       const SystemState& st, const EstimateOptions& opts, Rng& rng);

struct TrainConfig {
  int episodes = 200;
  int n_samples = 40;
  double delta = 0.1;
  double gamma = 0.9;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;  // 0 disables
  std::function<void(int episode, const PolicyParams&)> checkpoint_sink;
};

struct TrainReport {
  std::vector<double> episode_reward;
  std::vector<double> violation_norms;  // max positive constraint value per update
  int recovery_steps = 0;
  int failed_updates = 0;
  double wall_seconds = 0.0;
};

// Episodic CPO: each episode perturbs the initial SoC and fuel by +-5%,
// rolls the environment for T steps and applies one QCQP update per step
// (theta carries across episodes). Actions are sampled from the freshly
// updated policy.
std::pair<PolicyParams, TrainReport> train(const Scenario& s, const TrainConfig& cfg);

// Greedy evaluation (action = mu) over one episode with the given forecast.
struct EvalStep {
  int t = 0;
  ActionVector action;
  std::map<int, double> soc;   // start-of-step stocks
  std::map<int, double> fuel;
  TransitionResult result;
  double reward = 0.0;
};
std::vector<EvalStep> evaluate_policy(const Scenario& s, const PolicyParams& p,
                                      const StateNormalizer& norm, const EpisodeForecast& fc,
                                      double gamma);

}  // namespace mgres
