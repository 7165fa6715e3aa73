#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "mgres/scenario.hpp"

namespace mgres {

// Feedforward network shape: tanh hidden layers, linear output. Parameters
// are flattened per layer as W (row-major, out x in) then b.
struct FnnSpec {
  int input_dim = 0;
  std::vector<int> hidden;
  int output_dim = 0;

  int num_params() const;
  bool operator==(const FnnSpec&) const = default;
};

// theta = (theta_mu, theta_sigma): the mean network and the Cholesky-factor
// network. The factor net's output_dim must be d(d+1)/2 for action dim d.
struct PolicyParams {
  FnnSpec mean_spec;
  FnnSpec chol_spec;
  Eigen::VectorXd theta_mu;
  Eigen::VectorXd theta_sigma;
  int action_dim = 0;

  int num_params() const { return static_cast<int>(theta_mu.size() + theta_sigma.size()); }
};

struct GaussianOut {
  Eigen::VectorXd mu;  // length d
  Eigen::MatrixXd L;   // lower triangular, diagonal >= 1e-6
};

constexpr double kDiagFloor = 1e-6;

// Network evaluations y = f(theta, x).
Eigen::VectorXd fnn_eval(const FnnSpec& spec, const Eigen::VectorXd& theta,
                         const Eigen::VectorXd& x);
// y and the exact reverse-mode Jacobian dy/dtheta (out x params).
std::pair<Eigen::VectorXd, Eigen::MatrixXd> fnn_eval_jacobian(const FnnSpec& spec,
                                                              const Eigen::VectorXd& theta,
                                                              const Eigen::VectorXd& x);

// Policy head: mean from the mean net; the factor net's d(d+1)/2 outputs fill
// the lower triangle row-wise, diagonal entries through softplus + floor.
GaussianOut forward(const PolicyParams& p, const Eigen::VectorXd& x);

// Reparametrised draw a = L*eps + mu.
Eigen::VectorXd sample(const PolicyParams& p, const Eigen::VectorXd& x,
                       const Eigen::VectorXd& eps);

struct PolicyJacobians {
  Eigen::MatrixXd dmu;    // d x h        (theta_sigma columns zero)
  Eigen::MatrixXd dvecL;  // d^2 x h      (theta_mu columns zero; column-major vec)
};

PolicyJacobians jacobians(const PolicyParams& p, const Eigen::VectorXd& x);

// Fisher information of the Gaussian policy at x, assembled from the closed
// form (mean term plus trace term), symmetrised and damped by 1e-8 I.
// Materialises the full h x h matrix; meant for small nets and tests — the
// trainer works with the factored form instead.
Eigen::MatrixXd fim(const PolicyParams& p, const Eigen::VectorXd& x);

// KL(p_new || p_old) for Gaussians given by (mu, L).
double gaussian_kl(const GaussianOut& pn, const GaussianOut& po);

// Affine per-entry state scaling so network inputs sit near [-1, 1].
struct StateNormalizer {
  Eigen::VectorXd center;
  Eigen::VectorXd scale;

  Eigen::VectorXd normalize(const Eigen::VectorXd& x) const {
    return (x - center).cwiseQuotient(scale);
  }
};

StateNormalizer make_state_normalizer(const Scenario& s);

// Per-coordinate action spans used to set the initial policy spread.
Eigen::VectorXd action_scales(const Scenario& s);

// Small fan-in-scaled uniform weights; the factor net's output bias seeds the
// initial diagonal at sigma_frac of each action scale.
PolicyParams init_policy(const Scenario& s, std::uint64_t seed, double sigma_frac = 0.05);

// Versioned checkpoint with exact round-trip of all parameters.
void save_checkpoint(const PolicyParams& p, const StateNormalizer& n, const std::string& path);
std::pair<PolicyParams, StateNormalizer> load_checkpoint(const std::string& path);

}  // namespace mgres
