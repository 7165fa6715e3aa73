#include <cmath>

#include "doctest.h"
#include "mgres/policy.hpp"
#include "test_util.hpp"

using namespace mgres;

namespace {

PolicyParams tiny_policy(int input, std::vector<int> mean_hidden, std::vector<int> chol_hidden,
                         int d, std::uint64_t seed) {
  PolicyParams p;
  p.action_dim = d;
  p.mean_spec = FnnSpec{input, std::move(mean_hidden), d};
  p.chol_spec = FnnSpec{input, std::move(chol_hidden), d * (d + 1) / 2};
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  p.theta_mu.resize(p.mean_spec.num_params());
  p.theta_sigma.resize(p.chol_spec.num_params());
  for (int i = 0; i < p.theta_mu.size(); ++i) p.theta_mu[i] = u(rng);
  for (int i = 0; i < p.theta_sigma.size(); ++i) p.theta_sigma[i] = u(rng);
  return p;
}

double softplus(double x) { return std::log1p(std::exp(x)); }

}  // namespace

TEST_CASE("zero-weight network outputs its biases") {
  PolicyParams p = tiny_policy(3, {4}, {4}, 2, 1);
  p.theta_mu.setZero();
  p.theta_sigma.setZero();
  Eigen::VectorXd x(3);
  x << 0.3, -0.2, 0.9;
  GaussianOut g = forward(p, x);
  CHECK(g.mu.isZero(0.0));
  for (int i = 0; i < 2; ++i) {
    CHECK(g.L(i, i) == doctest::Approx(softplus(0.0) + kDiagFloor));
    for (int j = 0; j < i; ++j) CHECK(g.L(i, j) == 0.0);
  }
}

TEST_CASE("single linear layer: mu = w * s") {
  PolicyParams p = tiny_policy(1, {}, {}, 1, 2);
  p.theta_mu << 1.7, 0.0;  // weight, bias
  Eigen::VectorXd x(1);
  x << 0.4;
  CHECK(forward(p, x).mu[0] == doctest::Approx(1.7 * 0.4));
}

TEST_CASE("covariance factor is lower triangular and positive definite") {
  for (int k = 0; k < 10; ++k) {
    PolicyParams p = tiny_policy(4, {6, 5}, {7}, 3, 100 + k);
    Eigen::VectorXd x = Eigen::VectorXd::Random(4);
    GaussianOut g = forward(p, x);
    for (int i = 0; i < 3; ++i)
      for (int j = i + 1; j < 3; ++j) CHECK(g.L(i, j) == 0.0);
    Eigen::MatrixXd sigma = g.L * g.L.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sigma);
    CHECK(es.eigenvalues().minCoeff() > 0.0);
    CHECK((sigma - sigma.transpose()).cwiseAbs().maxCoeff() <= 1e-15);
  }
}

TEST_CASE("reparametrised sampling") {
  PolicyParams p = tiny_policy(2, {4}, {4}, 2, 3);
  Eigen::VectorXd x(2);
  x << 0.1, -0.4;
  GaussianOut g = forward(p, x);
  CHECK((sample(p, x, Eigen::VectorXd::Zero(2)) - g.mu).cwiseAbs().maxCoeff() == 0.0);

  // Scalar affine case: a = L*eps + mu = 2*1 + 3.
  PolicyParams q = tiny_policy(1, {}, {}, 1, 4);
  q.theta_mu << 0.0, 3.0;
  q.theta_sigma << 0.0, std::log(std::expm1(2.0 - kDiagFloor));
  Eigen::VectorXd xs(1), eps(1);
  xs << 0.0;
  eps << 1.0;
  CHECK(sample(q, xs, eps)[0] == doctest::Approx(5.0));
}

TEST_CASE("sample covariance converges to L L^T") {
  PolicyParams p = tiny_policy(2, {5}, {5}, 2, 6);
  Eigen::VectorXd x(2);
  x << 0.2, 0.5;
  GaussianOut g = forward(p, x);
  Eigen::MatrixXd sigma = g.L * g.L.transpose();
  Rng rng(99);
  std::normal_distribution<double> unit(0.0, 1.0);
  int n = 10000;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(2);
  Eigen::MatrixXd outer = Eigen::MatrixXd::Zero(2, 2);
  for (int k = 0; k < n; ++k) {
    Eigen::VectorXd eps(2);
    eps << unit(rng), unit(rng);
    Eigen::VectorXd a = sample(p, x, eps);
    mean += a;
    outer += a * a.transpose();
  }
  mean /= n;
  Eigen::MatrixXd cov = outer / n - mean * mean.transpose();
  CHECK((cov - sigma).norm() <= 0.05 * sigma.norm());
}

TEST_CASE("analytic jacobians match central finite differences") {
  for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
    PolicyParams p = tiny_policy(3, {4, 4}, {5}, 2, seed);
    Eigen::VectorXd x = Eigen::VectorXd::Random(3);
    PolicyJacobians J = jacobians(p, x);
    const int h_mu = static_cast<int>(p.theta_mu.size());
    const int h = p.num_params();
    const double step = 1e-5;

    double scale_mu = std::max(1.0, J.dmu.cwiseAbs().maxCoeff());
    double scale_L = std::max(1.0, J.dvecL.cwiseAbs().maxCoeff());
    for (int j = 0; j < h; ++j) {
      PolicyParams pp = p, pm = p;
      if (j < h_mu) {
        pp.theta_mu[j] += step;
        pm.theta_mu[j] -= step;
      } else {
        pp.theta_sigma[j - h_mu] += step;
        pm.theta_sigma[j - h_mu] -= step;
      }
      GaussianOut gp = forward(pp, x), gm = forward(pm, x);
      Eigen::VectorXd dmu_fd = (gp.mu - gm.mu) / (2.0 * step);
      CHECK((J.dmu.col(j) - dmu_fd).cwiseAbs().maxCoeff() <= 1e-6 * scale_mu);
      Eigen::MatrixXd dL_fd = (gp.L - gm.L) / (2.0 * step);
      Eigen::Map<Eigen::VectorXd> dL_vec(dL_fd.data(), 4);
      CHECK((J.dvecL.col(j) - dL_vec).cwiseAbs().maxCoeff() <= 1e-6 * scale_L);
    }
    // Decoupled parameter blocks.
    CHECK(J.dmu.rightCols(p.theta_sigma.size()).isZero(0.0));
    CHECK(J.dvecL.leftCols(h_mu).isZero(0.0));
  }
}

TEST_CASE("scalar Fisher information closed forms") {
  // Fixed sigma, mean mu = w*s + b: the (w,w) entry is s^2 / sigma^2.
  PolicyParams p = tiny_policy(1, {}, {}, 1, 21);
  p.theta_mu << 0.7, 0.1;
  p.theta_sigma << 0.0, 0.3;
  Eigen::VectorXd x(1);
  x << 0.6;
  GaussianOut g = forward(p, x);
  double sigma = g.L(0, 0);
  Eigen::MatrixXd F = fim(p, x);
  // The 1e-8 diagonal damping sits on top of the closed form.
  CHECK(F(0, 0) - 1e-8 == doctest::Approx(0.6 * 0.6 / (sigma * sigma)).epsilon(1e-12));

  // Fixed mean, sigma(theta): the (w_sigma, w_sigma) entry is 2 sigma'^2 / sigma^2.
  double raw = p.theta_sigma[0] * 0.6 + p.theta_sigma[1];
  double dsig_dw = 1.0 / (1.0 + std::exp(-raw)) * 0.6;
  CHECK(F(2, 2) - 1e-8 == doctest::Approx(2.0 * dsig_dw * dsig_dw / (sigma * sigma)).epsilon(1e-12));
}

TEST_CASE("Fisher matrix is symmetric positive semidefinite") {
  for (std::uint64_t seed : {31ull, 32ull, 33ull, 34ull}) {
    PolicyParams p = tiny_policy(3, {4}, {4}, 2, seed);
    Eigen::VectorXd x = Eigen::VectorXd::Random(3);
    Eigen::MatrixXd F = fim(p, x);
    CHECK((F - F.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(F);
    CHECK(es.eigenvalues().minCoeff() >= -1e-10);
  }
}

TEST_CASE("quadratic KL model agrees with the exact Gaussian divergence") {
  Rng rng(40);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (std::uint64_t seed : {41ull, 42ull, 43ull}) {
    PolicyParams p = tiny_policy(3, {5}, {5}, 2, seed);
    Eigen::VectorXd x = Eigen::VectorXd::Random(3);
    Eigen::MatrixXd F = fim(p, x);
    const int h = p.num_params();
    Eigen::VectorXd dtheta(h);
    for (int i = 0; i < h; ++i) dtheta[i] = unit(rng);
    dtheta *= 1e-3 / dtheta.norm();

    PolicyParams p2 = p;
    p2.theta_mu += dtheta.head(p.theta_mu.size());
    p2.theta_sigma += dtheta.tail(p.theta_sigma.size());
    double kl = gaussian_kl(forward(p2, x), forward(p, x));
    double quad = 0.5 * dtheta.dot(F * dtheta);
    CHECK(kl == doctest::Approx(quad).epsilon(0.10));
  }
}

TEST_CASE("checkpoints round-trip exactly") {
  Scenario s = load_scenario(testutil::data_path("case12da.json"));
  PolicyParams p = init_policy(s, 77);
  StateNormalizer n = make_state_normalizer(s);
  std::string path = "/tmp/mgres_test_checkpoint.json";
  save_checkpoint(p, n, path);
  auto [p2, n2] = load_checkpoint(path);
  CHECK(p2.action_dim == p.action_dim);
  CHECK(p2.mean_spec == p.mean_spec);
  CHECK(p2.chol_spec == p.chol_spec);
  CHECK(p2.theta_mu == p.theta_mu);
  CHECK(p2.theta_sigma == p.theta_sigma);
  CHECK(n2.center == n.center);
  CHECK(n2.scale == n.scale);
}

TEST_CASE("state normalization keeps in-range states near the unit box") {
  Scenario s = load_scenario(testutil::data_path("case12da.json"));
  Rng rng(derive_seed(s.rng_seed, 1));
  auto fc = sample_res_forecast(s, 1, s.horizon + s.cpo_lookahead - 1, rng);
  SystemState st = initial_state(s, fc);
  StateNormalizer n = make_state_normalizer(s);
  Eigen::VectorXd z = n.normalize(state_vector(s, st));
  CHECK(z.cwiseAbs().maxCoeff() <= 2.0);
}

TEST_CASE("initial policy spread follows the action scales") {
  Scenario s = load_scenario(testutil::data_path("case12da.json"));
  PolicyParams p = init_policy(s, 7, 0.05);
  StateNormalizer n = make_state_normalizer(s);
  Rng rng(derive_seed(s.rng_seed, 1));
  auto fc = sample_res_forecast(s, 1, s.horizon + s.cpo_lookahead - 1, rng);
  SystemState st = initial_state(s, fc);
  GaussianOut g = forward(p, n.normalize(state_vector(s, st)));
  Eigen::VectorXd scales = action_scales(s);
  for (int i = 0; i < p.action_dim; ++i) {
    CHECK(g.L(i, i) > 0.01 * scales[i]);
    CHECK(g.L(i, i) < 0.5 * std::max(scales[i], 0.05));
  }
}
