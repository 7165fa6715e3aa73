#include "mgres/policy.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mgres/cmdp.hpp"

namespace mgres {

using nlohmann::json;

int FnnSpec::num_params() const {
  int n = 0;
  int in = input_dim;
  for (int hsize : hidden) {
    n += hsize * in + hsize;
    in = hsize;
  }
  n += output_dim * in + output_dim;
  return n;
}

namespace {

double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}
double softplus_deriv(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct ForwardCache {
  std::vector<Eigen::VectorXd> activations;  // z_0 = x, then post-tanh per hidden
  Eigen::VectorXd output;
};

ForwardCache fnn_forward(const FnnSpec& spec, const Eigen::VectorXd& theta,
                         const Eigen::VectorXd& x) {
  if (x.size() != spec.input_dim) throw ConfigError("network input dimension mismatch");
  if (theta.size() != spec.num_params()) throw ConfigError("network parameter size mismatch");
  ForwardCache c;
  c.activations.push_back(x);
  int off = 0;
  Eigen::VectorXd z = x;
  int in = spec.input_dim;
  for (int hsize : spec.hidden) {
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W(
        theta.data() + off, hsize, in);
    off += hsize * in;
    Eigen::Map<const Eigen::VectorXd> b(theta.data() + off, hsize);
    off += hsize;
    z = (W * z + b).array().tanh().matrix();
    c.activations.push_back(z);
    in = hsize;
  }
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W(
      theta.data() + off, spec.output_dim, in);
  off += spec.output_dim * in;
  Eigen::Map<const Eigen::VectorXd> b(theta.data() + off, spec.output_dim);
  c.output = W * z + b;
  return c;
}

}  // namespace

Eigen::VectorXd fnn_eval(const FnnSpec& spec, const Eigen::VectorXd& theta,
                         const Eigen::VectorXd& x) {
  return fnn_forward(spec, theta, x).output;
}

std::pair<Eigen::VectorXd, Eigen::MatrixXd> fnn_eval_jacobian(const FnnSpec& spec,
                                                              const Eigen::VectorXd& theta,
                                                              const Eigen::VectorXd& x) {
  ForwardCache c = fnn_forward(spec, theta, x);
  const int out = spec.output_dim;
  const int nlay = static_cast<int>(spec.hidden.size());
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(out, spec.num_params());

  // G_l = d output / d preactivation of layer l (out x width_l), built from
  // the output layer backwards.
  std::vector<int> widths;
  widths.push_back(spec.input_dim);
  for (int hsize : spec.hidden) widths.push_back(hsize);

  // Parameter offsets per layer.
  std::vector<int> w_off(nlay + 1), b_off(nlay + 1);
  {
    int off = 0;
    for (int l = 0; l < nlay; ++l) {
      w_off[l] = off;
      off += spec.hidden[l] * widths[l];
      b_off[l] = off;
      off += spec.hidden[l];
    }
    w_off[nlay] = off;
    off += out * widths[nlay];
    b_off[nlay] = off;
  }

  // Output layer is linear: G = I.
  Eigen::MatrixXd G = Eigen::MatrixXd::Identity(out, out);
  for (int l = nlay; l >= 0; --l) {
    int rows = l == nlay ? out : spec.hidden[l];
    int in = widths[l];
    const Eigen::VectorXd& z_in = c.activations[l];
    // dW(i,j) = G(:,i) * z_in(j), row-major W flattening.
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < in; ++j) J.col(w_off[l] + i * in + j) += G.col(i) * z_in[j];
    for (int i = 0; i < rows; ++i) J.col(b_off[l] + i) += G.col(i);
    if (l > 0) {
      // Chain into the previous hidden layer through W_l and tanh'.
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W(
          theta.data() + w_off[l], rows, in);
      Eigen::ArrayXd dtanh = 1.0 - c.activations[l].array().square();
      G = (G * W).array().rowwise() * dtanh.transpose();
    }
  }
  return {c.output, J};
}

GaussianOut forward(const PolicyParams& p, const Eigen::VectorXd& x) {
  const int d = p.action_dim;
  GaussianOut g;
  g.mu = fnn_eval(p.mean_spec, p.theta_mu, x);
  Eigen::VectorXd raw = fnn_eval(p.chol_spec, p.theta_sigma, x);
  g.L = Eigen::MatrixXd::Zero(d, d);
  int idx = 0;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j <= i; ++j, ++idx)
      g.L(i, j) = i == j ? softplus(raw[idx]) + kDiagFloor : raw[idx];
  return g;
}

Eigen::VectorXd sample(const PolicyParams& p, const Eigen::VectorXd& x,
                       const Eigen::VectorXd& eps) {
  GaussianOut g = forward(p, x);
  if (eps.size() != g.mu.size()) throw ConfigError("epsilon dimension mismatch");
  return g.L * eps + g.mu;
}

PolicyJacobians jacobians(const PolicyParams& p, const Eigen::VectorXd& x) {
  const int d = p.action_dim;
  const int h_mu = static_cast<int>(p.theta_mu.size());
  const int h_sig = static_cast<int>(p.theta_sigma.size());
  PolicyJacobians out;
  auto [mu, Jmu] = fnn_eval_jacobian(p.mean_spec, p.theta_mu, x);
  out.dmu = Eigen::MatrixXd::Zero(d, h_mu + h_sig);
  out.dmu.leftCols(h_mu) = Jmu;

  auto [raw, Jraw] = fnn_eval_jacobian(p.chol_spec, p.theta_sigma, x);
  out.dvecL = Eigen::MatrixXd::Zero(d * d, h_mu + h_sig);
  int idx = 0;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j <= i; ++j, ++idx) {
      double chain = i == j ? softplus_deriv(raw[idx]) : 1.0;
      // vec(L) is column-major: entry (i, j) -> row j*d + i.
      out.dvecL.row(j * d + i).tail(h_sig) = chain * Jraw.row(idx);
    }
  return out;
}

Eigen::MatrixXd fim(const PolicyParams& p, const Eigen::VectorXd& x) {
  const int d = p.action_dim;
  const int h = p.num_params();
  GaussianOut g = forward(p, x);
  PolicyJacobians J = jacobians(p, x);

  auto lower = g.L.triangularView<Eigen::Lower>();
  // Mean term: (L^{-1} dmu)' (L^{-1} dmu).
  Eigen::MatrixXd X = lower.solve(J.dmu);
  Eigen::MatrixXd F = X.transpose() * X;

  // Trace term via V columns vec(L^{-1} (E L' + L E') L^{-T}).
  Eigen::MatrixXd V = Eigen::MatrixXd::Zero(d * d, h);
  for (int c = 0; c < h; ++c) {
    if (J.dvecL.col(c).isZero(0.0)) continue;
    Eigen::MatrixXd E = Eigen::Map<const Eigen::MatrixXd>(J.dvecL.col(c).data(), d, d);
    Eigen::MatrixXd P = E * g.L.transpose() + g.L * E.transpose();
    Eigen::MatrixXd M = lower.solve(P);
    M = lower.solve(M.transpose()).transpose();  // L^{-1} P L^{-T}
    V.col(c) = Eigen::Map<Eigen::VectorXd>(M.data(), d * d);
  }
  F.noalias() += 0.5 * V.transpose() * V;
  F = 0.5 * (F + F.transpose()).eval();
  F.diagonal().array() += 1e-8;
  return F;
}

double gaussian_kl(const GaussianOut& pn, const GaussianOut& po) {
  const int d = static_cast<int>(pn.mu.size());
  auto lo = po.L.triangularView<Eigen::Lower>();
  Eigen::MatrixXd A = lo.solve(pn.L);           // Lo^{-1} Ln
  double tr = A.squaredNorm();                  // Tr(So^{-1} Sn)
  Eigen::VectorXd md = lo.solve(po.mu - pn.mu);  // whitened mean shift
  double quad = md.squaredNorm();
  double logdet = 0.0;
  for (int i = 0; i < d; ++i) logdet += 2.0 * (std::log(po.L(i, i)) - std::log(pn.L(i, i)));
  return 0.5 * (tr - d + quad + logdet);
}

StateNormalizer make_state_normalizer(const Scenario& s) {
  StateNormalizer n;
  n.center = Eigen::VectorXd::Zero(state_dim(s));
  n.scale = Eigen::VectorXd::Ones(state_dim(s));
  int i = 0;
  auto span = [](double lo, double hi) { return std::max((hi - lo) / 2.0, 1e-6); };
  for (const auto& [id, e] : s.ess) {
    n.center[i] = (e.soc_min + e.soc_max) / 2.0;
    n.scale[i++] = span(e.soc_min, e.soc_max);
  }
  for (const auto& [id, m] : s.mt) {
    n.center[i] = m.fuel_init / 2.0;
    n.scale[i++] = span(0.0, std::max(m.fuel_init, 1e-6));
  }
  for (const auto& [id, l] : s.loads) {
    n.center[i] = 0.5;
    n.scale[i++] = 0.5;
  }
  for (const auto& [id, m] : s.mt) {
    n.center[i] = (m.p_min + m.p_max) / 2.0;
    n.scale[i++] = span(m.p_min, m.p_max);
  }
  for (int k = 0; k <= s.cpo_lookahead; ++k) {
    for (const auto& [id, l] : s.loads) {
      double peak = 1e-6;
      for (double dmd : l.p_demand) peak = std::max(peak, dmd);
      n.center[i] = 0.0;
      n.scale[i++] = peak;
    }
    for (const auto& [id, l] : s.loads) {
      double peak = 1e-6;
      for (double dmd : l.q_demand) peak = std::max(peak, dmd);
      n.center[i] = 0.0;
      n.scale[i++] = peak;
    }
    for (const auto& [id, r] : s.res) {
      n.center[i] = 0.0;
      n.scale[i++] = std::max(r.forecast_mean + 3.0 * r.forecast_sd, 1e-6);
    }
  }
  return n;
}

Eigen::VectorXd action_scales(const Scenario& s) {
  ActionLayout lay(s.network, s.cpo_lookahead);
  Eigen::VectorXd sc = Eigen::VectorXd::Ones(lay.dim());
  for (int k = 0; k <= s.cpo_lookahead; ++k) {
    for (int i = 0; i < lay.nres(); ++i) {
      const ResParams& r = s.res.at(lay.res_buses()[i]);
      sc[lay.res_p(k, i)] = std::max(r.forecast_mean + 3.0 * r.forecast_sd, 1e-6);
      sc[lay.res_q(k, i)] = std::max(2.0 * r.q_max, 1e-6);
    }
    for (int i = 0; i < lay.nmt(); ++i) {
      const MtParams& m = s.mt.at(lay.mt_buses()[i]);
      sc[lay.mt_p(k, i)] = std::max(m.p_max - m.p_min, 1e-6);
      sc[lay.mt_q(k, i)] = std::max(2.0 * m.q_max, 1e-6);
    }
    for (int i = 0; i < lay.ness(); ++i) {
      const EssParams& e = s.ess.at(lay.ess_buses()[i]);
      sc[lay.ess_ch(k, i)] = e.p_ch_max;
      sc[lay.ess_dis(k, i)] = e.p_dis_max;
      sc[lay.ess_q(k, i)] = std::max(2.0 * e.q_max, 1e-6);
    }
  }
  return sc;
}

PolicyParams init_policy(const Scenario& s, std::uint64_t seed, double sigma_frac) {
  ActionLayout lay(s.network, s.cpo_lookahead);
  const int d = lay.dim();
  PolicyParams p;
  p.action_dim = d;
  p.mean_spec = FnnSpec{state_dim(s), {10, 10}, d};
  p.chol_spec = FnnSpec{state_dim(s), {20, 20}, d * (d + 1) / 2};
  p.theta_mu = Eigen::VectorXd::Zero(p.mean_spec.num_params());
  p.theta_sigma = Eigen::VectorXd::Zero(p.chol_spec.num_params());

  Rng rng(derive_seed(seed, 0x11));
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  auto fill = [&](const FnnSpec& spec, Eigen::VectorXd& theta, double out_scale) {
    int off = 0;
    int in = spec.input_dim;
    std::vector<int> outs = spec.hidden;
    outs.push_back(spec.output_dim);
    for (size_t l = 0; l < outs.size(); ++l) {
      double a = 1.0 / std::sqrt(static_cast<double>(in));
      if (l + 1 == outs.size()) a *= out_scale;
      for (int k = 0; k < outs[l] * in; ++k) theta[off++] = a * unif(rng);
      off += outs[l];  // biases stay zero
      in = outs[l];
    }
  };
  fill(p.mean_spec, p.theta_mu, 0.1);
  fill(p.chol_spec, p.theta_sigma, 0.01);

  // Seed the factor net's output bias so the initial diagonal sits at
  // sigma_frac of each action span (inverse softplus).
  Eigen::VectorXd scales = action_scales(s);
  int bias_off = p.chol_spec.num_params() - p.chol_spec.output_dim;
  int idx = 0;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j <= i; ++j, ++idx) {
      if (i == j) {
        double target = std::max(sigma_frac * scales[i], 2.0 * kDiagFloor);
        p.theta_sigma[bias_off + idx] = std::log(std::expm1(target));
      }
    }
  return p;
}

namespace {

json spec_to_json(const FnnSpec& s) {
  return json{{"input_dim", s.input_dim}, {"hidden", s.hidden}, {"output_dim", s.output_dim}};
}
FnnSpec spec_from_json(const json& j) {
  FnnSpec s;
  s.input_dim = j.at("input_dim").get<int>();
  s.hidden = j.at("hidden").get<std::vector<int>>();
  s.output_dim = j.at("output_dim").get<int>();
  return s;
}
json vec_to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}
Eigen::VectorXd vec_from_json(const json& j) {
  Eigen::VectorXd v(j.size());
  for (size_t i = 0; i < j.size(); ++i) v[static_cast<int>(i)] = j[i].get<double>();
  return v;
}

}  // namespace

void save_checkpoint(const PolicyParams& p, const StateNormalizer& n, const std::string& path) {
  json j;
  j["version"] = 1;
  j["action_dim"] = p.action_dim;
  j["mean_spec"] = spec_to_json(p.mean_spec);
  j["chol_spec"] = spec_to_json(p.chol_spec);
  j["theta_mu"] = vec_to_json(p.theta_mu);
  j["theta_sigma"] = vec_to_json(p.theta_sigma);
  j["norm_center"] = vec_to_json(n.center);
  j["norm_scale"] = vec_to_json(n.scale);
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write checkpoint '" + path + "'");
  os << j.dump(1) << "\n";
}

std::pair<PolicyParams, StateNormalizer> load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open checkpoint '" + path + "'");
  json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("checkpoint parse error: ") + e.what());
  }
  if (j.value("version", 0) != 1) throw ConfigError("unsupported checkpoint version");
  PolicyParams p;
  p.action_dim = j.at("action_dim").get<int>();
  p.mean_spec = spec_from_json(j.at("mean_spec"));
  p.chol_spec = spec_from_json(j.at("chol_spec"));
  p.theta_mu = vec_from_json(j.at("theta_mu"));
  p.theta_sigma = vec_from_json(j.at("theta_sigma"));
  if (p.mean_spec.output_dim != p.action_dim ||
      p.chol_spec.output_dim != p.action_dim * (p.action_dim + 1) / 2)
    throw ConfigError("checkpoint network shapes inconsistent with action dimension");
  if (p.theta_mu.size() != p.mean_spec.num_params() ||
      p.theta_sigma.size() != p.chol_spec.num_params())
    throw ConfigError("checkpoint parameter vectors inconsistent with network shapes");
  StateNormalizer n;
  n.center = vec_from_json(j.at("norm_center"));
  n.scale = vec_from_json(j.at("norm_scale"));
  return {p, n};
}

}  // namespace mgres
