#include "mgres/lp.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>

namespace mgres {

int LpProblem::add_variable(std::string name, double lower, double upper) {
  names_.push_back(std::move(name));
  lower_.push_back(lower);
  upper_.push_back(upper);
  obj_.push_back(0.0);
  return static_cast<int>(lower_.size()) - 1;
}

void LpProblem::set_objective(int var, double coeff) {
  if (var < 0 || var >= num_variables())
    throw ConfigError("objective references undeclared variable " + std::to_string(var));
  obj_[var] = coeff;
}

int LpProblem::add_row(std::vector<std::pair<int, double>> coeffs, Relation rel, double rhs,
                       std::string name) {
  rows_.push_back(Row{std::move(coeffs), rel, rhs, std::move(name)});
  return static_cast<int>(rows_.size()) - 1;
}

void LpProblem::check() const {
  for (int j = 0; j < num_variables(); ++j) {
    if (lower_[j] > upper_[j])
      throw ConfigError("variable '" + names_[j] + "' has inverted bounds");
    if (std::isnan(lower_[j]) || std::isnan(upper_[j]) || std::isnan(obj_[j]))
      throw ConfigError("variable '" + names_[j] + "' has NaN data");
  }
  for (const auto& r : rows_) {
    for (const auto& [j, a] : r.coeffs) {
      if (j < 0 || j >= num_variables())
        throw ConfigError("row '" + r.name + "' references undeclared variable " +
                          std::to_string(j));
      if (std::isnan(a)) throw ConfigError("row '" + r.name + "' has NaN coefficient");
    }
    if (std::isnan(r.rhs)) throw ConfigError("row '" + r.name + "' has NaN rhs");
  }
}

namespace {

constexpr double kPivotTol = 1e-10;
constexpr double kFeasTol = 1e-9;
constexpr double kOptTol = 1e-9;
constexpr double kDegenTol = 1e-12;
constexpr int kBlandTrigger = 30;  // degenerate pivots before switching to Bland
constexpr int kRefactorEvery = 1000;
constexpr int kMaxPivots = 500000;

enum class VarState { Basic, AtLower, AtUpper, FreeZero };

// Bounded-variable revised simplex on the equality form
// Ax + s (+ sign*artificial) = b, with an explicit dense basis inverse
// maintained by product-form updates and duals updated incrementally.
class Simplex {
 public:
  explicit Simplex(const LpProblem& p) : p_(p), m_(p.num_rows()), n_(p.num_variables()) {
    build();
  }

  LpSolution run() {
    LpSolution sol;
    if (!artificials_.empty()) {
      std::vector<double> c1(total_, 0.0);
      for (int a : artificials_) c1[a] = -1.0;
      LpStatus st = optimize(c1);
      if (st == LpStatus::Unbounded)
        throw NumericalError("phase-1 simplex reported unbounded objective");
      double infeas = 0.0;
      for (int a : artificials_) infeas += x_[a];
      if (infeas > 1e-7) {
        sol.status = LpStatus::Infeasible;
        sol.iterations = iterations_;
        return sol;
      }
      for (int a : artificials_) {  // pin artificials at zero for phase 2
        lb_[a] = 0.0;
        ub_[a] = 0.0;
        if (state_[a] != VarState::Basic) state_[a] = VarState::AtLower;
        x_[a] = std::max(0.0, x_[a]);
      }
    }
    std::vector<double> c2(total_, 0.0);
    for (int j = 0; j < n_; ++j) c2[j] = p_.objective(j);
    LpStatus st = optimize(c2);
    sol.status = st;
    sol.iterations = iterations_;
    if (st != LpStatus::Optimal) return sol;

    refactorize(c2);
    sol.values.assign(n_, 0.0);
    double obj = 0.0;
    for (int j = 0; j < n_; ++j) {
      sol.values[j] = x_[j];
      obj += p_.objective(j) * x_[j];
    }
    sol.objective_value = obj;
    sol.duals.assign(y_.begin(), y_.end());
    sol.reduced_costs.assign(n_, 0.0);
    for (int j = 0; j < n_; ++j) sol.reduced_costs[j] = reduced_cost(c2, j);
    return sol;
  }

 private:
  void build() {
    cols_.assign(n_, {});
    for (int i = 0; i < m_; ++i)
      for (const auto& [j, a] : p_.row(i).coeffs)
        if (a != 0.0) cols_[j].push_back({i, a});
    lb_.resize(n_);
    ub_.resize(n_);
    for (int j = 0; j < n_; ++j) {
      lb_[j] = p_.lower(j);
      ub_[j] = p_.upper(j);
    }
    slack_of_row_.resize(m_);
    for (int i = 0; i < m_; ++i) {
      int sv = static_cast<int>(cols_.size());
      cols_.push_back({{i, 1.0}});
      switch (p_.row(i).rel) {
        case Relation::LessEqual:
          lb_.push_back(0.0);
          ub_.push_back(kInf);
          break;
        case Relation::Equal:
          lb_.push_back(0.0);
          ub_.push_back(0.0);
          break;
        case Relation::GreaterEqual:
          lb_.push_back(-kInf);
          ub_.push_back(0.0);
          break;
      }
      slack_of_row_[i] = sv;
    }

    total_ = static_cast<int>(cols_.size());
    state_.assign(total_, VarState::AtLower);
    x_.assign(total_, 0.0);
    for (int j = 0; j < n_; ++j) {
      if (std::isfinite(lb_[j])) {
        state_[j] = VarState::AtLower;
        x_[j] = lb_[j];
      } else if (std::isfinite(ub_[j])) {
        state_[j] = VarState::AtUpper;
        x_[j] = ub_[j];
      } else {
        state_[j] = VarState::FreeZero;
        x_[j] = 0.0;
      }
    }
    std::vector<double> act(m_, 0.0);
    for (int j = 0; j < n_; ++j)
      if (x_[j] != 0.0)
        for (const auto& [i, a] : cols_[j]) act[i] += a * x_[j];

    basic_.resize(m_);
    bool any_negative_artificial = false;
    for (int i = 0; i < m_; ++i) {
      int sv = slack_of_row_[i];
      double want = p_.row(i).rhs - act[i];
      if (want >= lb_[sv] - kFeasTol && want <= ub_[sv] + kFeasTol) {
        basic_[i] = sv;
        state_[sv] = VarState::Basic;
        x_[sv] = want;
      } else {
        // Clamp the slack to its nearest bound; an artificial covers the
        // residual and starts basic and nonnegative.
        double clamped = std::min(std::max(want, lb_[sv]), ub_[sv]);
        state_[sv] = (std::isfinite(ub_[sv]) && clamped == ub_[sv] && clamped != lb_[sv])
                         ? VarState::AtUpper
                         : VarState::AtLower;
        x_[sv] = clamped;
        double resid = want - clamped;
        double sign = resid >= 0 ? 1.0 : -1.0;
        if (sign < 0) any_negative_artificial = true;
        int av = static_cast<int>(cols_.size());
        cols_.push_back({{i, sign}});
        lb_.push_back(0.0);
        ub_.push_back(kInf);
        state_.push_back(VarState::Basic);
        x_.push_back(std::abs(resid));
        artificials_.push_back(av);
        basic_[i] = av;
        total_++;
      }
    }
    binv_ = Eigen::MatrixXd::Identity(m_, m_);
    if (any_negative_artificial) {
      // B differs from the identity only by -1 diagonal entries.
      for (int i = 0; i < m_; ++i)
        if (basic_[i] >= n_ + m_ && cols_[basic_[i]][0].second < 0) binv_(i, i) = -1.0;
    }
    y_.assign(m_, 0.0);
  }

  double reduced_cost(const std::vector<double>& c, int j) const {
    double d = c[j];
    for (const auto& [i, a] : cols_[j]) d -= y_[i] * a;
    return d;
  }

  void compute_duals(const std::vector<double>& c) {
    Eigen::VectorXd cb(m_);
    for (int i = 0; i < m_; ++i) cb[i] = c[basic_[i]];
    Eigen::VectorXd y = binv_.transpose() * cb;
    y_.assign(y.data(), y.data() + m_);
  }

  void refactorize(const std::vector<double>& c) {
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(m_, m_);
    for (int k = 0; k < m_; ++k)
      for (const auto& [i, a] : cols_[basic_[k]]) B(i, k) = a;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(B);
    binv_ = lu.inverse();
    if (!binv_.allFinite())
      throw NumericalError("simplex basis became singular during refactorization");
    Eigen::VectorXd rhs(m_);
    for (int i = 0; i < m_; ++i) rhs[i] = p_.row(i).rhs;
    for (int j = 0; j < total_; ++j) {
      if (state_[j] == VarState::Basic || x_[j] == 0.0) continue;
      for (const auto& [i, a] : cols_[j]) rhs[i] -= a * x_[j];
    }
    Eigen::VectorXd xb = binv_ * rhs;
    for (int k = 0; k < m_; ++k) x_[basic_[k]] = xb[k];
    compute_duals(c);
  }

  LpStatus optimize(const std::vector<double>& c) {
    compute_duals(c);
    int degen_streak = 0;
    bool bland = false;
    int since_refactor = 0;
    while (true) {
      if (iterations_++ > kMaxPivots)
        throw NumericalError("simplex iteration cap exceeded (" + std::to_string(kMaxPivots) +
                             " pivots)");
      // Pricing: Dantzig by default (ties to the lowest index), pure Bland
      // while escaping a degenerate streak.
      int enter = -1;
      double best = 0.0;
      int dir = +1;
      for (int j = 0; j < total_; ++j) {
        if (state_[j] == VarState::Basic) continue;
        if (lb_[j] == ub_[j]) continue;
        double d = reduced_cost(c, j);
        double score;
        int jdir;
        if (state_[j] == VarState::AtLower && d > kOptTol) {
          score = d;
          jdir = +1;
        } else if (state_[j] == VarState::AtUpper && d < -kOptTol) {
          score = -d;
          jdir = -1;
        } else if (state_[j] == VarState::FreeZero && std::abs(d) > kOptTol) {
          score = std::abs(d);
          jdir = d > 0 ? +1 : -1;
        } else {
          continue;
        }
        if (bland) {
          enter = j;
          dir = jdir;
          break;
        }
        if (score > best) {
          best = score;
          enter = j;
          dir = jdir;
        }
      }
      if (enter < 0) return LpStatus::Optimal;
      double d_enter = reduced_cost(c, enter);

      // Ftran by sparse column combination: w = B^{-1} A_e.
      Eigen::VectorXd w = Eigen::VectorXd::Zero(m_);
      for (const auto& [i, a] : cols_[enter]) w.noalias() += a * binv_.col(i);

      double t_best = kInf;
      int leave_k = -1;
      int leave_dir = 0;
      if (std::isfinite(lb_[enter]) && std::isfinite(ub_[enter]))
        t_best = ub_[enter] - lb_[enter];
      for (int k = 0; k < m_; ++k) {
        double delta = -dir * w[k];
        int b = basic_[k];
        double t;
        int hit;
        if (delta < -kPivotTol && std::isfinite(lb_[b])) {
          t = (x_[b] - lb_[b]) / (-delta);
          hit = -1;
        } else if (delta > kPivotTol && std::isfinite(ub_[b])) {
          t = (ub_[b] - x_[b]) / delta;
          hit = +1;
        } else {
          continue;
        }
        t = std::max(t, 0.0);
        if (t < t_best - kDegenTol ||
            (t < t_best + kDegenTol && leave_k >= 0 && b < basic_[leave_k])) {
          t_best = t;
          leave_k = k;
          leave_dir = hit;
        }
      }

      if (!std::isfinite(t_best)) return LpStatus::Unbounded;

      if (t_best <= kDegenTol) {
        if (++degen_streak >= kBlandTrigger) bland = true;
      } else {
        degen_streak = 0;
        bland = false;
      }

      for (int k = 0; k < m_; ++k) x_[basic_[k]] += -dir * w[k] * t_best;
      if (leave_k < 0) {
        // Bound-to-bound flip; basis unchanged.
        if (dir > 0) {
          x_[enter] = ub_[enter];
          state_[enter] = VarState::AtUpper;
        } else {
          x_[enter] = lb_[enter];
          state_[enter] = VarState::AtLower;
        }
        continue;
      }
      int leave = basic_[leave_k];
      double enter_base = state_[enter] == VarState::AtLower    ? lb_[enter]
                          : state_[enter] == VarState::AtUpper ? ub_[enter]
                                                               : 0.0;
      x_[enter] = enter_base + dir * t_best;
      x_[leave] = leave_dir < 0 ? lb_[leave] : ub_[leave];
      state_[leave] = leave_dir < 0 ? VarState::AtLower : VarState::AtUpper;
      state_[enter] = VarState::Basic;
      basic_[leave_k] = enter;

      double piv = w[leave_k];
      if (std::abs(piv) < kPivotTol)
        throw NumericalError("simplex pivot element below tolerance");
      Eigen::RowVectorXd prow = binv_.row(leave_k) / piv;
      for (int i = 0; i < m_; ++i) {
        if (i == leave_k) continue;
        double f = w[i];
        if (f != 0.0) binv_.row(i) -= f * prow;
      }
      binv_.row(leave_k) = prow;
      // Dual update: y' = y + d_e * (new row r of B^{-1}).
      for (int i = 0; i < m_; ++i) y_[i] += d_enter * prow[i];

      if (++since_refactor >= kRefactorEvery) {
        refactorize(c);
        since_refactor = 0;
      }
    }
  }

  const LpProblem& p_;
  int m_ = 0;
  int n_ = 0;
  int total_ = 0;
  std::vector<std::vector<std::pair<int, double>>> cols_;
  std::vector<double> lb_, ub_, x_;
  std::vector<VarState> state_;
  std::vector<int> basic_;
  std::vector<int> slack_of_row_;
  std::vector<int> artificials_;
  std::vector<double> y_;
  Eigen::MatrixXd binv_;
  int iterations_ = 0;
};

}  // namespace

LpSolution solve_lp(const LpProblem& p) {
  p.check();
  Simplex s(p);
  return s.run();
}

double lp_feasibility_error(const LpProblem& p, const std::vector<double>& x) {
  double err = 0.0;
  for (int j = 0; j < p.num_variables(); ++j) {
    if (std::isfinite(p.lower(j))) err = std::max(err, p.lower(j) - x[j]);
    if (std::isfinite(p.upper(j))) err = std::max(err, x[j] - p.upper(j));
  }
  for (int i = 0; i < p.num_rows(); ++i) {
    const auto& r = p.row(i);
    double lhs = 0.0;
    for (const auto& [j, a] : r.coeffs) lhs += a * x[j];
    switch (r.rel) {
      case Relation::LessEqual: err = std::max(err, lhs - r.rhs); break;
      case Relation::GreaterEqual: err = std::max(err, r.rhs - lhs); break;
      case Relation::Equal: err = std::max(err, std::abs(lhs - r.rhs)); break;
    }
  }
  return err;
}

double lp_dual_objective(const LpProblem& p, const LpSolution& sol) {
  // max c'x, l <= x <= u: dual objective y'b plus reduced-cost contributions
  // from the bounds the nonbasic variables rest on.
  double obj = 0.0;
  for (int i = 0; i < p.num_rows(); ++i) obj += sol.duals[i] * p.row(i).rhs;
  for (int j = 0; j < p.num_variables(); ++j) {
    double d = sol.reduced_costs[j];
    if (std::abs(d) < 1e-11) continue;
    obj += d * (d > 0 ? p.upper(j) : p.lower(j));
  }
  return obj;
}

void write_lp_format(const LpProblem& p, std::ostream& os) {
  auto var = [&](int j) {
    std::string n = p.variable_name(j);
    for (char& ch : n)
      if (ch == ' ' || ch == '(' || ch == ')' || ch == ',') ch = '_';
    return n.empty() ? "x" + std::to_string(j) : n;
  };
  os << "Maximize\n obj:";
  for (int j = 0; j < p.num_variables(); ++j)
    if (p.objective(j) != 0.0)
      os << (p.objective(j) >= 0 ? " + " : " - ") << format_double(std::abs(p.objective(j)))
         << " " << var(j);
  os << "\nSubject To\n";
  for (int i = 0; i < p.num_rows(); ++i) {
    const auto& r = p.row(i);
    os << " c" << i << ":";
    for (const auto& [j, a] : r.coeffs)
      os << (a >= 0 ? " + " : " - ") << format_double(std::abs(a)) << " " << var(j);
    switch (r.rel) {
      case Relation::LessEqual: os << " <= "; break;
      case Relation::Equal: os << " = "; break;
      case Relation::GreaterEqual: os << " >= "; break;
    }
    os << format_double(r.rhs) << "\n";
  }
  os << "Bounds\n";
  for (int j = 0; j < p.num_variables(); ++j) {
    double l = p.lower(j), u = p.upper(j);
    if (!std::isfinite(l) && !std::isfinite(u))
      os << " " << var(j) << " free\n";
    else if (!std::isfinite(l))
      os << " -inf <= " << var(j) << " <= " << format_double(u) << "\n";
    else if (!std::isfinite(u))
      os << " " << format_double(l) << " <= " << var(j) << "\n";
    else
      os << " " << format_double(l) << " <= " << var(j) << " <= " << format_double(u) << "\n";
  }
  os << "End\n";
}

}  // namespace mgres
