#include "covgrow/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "covgrow/errors.hpp"

namespace covgrow {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Groups of functions sharing one smoothing parameter.
std::vector<std::vector<int>> lambda_groups(int n_functions, bool tie) {
  std::vector<std::vector<int>> groups;
  if (tie && n_functions > 1) {
    groups.push_back({0});
    groups.emplace_back();
    for (int l = 1; l < n_functions; ++l) groups.back().push_back(l);
  } else {
    for (int l = 0; l < n_functions; ++l) groups.push_back({l});
  }
  return groups;
}

Eigen::VectorXd expand(const std::vector<std::vector<int>>& groups, const Eigen::VectorXd& per_group,
                       int n_functions) {
  Eigen::VectorXd out(n_functions);
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (int l : groups[g]) out[l] = per_group[static_cast<Eigen::Index>(g)];
  return out;
}

// Raw lambdas from one standardized value per group. Members of a tied group
// share the raw value, standardized by the scale of the group's first member.
Eigen::VectorXd group_raw(const AssembledSystem& sys, const std::vector<std::vector<int>>& groups,
                          const Eigen::VectorXd& per_group) {
  Eigen::VectorXd out(sys.n_functions());
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (int l : groups[g])
      out[l] = per_group[static_cast<Eigen::Index>(g)] * sys.lambda_scale[groups[g].front()];
  return out;
}

// Quantities of the R-hat stationarity condition at one state:
// u.col(l) = R^-t S_l a (so a^t S_l G S_l' a = u_l . u_l') and
// t[l] = tr(S_l G C G) = tr(G S_l G C).
struct RiskTerms {
  Eigen::MatrixXd u;
  Eigen::VectorXd t;
};

RiskTerms risk_terms(const AssembledSystem& sys, const PenalizedState& st) {
  const int nf = sys.n_functions();
  const int n = sys.n_coef();
  RiskTerms rt{Eigen::MatrixXd(n, nf), Eigen::VectorXd(nf)};
  // G C G = Y Y^t with Y = R^-1 w^t.
  Eigen::MatrixXd y = st.w.transpose();
  st.factor.factor().solve_r(y);
  for (int l = 0; l < nf; ++l) {
    Eigen::MatrixXd v = sys.apply_penalty(l, st.coef);
    st.factor.factor().solve_rt(v);
    rt.u.col(l) = v.col(0);
    rt.t[l] = y.cwiseProduct(sys.apply_penalty(l, y)).sum();
  }
  return rt;
}

Eigen::VectorXd gradient_from_terms(const RiskTerms& rt, const Eigen::VectorXd& lambdas, double sigma2) {
  const Eigen::VectorXd uc = rt.u * lambdas;  // R^-t S_c a
  return rt.u.transpose() * uc - sigma2 * rt.t;
}

Eigen::MatrixXd weight_matrix(const AssembledSystem& sys, RiskWeight q) {
  if (q == RiskWeight::Predictive) return sys.cross;
  return sys.penalty_total(Eigen::VectorXd::Ones(sys.n_functions()));
}

void check_sigma2(double sigma2) {
  if (!(sigma2 >= 0.0) || !std::isfinite(sigma2))
    throw std::invalid_argument("sigma^2 must be finite and nonnegative");
}

std::string format_lambdas(const Eigen::VectorXd& l) {
  std::ostringstream os;
  os.precision(6);
  os << '(';
  for (Eigen::Index i = 0; i < l.size(); ++i) os << (i ? ", " : "") << l[i];
  os << ')';
  return os.str();
}

ScanPoint evaluate_point(const AssembledSystem& sys, const Eigen::VectorXd& lambdas,
                         std::optional<double> sigma2) {
  ScanPoint p;
  p.lambdas = lambdas;
  try {
    const PenalizedState st = penalized_state(sys, lambdas);
    p.trace = st.trace;
    p.rss = st.rss;
    p.gcv = st.trace < sys.n_obs ? gcv_score(st, sys.n_obs) : kInf;
    if (sigma2) p.risk_hat = st.rss + 2.0 * *sigma2 * st.trace - sys.n_obs * *sigma2;
  } catch (const SingularSystemError&) {
    p.gcv = kInf;
    p.trace = kInf;
    p.rss = kInf;
  }
  return p;
}

bool exact_fit(const ScanPoint& p, double response_norm2) {
  return p.rss <= 1e-24 * response_norm2;
}

// Coordinate search over the group grid, for more than two free axes.
std::vector<ScanPoint> coordinate_search(const AssembledSystem& sys, const LambdaGrid& grid,
                                         const std::vector<std::vector<int>>& groups,
                                         double response_norm2) {
  const std::vector<double> values = grid.values();
  const int ng = static_cast<int>(groups.size());
  // Start from the grid value closest to standardized 1 on every axis.
  std::size_t mid = 0;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (std::abs(std::log(values[i])) < std::abs(std::log(values[mid]))) mid = i;
  std::vector<std::size_t> at(static_cast<std::size_t>(ng), mid);
  auto lambdas_at = [&](const std::vector<std::size_t>& idx) {
    Eigen::VectorXd std_l(ng);
    for (int g = 0; g < ng; ++g) std_l[g] = values[idx[static_cast<std::size_t>(g)]];
    return group_raw(sys, groups, std_l);
  };
  std::vector<ScanPoint> path{evaluate_point(sys, lambdas_at(at), std::nullopt)};
  for (int sweep = 0; sweep < 50; ++sweep) {
    bool moved = false;
    for (int g = 0; g < ng; ++g) {
      std::vector<ScanPoint> line;
      std::vector<std::size_t> idx = at;
      for (std::size_t i = 0; i < values.size(); ++i) {
        idx[static_cast<std::size_t>(g)] = i;
        line.push_back(evaluate_point(sys, lambdas_at(idx), std::nullopt));
      }
      const std::size_t best = gcv_argmin(line, response_norm2);
      if (best != at[static_cast<std::size_t>(g)]) {
        at[static_cast<std::size_t>(g)] = best;
        moved = true;
        path.push_back(line[best]);
      }
    }
    if (!moved) break;
  }
  return path;
}

}  // namespace

std::vector<double> LambdaGrid::values() const {
  validate();
  const double decades = std::log10(max / min);
  const int n = std::max(1, static_cast<int>(std::lround(decades * per_decade))) + 1;
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] = min * std::pow(10.0, decades * i / (n - 1));
  out.back() = max;
  return out;
}

void LambdaGrid::validate() const {
  if (!(min > 0.0) || !(max > min) || !std::isfinite(max))
    throw std::invalid_argument("lambda grid needs 0 < min < max");
  if (per_decade < 1) throw std::invalid_argument("lambda grid needs at least one point per decade");
}

void SelectionConfig::validate(int n_functions) const {
  grid.validate();
  if (!(tol > 0.0)) throw std::invalid_argument("selection tolerance must be positive");
  if (max_iter < 1) throw std::invalid_argument("max_iter must be at least 1");
  auto check_vec = [&](const std::optional<Eigen::VectorXd>& v, const char* what) {
    if (!v) return;
    if (v->size() != n_functions)
      throw std::invalid_argument(std::string(what) + " lambdas have the wrong length");
    for (double x : *v)
      if (!(x >= 0.0) || !std::isfinite(x))
        throw std::invalid_argument(std::string(what) + " lambdas must be finite and nonnegative");
  };
  check_vec(initial, "initial");
  check_vec(fixed, "fixed");
  if (method == SelectionMethod::Fixed && !fixed)
    throw std::invalid_argument("the fixed selection method needs lambda values");
  if (sigma2 && (!(*sigma2 > 0.0) || !std::isfinite(*sigma2)))
    throw std::invalid_argument("known sigma^2 must be positive");
  if (q != RiskWeight::Predictive &&
      (method == SelectionMethod::RiskFixedPoint || method == SelectionMethod::RiskFixedPointSimplified))
    throw std::invalid_argument(
        "the empirical risk estimate exists only for the predictive weight Q = C");
}

std::string method_name(SelectionMethod m) {
  switch (m) {
    case SelectionMethod::GcvGrid: return "gcv-grid";
    case SelectionMethod::RiskFixedPoint: return "risk-fixed-point";
    case SelectionMethod::RiskFixedPointSimplified: return "risk-fixed-point-simplified";
    case SelectionMethod::Fixed: return "fixed";
  }
  return "?";
}

SelectionMethod parse_method(const std::string& name) {
  for (SelectionMethod m : {SelectionMethod::GcvGrid, SelectionMethod::RiskFixedPoint,
                            SelectionMethod::RiskFixedPointSimplified, SelectionMethod::Fixed})
    if (method_name(m) == name) return m;
  throw std::invalid_argument("unknown selection method '" + name + "'");
}

Eigen::VectorXd raw_lambdas(const AssembledSystem& sys, const Eigen::VectorXd& standardized) {
  if (standardized.size() != sys.n_functions())
    throw std::invalid_argument("lambda vector has the wrong length");
  return standardized.cwiseProduct(sys.lambda_scale);
}

double gcv_score(const PenalizedState& state, int n_obs) {
  const double n = n_obs;
  if (!(state.trace < n)) {
    std::ostringstream os;
    os << "GCV undefined: tr A = " << state.trace << " >= N_T = " << n_obs
       << " (over-parameterized unpenalized model)";
    throw std::domain_error(os.str());
  }
  const double m = 1.0 - state.trace / n;
  return (state.rss / n) / (m * m);
}

double gcv_score(const AssembledSystem& sys, const Eigen::VectorXd& lambdas) {
  return gcv_score(penalized_state(sys, lambdas), sys.n_obs);
}

Sigma2Estimate sigma2_hat(const AssembledSystem& sys) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(sys.wdesign);
  qr.setThreshold(1e-12);
  const int rank = static_cast<int>(qr.rank());
  Sigma2Estimate e;
  e.trace = rank;
  const double dof = sys.n_obs - rank;
  if (!(dof > 0.0)) {
    std::ostringstream os;
    os << "cannot estimate sigma^2: N_T = " << sys.n_obs << " does not exceed the rank " << rank
       << " of the unpenalized design";
    throw std::domain_error(os.str());
  }
  // Residual from the trailing part of Q^t y.
  const Eigen::VectorXd qty = qr.householderQ().transpose() * sys.wresponse;
  e.rss = qty.tail(sys.n_obs - rank).squaredNorm();
  e.value = e.rss / dof;
  return e;
}

double risk(const AssembledSystem& sys, const Eigen::VectorXd& lambdas, RiskWeight q,
            const Eigen::VectorXd& alpha_true, double sigma2) {
  check_sigma2(sigma2);
  const ExpectedError e = expected_error(sys, lambdas, alpha_true, sigma2);
  return weight_matrix(sys, q).cwiseProduct(e.total()).sum();
}

Eigen::VectorXd risk_gradient(const AssembledSystem& sys, const Eigen::VectorXd& lambdas,
                              RiskWeight q, const Eigen::VectorXd& alpha_true, double sigma2) {
  check_sigma2(sigma2);
  if (alpha_true.size() != sys.n_coef()) throw std::invalid_argument("coefficient vector has the wrong length");
  // 1/2 dR/dlambda_l = Tr[Q G S_l G (C a a^t S_c - sigma^2 C) G]
  //                  = (G Q b)^t S_l (G C a) - sigma^2 Tr[S_l (G C G)(G Q)^t]
  // with b = G S_c a.
  const PenalizedState st = penalized_state(sys, lambdas);
  const Eigen::MatrixXd qm = weight_matrix(sys, q);
  const Eigen::VectorXd b = st.factor.solve(sys.apply_penalty_total(lambdas, alpha_true));
  const Eigen::VectorXd gca = st.factor.solve(sys.cross * alpha_true);
  const Eigen::VectorXd gqb = st.factor.solve(qm * b);
  const Eigen::MatrixXd gcg = st.gcg();
  const Eigen::MatrixXd gq = st.factor.solve(qm);
  Eigen::VectorXd out(sys.n_functions());
  for (int l = 0; l < sys.n_functions(); ++l)
    out[l] = gqb.dot(sys.apply_penalty(l, gca).col(0)) -
             sigma2 * sys.apply_penalty(l, gcg).cwiseProduct(gq).sum();
  return out;
}

double risk_hat(const AssembledSystem& sys, const Eigen::VectorXd& lambdas, double sigma2) {
  check_sigma2(sigma2);
  const PenalizedState st = penalized_state(sys, lambdas);
  return st.rss + 2.0 * sigma2 * st.trace - sys.n_obs * sigma2;
}

Eigen::VectorXd risk_hat_gradient(const AssembledSystem& sys, const Eigen::VectorXd& lambdas,
                                  double sigma2) {
  check_sigma2(sigma2);
  const PenalizedState st = penalized_state(sys, lambdas);
  return gradient_from_terms(risk_terms(sys, st), lambdas, sigma2);
}

FixedPointResult lambda_fixed_point(const AssembledSystem& sys, const SelectionConfig& config,
                                    double sigma2) {
  const int nf = sys.n_functions();
  config.validate(nf);
  check_sigma2(sigma2);
  const bool simplified = config.method == SelectionMethod::RiskFixedPointSimplified;
  const auto groups = lambda_groups(nf, config.tie_lambdas);
  const int ng = static_cast<int>(groups.size());

  // Per-group bounds from the standardized grid. A tied group uses the scale
  // of its first member, so the shared value stays equal across members.
  Eigen::VectorXd lo(ng), hi(ng), lam(ng);
  const Eigen::VectorXd init = config.initial.value_or(Eigen::VectorXd::Ones(nf));
  for (int g = 0; g < ng; ++g) {
    const int l0 = groups[static_cast<std::size_t>(g)].front();
    lo[g] = config.grid.min * sys.lambda_scale[l0];
    hi[g] = config.grid.max * sys.lambda_scale[l0];
    lam[g] = std::clamp(init[l0] * sys.lambda_scale[l0], lo[g], hi[g]);
  }

  FixedPointResult res;
  std::vector<bool> null_signal(static_cast<std::size_t>(ng), false);
  auto group_terms = [&](const RiskTerms& rt) {
    // Sum the per-function columns within each group.
    Eigen::MatrixXd u = Eigen::MatrixXd::Zero(rt.u.rows(), ng);
    Eigen::VectorXd t = Eigen::VectorXd::Zero(ng);
    for (int g = 0; g < ng; ++g)
      for (int l : groups[static_cast<std::size_t>(g)]) {
        u.col(g) += rt.u.col(l);
        t[g] += rt.t[l];
      }
    return std::make_pair(u, t);
  };

  // Grouped R-hat half-gradient and its scale sigma^2 tr(G S_g G C).
  auto gradient = [&](const Eigen::VectorXd& l, Eigen::VectorXd& scale) {
    const PenalizedState st = penalized_state(sys, expand(groups, l, nf));
    const auto [u, t] = group_terms(risk_terms(sys, st));
    scale = sigma2 * t;
    return Eigen::VectorXd(u.transpose() * (u * l) - sigma2 * t);
  };
  auto risk_value = [&](const Eigen::VectorXd& l) {
    const PenalizedState st = penalized_state(sys, expand(groups, l, nf));
    return st.rss + 2.0 * sigma2 * st.trace - sys.n_obs * sigma2;
  };
  // The cyclic update converges only linearly, and slowly when the functions
  // are strongly coupled. Projected Newton descent on R-hat in log lambda:
  // finite-difference Hessian of the analytic gradient, eigenvalues floored
  // so the step is downhill, Armijo backtracking on R-hat itself.
  auto newton_polish = [&](Eigen::VectorXd& l) -> bool {
    Eigen::VectorXd scale;
    const Eigen::VectorXd half = gradient(l, scale);
    // d R-hat / d log lambda_g = 2 lambda_g * half_g
    const Eigen::VectorXd grad = 2.0 * l.cwiseProduct(half);
    std::vector<int> free;
    for (int g = 0; g < ng; ++g) {
      const bool pinned = (l[g] <= lo[g] && grad[g] >= 0.0) || (l[g] >= hi[g] && grad[g] <= 0.0);
      if (!pinned) free.push_back(g);
    }
    if (free.empty()) return false;
    const int nfree = static_cast<int>(free.size());
    const double h = 1e-4;
    Eigen::MatrixXd hess(nfree, nfree);
    Eigen::VectorXd gf(nfree), unused;
    for (int j = 0; j < nfree; ++j) {
      Eigen::VectorXd up = l, dn = l;
      up[free[j]] *= std::exp(h);
      dn[free[j]] *= std::exp(-h);
      const Eigen::VectorXd d =
          (2.0 * up.cwiseProduct(gradient(up, unused)) - 2.0 * dn.cwiseProduct(gradient(dn, unused))) / (2.0 * h);
      for (int i = 0; i < nfree; ++i) hess(i, j) = d[free[i]];
      gf[j] = grad[free[j]];
    }
    hess = 0.5 * (hess + hess.transpose()).eval();
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(hess);
    if (eig.info() != Eigen::Success) return false;
    const double top = eig.eigenvalues().cwiseAbs().maxCoeff();
    if (!(top > 0.0) || !std::isfinite(top)) return false;
    Eigen::VectorXd ev = eig.eigenvalues().cwiseAbs().cwiseMax(1e-8 * top);
    Eigen::VectorXd step = -eig.eigenvectors() * (eig.eigenvectors().transpose() * gf).cwiseQuotient(ev);
    const double longest = step.cwiseAbs().maxCoeff();
    if (!std::isfinite(longest)) return false;
    if (longest > 2.0) step *= 2.0 / longest;

    const double f0 = risk_value(l);
    for (double t = 1.0; t > 1e-6; t *= 0.5) {
      Eigen::VectorXd trial = l;
      for (int j = 0; j < nfree; ++j) {
        const int g = free[j];
        trial[g] = std::clamp(l[g] * std::exp(t * step[j]), lo[g], hi[g]);
      }
      double predicted = 0.0;
      for (int j = 0; j < nfree; ++j) predicted += gf[j] * std::log(trial[free[j]] / l[free[j]]);
      if (!(predicted < 0.0)) return false;
      if (risk_value(trial) <= f0 + 1e-4 * predicted) {
        l = trial;
        for (int g : free) null_signal[static_cast<std::size_t>(g)] = false;
        return true;
      }
    }
    return false;
  };

  auto sweep = [&](Eigen::VectorXd& lam) {
    for (int g = 0; g < ng; ++g) {
      const Eigen::VectorXd full = expand(groups, lam, nf);
      const PenalizedState st = penalized_state(sys, full);
      const auto [u, t] = group_terms(risk_terms(sys, st));
      const double denom = u.col(g).squaredNorm();
      double num = sigma2 * t[g];
      if (!simplified)
        for (int h = 0; h < ng; ++h)
          if (h != g) num -= lam[h] * u.col(h).dot(u.col(g));
      null_signal[static_cast<std::size_t>(g)] = false;
      if (!(num > 0.0)) {
        lam[g] = lo[g];
      } else if (!(denom * hi[g] > num)) {
        lam[g] = hi[g];
        null_signal[static_cast<std::size_t>(g)] = true;
      } else {
        lam[g] = std::max(lo[g], num / denom);
      }
    }
  };

  // After some sweeps, or once they stall short of stationarity, later
  // iterations are Newton steps, with a sweep whenever a Newton step makes no
  // progress. Sweeps alone can crawl for hundreds of iterations on flat
  // stretches of R-hat.
  constexpr int kSweepsBeforeNewton = 10;
  bool polishing = false;
  res.path.push_back(expand(groups, lam, nf));
  for (int it = 1; it <= config.max_iter; ++it) {
    const Eigen::VectorXd prev = lam;
    if (!polishing || !newton_polish(lam)) sweep(lam);
    res.iterations = it;
    res.path.push_back(expand(groups, lam, nf));
    const double change = ((lam - prev).cwiseAbs().array() / prev.array()).maxCoeff();
    if (change >= config.tol) {
      polishing = polishing || it >= kSweepsBeforeNewton;
      continue;
    }
    if (simplified) {
      res.converged = true;
      break;
    }
    // Stationarity of R-hat in every component not held at a bound.
    const Eigen::VectorXd full = expand(groups, lam, nf);
    const PenalizedState st = penalized_state(sys, full);
    const auto [u, t] = group_terms(risk_terms(sys, st));
    const Eigen::VectorXd grad = u.transpose() * (u * lam) - sigma2 * t;
    bool stationary = true;
    for (int g = 0; g < ng; ++g) {
      const bool at_bound = (lam[g] <= lo[g] && grad[g] >= 0.0) || (lam[g] >= hi[g] && grad[g] <= 0.0);
      if (!at_bound && std::abs(grad[g]) > 1e-6 * sigma2 * t[g]) stationary = false;
    }
    if (stationary) {
      res.converged = true;
      break;
    }
    polishing = true;
  }
  res.lambdas = expand(groups, lam, nf);
  if (!simplified) {
    // Newton steps can also land on the upper bound.
    Eigen::VectorXd scale;
    const Eigen::VectorXd grad = gradient(lam, scale);
    for (int g = 0; g < ng; ++g)
      if (lam[g] >= hi[g] && grad[g] <= 0.0) null_signal[static_cast<std::size_t>(g)] = true;
  }
  for (int g = 0; g < ng; ++g)
    if (null_signal[static_cast<std::size_t>(g)]) {
      std::ostringstream os;
      os << "null-signal: no roughness left in function";
      for (int l : groups[static_cast<std::size_t>(g)]) os << ' ' << l;
      os << "; lambda clamped to the grid maximum";
      res.notes.push_back(os.str());
    }
  return res;
}

std::vector<ScanPoint> gcv_scan(const AssembledSystem& sys, const LambdaGrid& grid, bool tie,
                                std::optional<double> sigma2) {
  const auto groups = lambda_groups(sys.n_functions(), tie);
  const std::vector<double> values = grid.values();
  const std::size_t ng = groups.size();
  double total = 1.0;
  for (std::size_t g = 0; g < ng; ++g) total *= static_cast<double>(values.size());
  if (total > 1e6) throw std::invalid_argument("lambda grid too large for a tensor scan; use a coarser grid");
  std::vector<ScanPoint> out;
  out.reserve(static_cast<std::size_t>(total));
  std::vector<std::size_t> idx(ng, 0);
  Eigen::VectorXd std_l(static_cast<Eigen::Index>(ng));
  while (true) {
    for (std::size_t g = 0; g < ng; ++g) std_l[static_cast<Eigen::Index>(g)] = values[idx[g]];
    out.push_back(evaluate_point(sys, group_raw(sys, groups, std_l), sigma2));
    std::size_t g = ng;
    while (g > 0 && ++idx[g - 1] == values.size()) idx[--g] = 0;
    if (g == 0) break;
  }
  return out;
}

std::size_t gcv_argmin(const std::vector<ScanPoint>& scan, double response_norm2) {
  if (scan.empty()) throw std::invalid_argument("empty lambda scan");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scan.size(); ++i)
    if (scan[i].gcv < scan[best].gcv * (1.0 - 1e-12)) best = i;
  if (!std::isfinite(scan[best].gcv))
    throw SingularSystemError("GCV is undefined at every grid point");
  if (!exact_fit(scan[best], response_norm2)) return best;
  // Exact-fit plateau: take the most smoothing point on it.
  auto weight = [](const ScanPoint& p) { return p.lambdas.array().log().sum(); };
  for (std::size_t i = 0; i < scan.size(); ++i)
    if (exact_fit(scan[i], response_norm2) && std::isfinite(scan[i].gcv) && weight(scan[i]) >= weight(scan[best]))
      best = i;
  return best;
}

FitResult select(const AssembledSystem& sys, const SelectionConfig& config) {
  const int nf = sys.n_functions();
  config.validate(nf);
  const double y2 = sys.wresponse.squaredNorm();
  std::vector<std::string> notes;

  // sigma^2: known, else the unpenalized estimate when it exists.
  std::optional<double> sigma2 = config.sigma2;
  bool estimated = false;
  if (!sigma2) {
    try {
      sigma2 = sigma2_hat(sys).value;
      estimated = true;
    } catch (const std::domain_error& e) {
      notes.push_back(std::string("sigma^2 estimate unavailable: ") + e.what());
    }
  }

  Eigen::VectorXd lambdas;
  std::vector<Eigen::VectorXd> path;
  std::vector<double> criterion;
  int iterations = 0;
  bool converged = true;
  SelectionMethod used = config.method;

  auto run_gcv = [&]() {
    const auto groups = lambda_groups(nf, config.tie_lambdas);
    std::vector<ScanPoint> pts;
    std::size_t best = 0;
    if (groups.size() <= 2) {
      pts = gcv_scan(sys, config.grid, config.tie_lambdas);
      best = gcv_argmin(pts, y2);
      path = {pts[best].lambdas};
      criterion = {pts[best].gcv};
      iterations = 1;
    } else {
      pts = coordinate_search(sys, config.grid, groups, y2);
      best = pts.size() - 1;
      for (const ScanPoint& p : pts) {
        path.push_back(p.lambdas);
        criterion.push_back(p.gcv);
      }
      iterations = static_cast<int>(pts.size());
    }
    lambdas = pts[best].lambdas;
    const auto vals = config.grid.values();
    for (int l = 0; l < nf; ++l) {
      const int ref = (config.tie_lambdas && l > 0) ? 1 : l;
      const double s = lambdas[l] / sys.lambda_scale[ref];
      if (s >= vals.back() * (1 - 1e-12)) notes.push_back("lambda_" + std::to_string(l) + " at the grid maximum");
      if (s <= vals.front() * (1 + 1e-12)) notes.push_back("lambda_" + std::to_string(l) + " at the grid minimum");
    }
  };

  switch (config.method) {
    case SelectionMethod::Fixed:
      lambdas = raw_lambdas(sys, *config.fixed);
      path = {lambdas};
      break;
    case SelectionMethod::GcvGrid:
      run_gcv();
      break;
    case SelectionMethod::RiskFixedPoint:
    case SelectionMethod::RiskFixedPointSimplified: {
      if (!sigma2) {
        if (config.fallback == Fallback::None)
          throw SelectionError("risk-based selection needs sigma^2, which could not be estimated");
        notes.push_back("falling back to gcv-grid: no sigma^2 for the risk estimate");
        used = SelectionMethod::GcvGrid;
        run_gcv();
        break;
      }
      const FixedPointResult fp = lambda_fixed_point(sys, config, *sigma2);
      notes.insert(notes.end(), fp.notes.begin(), fp.notes.end());
      iterations = fp.iterations;
      if (fp.converged) {
        lambdas = fp.lambdas;
        path = fp.path;
        for (const auto& l : path) criterion.push_back(risk_hat(sys, l, *sigma2));
      } else if (config.fallback == Fallback::None) {
        throw SelectionError(method_name(config.method) + " did not converge in " +
                             std::to_string(fp.iterations) + " iterations (last lambda " +
                             format_lambdas(fp.lambdas) + ")");
      } else {
        notes.push_back("warning: " + method_name(config.method) + " did not converge in " +
                        std::to_string(fp.iterations) + " iterations; falling back to gcv-grid");
        converged = false;
        used = SelectionMethod::GcvGrid;
        run_gcv();
        iterations += fp.iterations;
      }
      break;
    }
  }

  const PenalizedState st = penalized_state(sys, lambdas);
  if (!sigma2) {
    // Last resort for the error bands: residual variance at the selected lambda.
    const double dof = sys.n_obs - st.trace;
    if (dof > 0.0) {
      sigma2 = st.rss / dof;
      estimated = true;
      notes.push_back("sigma^2 taken as RSS / (N_T - tr A) at the selected lambda");
    } else {
      sigma2 = 0.0;
      notes.push_back("sigma^2 unavailable; error bands omit the variance term");
    }
  }
  FitResult fit = finish_fit(sys, st, *sigma2);
  fit.sigma2_estimated = estimated;
  fit.method = method_name(used);
  fit.converged = converged;
  fit.iterations = iterations;
  fit.lambda_path = std::move(path);
  fit.criterion_path = std::move(criterion);
  fit.risk_hat = st.rss + 2.0 * *sigma2 * st.trace - sys.n_obs * *sigma2;
  fit.notes.insert(fit.notes.end(), notes.begin(), notes.end());
  return fit;
}

}  // namespace covgrow
