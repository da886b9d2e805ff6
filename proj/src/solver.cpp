#include "covgrow/solver.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "covgrow/errors.hpp"

namespace covgrow {

namespace {

void check_lambdas(const AssembledSystem& sys, const Eigen::VectorXd& lambdas) {
  if (lambdas.size() != sys.n_functions()) {
    std::ostringstream os;
    os << "expected " << sys.n_functions() << " smoothing parameters, got " << lambdas.size();
    throw std::invalid_argument(os.str());
  }
  for (double l : lambdas)
    if (!(l >= 0.0) || !std::isfinite(l))
      throw std::invalid_argument("smoothing parameters must be finite and nonnegative");
}

std::string lambda_text(const Eigen::VectorXd& lambdas) {
  std::ostringstream os;
  os << '(';
  for (Eigen::Index l = 0; l < lambdas.size(); ++l) os << (l ? ", " : "") << lambdas[l];
  os << ')';
  return os.str();
}

// Symmetric eigen-pseudo-inverse with a threshold relative to the largest
// eigenvalue magnitude.
Eigen::MatrixXd pseudo_inverse(const Eigen::MatrixXd& a, double rel) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  const Eigen::VectorXd& ev = es.eigenvalues();
  const double cut = rel * ev.cwiseAbs().maxCoeff();
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(ev.size());
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    if (std::abs(ev[i]) > cut) inv[i] = 1.0 / ev[i];
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

PenalizedFactor::PenalizedFactor(const AssembledSystem& sys, const Eigen::VectorXd& lambdas,
                                 Storage path) {
  check_lambdas(sys, lambdas);
  if (path == Storage::Banded && !sys.banded())
    throw std::invalid_argument("banded factorization requested on a dense system");
  banded_ = sys.banded() && path != Storage::Dense;
  data_ = (sys.banded() && !banded_) ? dense_data_factor(sys) : sys.data_factor;
  factor_ = data_;

  const ModelLayout& lay = sys.layout;
  const Eigen::MatrixXd& root = sys.penalty.root;
  const int n = sys.n_coef();
  Eigen::VectorXd v(n);
  Eigen::VectorXd scale = sys.cross.diagonal();
  for (int l = 0; l < lay.n_functions(); ++l) {
    if (lambdas[l] == 0.0) continue;
    const double w = std::sqrt(lambdas[l]);
    for (Eigen::Index q = 0; q < root.rows(); ++q) {
      v.setZero();
      for (int k = 0; k < lay.n_basis(); ++k) v[lay.coef_index(k, l)] = w * root(q, k);
      factor_.add_row(v);
    }
    for (int k = 0; k < lay.n_basis(); ++k) scale[lay.coef_index(k, l)] += lambdas[l] * sys.penalty.S(k, k);
  }
  try {
    factor_.check_pivots(scale.cwiseSqrt(), 1e-12, "penalized factorization");
  } catch (const SingularSystemError& e) {
    throw SingularSystemError(std::string(e.what()) + " at lambda = " + lambda_text(lambdas) +
                              "; the penalized system is singular (too little data for the "
                              "unpenalized directions?)");
  }
}

Eigen::MatrixXd PenalizedFactor::solve(const Eigen::MatrixXd& b) const {
  Eigen::MatrixXd x = b;
  factor_.solve_rt(x);
  factor_.solve_r(x);
  return x;
}

Eigen::VectorXd PenalizedFactor::coef() const {
  Eigen::MatrixXd x = factor_.qty();
  factor_.solve_r(x);
  return x.col(0);
}

Eigen::MatrixXd PenalizedState::gcg() const {
  // G C G = (G R_d^t)(G R_d^t)^t with G R_d^t = R^-1 w^t.
  Eigen::MatrixXd y = w.transpose();
  factor.factor().solve_r(y);
  return y * y.transpose();
}

PenalizedState penalized_state(const AssembledSystem& sys, const Eigen::VectorXd& lambdas,
                               Storage path) {
  PenalizedState st{lambdas, PenalizedFactor(sys, lambdas, path), {}, {}, 0.0, 0.0};
  st.coef = st.factor.coef();
  Eigen::MatrixXd wt = st.factor.data_factor().rt();
  st.factor.factor().solve_rt(wt);
  st.w = wt.transpose();
  st.trace = st.w.squaredNorm();
  st.rss = weighted_rss(sys, st.coef);
  return st;
}

Eigen::VectorXd solve_penalized(const AssembledSystem& sys, const Eigen::VectorXd& lambdas,
                                Storage path) {
  return PenalizedFactor(sys, lambdas, path).coef();
}

double influence_trace(const AssembledSystem& sys, const Eigen::VectorXd& lambdas) {
  return penalized_state(sys, lambdas).trace;
}

double weighted_rss(const AssembledSystem& sys, const Eigen::VectorXd& coef) {
  return (sys.wresponse - sys.wdesign * coef).squaredNorm();
}

Eigen::MatrixXd posterior_covariance(const AssembledSystem& sys, const Eigen::VectorXd& lambdas,
                                     double sigma2) {
  check_lambdas(sys, lambdas);
  if (!(sigma2 > 0.0)) throw std::invalid_argument("sigma^2 must be positive");
  // Data precision (sigma^2 C^-1)^-1 = C / sigma^2, which needs C invertible.
  checked_llt(sys.cross, "posterior covariance: C = X^t Sigma^-1 X");
  const Eigen::MatrixXd data_precision = sys.cross / sigma2;
  // Prior covariance sigma^2 S_c^- and its generalized inverse.
  const Eigen::MatrixXd prior_cov = sigma2 * pseudo_inverse(sys.penalty_total(lambdas), 1e-10);
  const Eigen::MatrixXd prior_precision = pseudo_inverse(prior_cov, 1e-10);
  const Eigen::MatrixXd precision = data_precision + prior_precision;
  const Eigen::LLT<Eigen::MatrixXd> llt = checked_llt(precision, "posterior precision");
  Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(precision.rows(), precision.cols()));
  return 0.5 * (cov + cov.transpose());
}

ExpectedError expected_error(const AssembledSystem& sys, const Eigen::VectorXd& lambdas,
                             const Eigen::VectorXd& alpha_true, double sigma2) {
  if (alpha_true.size() != sys.n_coef()) throw std::invalid_argument("coefficient vector has the wrong length");
  const PenalizedState st = penalized_state(sys, lambdas);
  ExpectedError e;
  e.variance = sigma2 * st.gcg();
  const Eigen::VectorXd b = st.factor.solve(sys.apply_penalty_total(lambdas, alpha_true));
  e.bias = b * b.transpose();
  return e;
}

FitResult finish_fit(const AssembledSystem& sys, const PenalizedState& state, double sigma2) {
  FitResult fit;
  fit.coef = state.coef;
  fit.alpha = sys.layout.alpha_matrix(state.coef);
  fit.beta = sys.layout.beta_full(state.coef);
  fit.lambdas = state.lambdas;
  fit.sigma2 = sigma2;
  fit.trace_A = state.trace;
  fit.rss = state.rss;
  const double n = sys.n_obs;
  const double denom = 1.0 - state.trace / n;
  fit.gcv = denom > 0.0 ? (state.rss / n) / (denom * denom) : std::numeric_limits<double>::infinity();
  // Plug-in expected error with alpha_hat in place of the truth.
  const Eigen::VectorXd b = state.factor.solve(sys.apply_penalty_total(state.lambdas, state.coef));
  fit.band_covariance = sigma2 * state.gcg() + b * b.transpose();
  fit.notes = sys.notes;
  return fit;
}

Prediction predict(const ModelLayout& layout, const Eigen::VectorXd& coef,
                   const Eigen::MatrixXd& band_covariance, const Eigen::VectorXd& times,
                   const Eigen::MatrixXd& covariates, int individual) {
  const Eigen::Index n = times.size();
  if (covariates.rows() != 1 && covariates.rows() != n)
    throw std::invalid_argument("covariates need one row, or one row per prediction time");
  if (band_covariance.rows() != coef.size() || band_covariance.cols() != coef.size())
    throw std::invalid_argument("error-band covariance does not match the coefficients");
  Prediction out;
  out.mean.resize(n);
  out.se.resize(n);
  for (Eigen::Index p = 0; p < n; ++p) {
    const Eigen::RowVectorXd u = covariates.row(covariates.rows() == 1 ? 0 : p);
    const Eigen::RowVectorXd d = layout.design_row(times[p], u, individual);
    out.mean[p] = d.dot(coef);
    out.se[p] = std::sqrt(std::max(0.0, d.dot(band_covariance * d.transpose())));
  }
  return out;
}

}  // namespace covgrow
