#include "covgrow/separable.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "covgrow/banded.hpp"

namespace covgrow {

bool check_uniform(const Dataset& data) {
  if (data.empty()) return false;
  const Eigen::VectorXd& t0 = data.front().times;
  for (const Individual& ind : data)
    if (ind.times.size() != t0.size() || ind.times != t0) return false;
  return true;
}

UniformSystem uniform_system(const Dataset& data, const SplineBasis& basis, const CovariateBasis& covariates,
                             int gamma, const Eigen::VectorXd& lambdas) {
  validate_dataset(data, basis.domain());
  if (!check_uniform(data)) throw std::invalid_argument("temporal design is not uniform across individuals");
  const CovariateBasis g = covariates.is_prepared() ? covariates : covariates.prepared(data);
  if (lambdas.size() != g.size() + 1) throw std::invalid_argument("lambda vector has the wrong length");
  for (double l : lambdas)
    if (!(l >= 0.0) || !std::isfinite(l)) throw std::invalid_argument("lambdas must be finite and nonnegative");

  UniformSystem us;
  const Individual& first = data.front();
  const int n = first.size();
  const int nn = static_cast<int>(data.size());
  us.sigma = first.covariance_matrix();
  us.x = Eigen::MatrixXd::Zero(n, basis.size());
  for (int p = 0; p < n; ++p) {
    const BasisBand b = eval_basis(basis, first.times[p]);
    us.x.row(p).segment(b.first, b.values.size()) = b.values.transpose();
  }
  us.y.resize(n, nn);
  us.u.resize(g.size() + 1, nn);
  for (int i = 0; i < nn; ++i) {
    const Individual& ind = data[static_cast<std::size_t>(i)];
    if (ind.time_varying) throw std::invalid_argument("the uniform solver needs covariates fixed in time");
    if (ind.covariance_matrix() != us.sigma)
      throw std::invalid_argument("the uniform solver needs the same covariance for every individual");
    us.y.col(i) = ind.responses;
    us.u.col(i) = g.evaluate(ind.covariates.row(0), i);
  }
  us.s = penalty_matrix(basis, gamma).S;
  us.lambdas = lambdas;

  const Eigen::LLT<Eigen::MatrixXd> w = checked_llt(us.sigma, "within-individual covariance");
  us.cx = us.x.transpose() * w.solve(us.x);
  us.xwy = us.x.transpose() * w.solve(us.y);

  // Descending eigen-decomposition of U U^t with a deterministic sign.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(us.u * us.u.transpose());
  const int nf = us.n_functions();
  us.o.resize(nf, nf);
  us.d.resize(nf);
  for (int j = 0; j < nf; ++j) {
    us.d[j] = es.eigenvalues()[nf - 1 - j];
    Eigen::VectorXd v = es.eigenvectors().col(nf - 1 - j);
    for (Eigen::Index r = 0; r < v.size(); ++r)
      if (std::abs(v[r]) > 1e-14) {
        if (v[r] < 0.0) v = -v;
        break;
      }
    us.o.col(j) = v;
  }
  us.min_gap = std::numeric_limits<double>::infinity();
  const double top = std::max(us.d[0], std::numeric_limits<double>::min());
  for (int j = 1; j < nf; ++j) us.min_gap = std::min(us.min_gap, (us.d[j - 1] - us.d[j]) / top);
  return us;
}

Eigen::MatrixXd solve_multivariate(const UniformSystem& us) {
  const int kk = us.n_basis();
  const int nf = us.n_functions();
  // vec(Cx a U U^t + S a Lambda) = (U U^t (x) Cx + Lambda (x) S) vec(a).
  const Eigen::MatrixXd uu = us.u * us.u.transpose();
  Eigen::MatrixXd m(kk * nf, kk * nf);
  for (int a = 0; a < nf; ++a)
    for (int b = 0; b < nf; ++b) {
      m.block(a * kk, b * kk, kk, kk) = uu(a, b) * us.cx;
      if (a == b) m.block(a * kk, b * kk, kk, kk) += us.lambdas[a] * us.s;
    }
  const Eigen::MatrixXd rhs = us.xwy * us.u.transpose();
  const Eigen::VectorXd sol =
      checked_llt(m, "multivariate system").solve(rhs.reshaped());
  return sol.reshaped(kk, nf);
}

SeparableSolution solve_separable(const UniformSystem& us, FactorizationLog* log) {
  const int kk = us.n_basis();
  const int nf = us.n_functions();
  SeparableSolution out;
  out.same_model = (us.lambdas.array() == us.lambdas[0]).all();
  if (!out.same_model)
    out.notes.push_back("unequal lambdas: the rotated penalty defines a different model");
  if (nf > 1 && us.min_gap < 1e-10) {
    std::ostringstream os;
    os << "near-degenerate eigenvalues of U U^t (relative gap " << us.min_gap
       << "); the rotation is not unique";
    out.notes.push_back(os.str());
  }
  const Eigen::MatrixXd rhs = us.xwy * us.u.transpose() * us.o;  // K x (L+1)
  out.alpha_rotated.resize(kk, nf);
  for (int l = 0; l < nf; ++l) {
    const Eigen::MatrixXd m = us.d[l] * us.cx + us.lambdas[l] * us.s;
    if (log) log->sizes.push_back(static_cast<int>(m.rows()));
    const std::string what = "separable sub-problem " + std::to_string(l);
    out.alpha_rotated.col(l) = checked_llt(m, what.c_str()).solve(rhs.col(l));
  }
  out.alpha = out.alpha_rotated * us.o.transpose();
  return out;
}

}  // namespace covgrow
