#include "covgrow/design.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "covgrow/errors.hpp"

namespace covgrow {

namespace {

[[noreturn]] void bad(const std::string& msg) { throw std::invalid_argument(msg); }

double covariate_value(const Eigen::RowVectorXd& u, int column) {
  if (column < 0 || column >= u.size()) {
    std::ostringstream os;
    os << "covariate column " << column << " missing (row has " << u.size() << " columns)";
    bad(os.str());
  }
  return u[column];
}

// Mean of a per-row covariate function: over individuals when covariates are
// fixed in time, over all observations otherwise.
template <typename F>
double dataset_mean(const Dataset& data, F&& f) {
  double sum = 0.0;
  long count = 0;
  for (const auto& ind : data) {
    const int rows = ind.time_varying ? ind.size() : 1;
    for (int p = 0; p < rows; ++p) {
      sum += f(Eigen::RowVectorXd(ind.covariates.row(p)));
      ++count;
    }
  }
  return count ? sum / count : 0.0;
}

std::string form_label(CovariateForm f, const std::string& name) {
  switch (f) {
    case CovariateForm::Linear: return "lin:" + name;
    case CovariateForm::Quadratic: return "quad:" + name;
    case CovariateForm::Log: return "log:" + name;
    case CovariateForm::PerId: return "per_id";
  }
  return name;
}

}  // namespace

Eigen::MatrixXd Individual::covariance_matrix() const {
  if (covariance) return *covariance;
  return variances.asDiagonal();
}

void validate_dataset(const Dataset& data, Interval domain) {
  if (data.empty()) bad("dataset is empty");
  std::set<std::string> seen;
  const Eigen::Index m = data.front().covariates.cols();
  for (const auto& ind : data) {
    const std::string who = "individual '" + ind.id + "': ";
    if (!seen.insert(ind.id).second) bad(who + "duplicate id");
    const int n = ind.size();
    if (n < 1) bad(who + "no measurements");
    if (ind.responses.size() != n) bad(who + "times and responses differ in length");
    if (!ind.times.allFinite() || !ind.responses.allFinite()) bad(who + "non-finite time or response");
    for (int p = 0; p < n; ++p)
      if (!domain.contains(ind.times[p])) {
        std::ostringstream os;
        os << who << "time " << ind.times[p] << " outside domain [" << domain.lo << ", "
           << domain.hi << "]";
        bad(os.str());
      }
    if (ind.covariance) {
      const auto& s = *ind.covariance;
      if (s.rows() != n || s.cols() != n) bad(who + "covariance matrix has wrong shape");
      if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-12 * s.cwiseAbs().maxCoeff())
        bad(who + "covariance matrix is not symmetric");
      Eigen::LLT<Eigen::MatrixXd> llt(s);
      if (llt.info() != Eigen::Success) bad(who + "covariance matrix is not positive definite");
    } else {
      if (ind.variances.size() != n) bad(who + "variances and times differ in length");
      if (!(ind.variances.array() > 0.0).all() || !ind.variances.allFinite())
        bad(who + "variances must be positive and finite");
    }
    if (ind.covariates.cols() != m) bad(who + "covariate vector length mismatch");
    if (ind.covariates.rows() != (ind.time_varying ? n : 1))
      bad(who + "covariate rows do not match the time-varying setting");
    if (!ind.covariates.allFinite()) bad(who + "non-finite covariate");
  }
}

std::vector<double> quantile_knots(const Dataset& data, int count, Interval domain) {
  if (count < 0) bad("knot count must be nonnegative");
  std::vector<double> pooled;
  for (const auto& ind : data) pooled.insert(pooled.end(), ind.times.begin(), ind.times.end());
  if (pooled.empty()) bad("no times to place knots");
  std::sort(pooled.begin(), pooled.end());
  std::vector<double> knots;
  const double n = static_cast<double>(pooled.size());
  for (int j = 1; j <= count; ++j) {
    // Linear interpolation between order statistics.
    const double h = (n - 1) * j / (count + 1.0);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, pooled.size() - 1);
    knots.push_back(pooled[lo] + (h - lo) * (pooled[hi] - pooled[lo]));
  }
  for (std::size_t j = 0; j < knots.size(); ++j) {
    if (!(knots[j] > domain.lo && knots[j] < domain.hi) || (j > 0 && !(knots[j] > knots[j - 1])))
      bad("quantile knots are not distinct interior points; use fewer knots or an explicit list");
  }
  return knots;
}

std::vector<double> typical_knots(const Dataset& data, Interval domain) {
  if (data.empty()) bad("no times to place knots");
  const int n = data.front().size();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(n);
  for (const auto& ind : data) {
    if (ind.size() != n) bad("typical knots need the same number of measurements per individual");
    Eigen::VectorXd t = ind.times;
    std::sort(t.begin(), t.end());
    mean += t;
  }
  mean /= static_cast<double>(data.size());
  std::vector<double> knots;
  const double eps = 1e-9 * domain.width();
  for (double t : mean)
    if (t > domain.lo + eps && t < domain.hi - eps && (knots.empty() || t > knots.back() + eps))
      knots.push_back(t);
  return knots;
}

// ---------------------------------------------------------------------------

CovariateBasis CovariateBasis::from_terms(std::vector<CovariateSpec> specs,
                                          std::vector<CovariateTerm> terms) {
  CovariateBasis b(std::move(specs));
  b.terms_ = std::move(terms);
  b.prepared_ = true;
  return b;
}

CovariateBasis CovariateBasis::prepared(const Dataset& data) const {
  CovariateBasis out(specs_);
  for (const auto& spec : specs_) {
    if (spec.form == CovariateForm::PerId) {
      for (std::size_t i = 0; i < data.size(); ++i) {
        CovariateTerm t;
        t.form = spec.form;
        t.individual = static_cast<int>(i);
        t.label = "id=" + data[i].id;
        out.terms_.push_back(t);
      }
      continue;
    }
    CovariateTerm t;
    t.form = spec.form;
    t.column = spec.column;
    t.label = form_label(spec.form, spec.name);
    const int c = spec.column;
    switch (spec.form) {
      case CovariateForm::Linear:
        t.center = dataset_mean(data, [c](const Eigen::RowVectorXd& u) { return covariate_value(u, c); });
        break;
      case CovariateForm::Log:
        t.center = dataset_mean(data, [c](const Eigen::RowVectorXd& u) {
          const double v = covariate_value(u, c);
          if (!(v > 0.0)) bad("log covariate term needs positive values");
          return std::log(v);
        });
        break;
      case CovariateForm::Quadratic: {
        const double mu = dataset_mean(data, [c](const Eigen::RowVectorXd& u) { return covariate_value(u, c); });
        t.center = mu;
        t.offset = dataset_mean(data, [c, mu](const Eigen::RowVectorXd& u) {
          const double d = covariate_value(u, c) - mu;
          return d * d;
        });
        break;
      }
      case CovariateForm::PerId: break;
    }
    out.terms_.push_back(t);
  }
  out.prepared_ = true;
  return out;
}

Eigen::VectorXd CovariateBasis::evaluate(const Eigen::RowVectorXd& u, int individual) const {
  Eigen::VectorXd g(terms_.size() + 1);
  g[0] = 1.0;
  for (std::size_t j = 0; j < terms_.size(); ++j) {
    const auto& t = terms_[j];
    double v = 0.0;
    switch (t.form) {
      case CovariateForm::Linear: v = covariate_value(u, t.column) - t.center; break;
      case CovariateForm::Quadratic: {
        const double d = covariate_value(u, t.column) - t.center;
        v = d * d - t.offset;
        break;
      }
      case CovariateForm::Log: {
        const double x = covariate_value(u, t.column);
        if (!(x > 0.0)) bad("log covariate term needs positive values");
        v = std::log(x) - t.center;
        break;
      }
      case CovariateForm::PerId: v = (individual == t.individual) ? 1.0 : 0.0; break;
    }
    g[static_cast<Eigen::Index>(j) + 1] = v;
  }
  return g;
}

// ---------------------------------------------------------------------------

ParametricBasis ParametricBasis::from_terms(std::vector<ParametricSpec> specs,
                                            std::vector<ParametricTerm> terms) {
  ParametricBasis b(std::move(specs));
  b.terms_ = std::move(terms);
  b.prepared_ = true;
  return b;
}

ParametricBasis ParametricBasis::prepared(const Dataset& data) const {
  ParametricBasis out(specs_);
  for (const auto& spec : specs_) {
    switch (spec.form) {
      case ParametricForm::Intercept: {
        ParametricTerm t;
        t.form = spec.form;
        t.label = "intercept";
        out.terms_.push_back(t);
        break;
      }
      case ParametricForm::PerIdIntercept:
        for (std::size_t i = 0; i < data.size(); ++i) {
          ParametricTerm t;
          t.form = spec.form;
          t.individual = static_cast<int>(i);
          t.label = "intercept:id=" + data[i].id;
          out.terms_.push_back(t);
        }
        break;
      case ParametricForm::Linear: {
        ParametricTerm t;
        t.form = spec.form;
        t.column = spec.column;
        t.label = "lin:" + spec.name;
        const int c = spec.column;
        t.center = dataset_mean(data, [c](const Eigen::RowVectorXd& u) { return covariate_value(u, c); });
        out.terms_.push_back(t);
        break;
      }
    }
  }
  out.prepared_ = true;
  return out;
}

Eigen::RowVectorXd ParametricBasis::evaluate(double, const Eigen::RowVectorXd& u,
                                             int individual) const {
  Eigen::RowVectorXd h(terms_.size());
  for (std::size_t j = 0; j < terms_.size(); ++j) {
    const auto& t = terms_[j];
    double v = 0.0;
    switch (t.form) {
      case ParametricForm::Intercept: v = 1.0; break;
      case ParametricForm::PerIdIntercept: v = (individual == t.individual) ? 1.0 : 0.0; break;
      case ParametricForm::Linear: v = covariate_value(u, t.column) - t.center; break;
    }
    h[static_cast<Eigen::Index>(j)] = v;
  }
  return h;
}

std::vector<std::vector<int>> ParametricBasis::constant_groups() const {
  std::vector<std::vector<int>> groups;
  std::vector<int> per_id;
  for (std::size_t j = 0; j < terms_.size(); ++j) {
    if (terms_[j].form == ParametricForm::Intercept) groups.push_back({static_cast<int>(j)});
    if (terms_[j].form == ParametricForm::PerIdIntercept) per_id.push_back(static_cast<int>(j));
  }
  if (!per_id.empty()) groups.push_back(per_id);
  return groups;
}

// ---------------------------------------------------------------------------

int ModelLayout::individual_index(const std::string& id) const {
  const auto it = std::find(ids.begin(), ids.end(), id);
  return it == ids.end() ? -1 : static_cast<int>(it - ids.begin());
}

Eigen::RowVectorXd ModelLayout::design_row(double t, const Eigen::RowVectorXd& u,
                                           int individual) const {
  const BasisBand b = eval_basis(basis, t);
  const Eigen::VectorXd g = covariates.evaluate(u, individual);
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(n_coef());
  for (Eigen::Index q = 0; q < b.values.size(); ++q)
    for (int l = 0; l < n_functions(); ++l)
      row[coef_index(b.first + static_cast<int>(q), l)] = b.values[q] * g[l];
  if (n_beta() > 0) row.tail(n_beta()) = parametric.evaluate(t, u, individual) * beta_map;
  return row;
}

std::vector<std::string> ModelLayout::coef_labels() const {
  std::vector<std::string> labels(n_coef());
  for (int k = 0; k < n_basis(); ++k)
    for (int l = 0; l < n_functions(); ++l) {
      const std::string name = l == 0 ? "f0" : "f" + std::to_string(l) + "[" +
                                                    covariates.terms()[l - 1].label + "]";
      labels[coef_index(k, l)] = name + ":B" + std::to_string(k);
    }
  for (int j = 0; j < n_beta(); ++j) {
    // Name a reduced coordinate after the full term when it maps one-to-one.
    const Eigen::VectorXd col = beta_map.col(j);
    Eigen::Index at = 0;
    const bool unit = col.cwiseAbs().maxCoeff(&at) == 1.0 && col.cwiseAbs().sum() == 1.0;
    labels[n_spline() + j] = unit ? parametric.terms()[at].label : "beta_reduced" + std::to_string(j);
  }
  return labels;
}

Eigen::MatrixXd ModelLayout::alpha_matrix(const Eigen::VectorXd& coef) const {
  Eigen::MatrixXd a(n_basis(), n_functions());
  for (int k = 0; k < n_basis(); ++k)
    for (int l = 0; l < n_functions(); ++l) a(k, l) = coef[coef_index(k, l)];
  return a;
}

Eigen::VectorXd ModelLayout::beta_full(const Eigen::VectorXd& coef) const {
  if (n_beta_full() == 0) return Eigen::VectorXd();
  return beta_map * coef.tail(n_beta());
}

Eigen::VectorXd ModelLayout::pack(const Eigen::MatrixXd& alpha,
                                  const Eigen::VectorXd& beta_reduced) const {
  if (alpha.rows() != n_basis() || alpha.cols() != n_functions() || beta_reduced.size() != n_beta())
    bad("coefficient shapes do not match the model layout");
  Eigen::VectorXd coef(n_coef());
  for (int k = 0; k < n_basis(); ++k)
    for (int l = 0; l < n_functions(); ++l) coef[coef_index(k, l)] = alpha(k, l);
  coef.tail(n_beta()) = beta_reduced;
  return coef;
}

Eigen::VectorXd ModelLayout::reduce_beta(const Eigen::VectorXd& full) const {
  if (full.size() != n_beta_full()) bad("beta has the wrong length");
  if (n_beta() == 0) return Eigen::VectorXd();
  return beta_map.colPivHouseholderQr().solve(full);
}

// ---------------------------------------------------------------------------

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> individual_design(const Individual& ind,
                                                              const SplineBasis& basis,
                                                              const CovariateBasis& covariates,
                                                              const ParametricBasis& parametric,
                                                              int individual) {
  const int n = ind.size();
  const int nf = covariates.size() + 1;
  const int rows_u = static_cast<int>(ind.covariates.rows());
  if (rows_u != (ind.time_varying ? n : 1)) bad("covariate rows do not match the time-varying setting");
  Eigen::MatrixXd nonparam = Eigen::MatrixXd::Zero(n, basis.size() * nf);
  Eigen::MatrixXd param(n, parametric.size());
  Eigen::VectorXd g;
  if (!ind.time_varying) g = covariates.evaluate(ind.covariates.row(0), individual);
  for (int p = 0; p < n; ++p) {
    const double t = ind.times[p];
    const BasisBand b = eval_basis(basis, t);
    const Eigen::RowVectorXd u = ind.covariates_at(p);
    if (ind.time_varying) g = covariates.evaluate(u, individual);
    // Column k (L+1) + l holds B_k(t_p) g_l.
    for (Eigen::Index q = 0; q < b.values.size(); ++q)
      for (int l = 0; l < nf; ++l)
        nonparam(p, (b.first + static_cast<int>(q)) * nf + l) = b.values[q] * g[l];
    if (parametric.size() > 0) param.row(p) = parametric.evaluate(t, u, individual);
  }
  return {std::move(nonparam), std::move(param)};
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd AssembledSystem::penalty_block(int l) const {
  const int n = n_coef();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  const int kk = layout.n_basis();
  for (int a = 0; a < kk; ++a)
    for (int b = 0; b < kk; ++b)
      out(layout.coef_index(a, l), layout.coef_index(b, l)) = penalty.S(a, b);
  return out;
}

Eigen::MatrixXd AssembledSystem::penalty_total(const Eigen::VectorXd& lambdas) const {
  if (lambdas.size() != n_functions()) bad("lambda vector has the wrong length");
  const int n = n_coef();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  const int kk = layout.n_basis();
  for (int l = 0; l < n_functions(); ++l)
    for (int a = 0; a < kk; ++a)
      for (int b = 0; b < kk; ++b)
        out(layout.coef_index(a, l), layout.coef_index(b, l)) = lambdas[l] * penalty.S(a, b);
  return out;
}

Eigen::MatrixXd AssembledSystem::apply_penalty(int l, const Eigen::MatrixXd& v) const {
  const int kk = layout.n_basis();
  const int nf = n_functions();
  const int bw = penalty.bandwidth;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(v.rows(), v.cols());
  for (int a = 0; a < kk; ++a)
    for (int b = std::max(0, a - bw + 1); b < std::min(kk, a + bw); ++b)
      out.row(a * nf + l) += penalty.S(a, b) * v.row(b * nf + l);
  return out;
}

Eigen::MatrixXd AssembledSystem::apply_penalty_total(const Eigen::VectorXd& lambdas,
                                                     const Eigen::MatrixXd& v) const {
  if (lambdas.size() != n_functions()) bad("lambda vector has the wrong length");
  const int kk = layout.n_basis();
  const int nf = n_functions();
  const int bw = penalty.bandwidth;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(v.rows(), v.cols());
  for (int a = 0; a < kk; ++a)
    for (int b = std::max(0, a - bw + 1); b < std::min(kk, a + bw); ++b)
      for (int l = 0; l < nf; ++l)
        out.row(a * nf + l) += lambdas[l] * penalty.S(a, b) * v.row(b * nf + l);
  return out;
}

namespace {

// Reduced-to-full map for the parametric coefficients. Each constant group of
// size > 1 keeps all but its last member free and sets the last to minus
// their sum; a lone intercept is dropped.
Eigen::MatrixXd sum_to_zero_map(int j_full, const std::vector<std::vector<int>>& groups) {
  std::vector<int> owner(j_full, -1);
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (int j : groups[g]) owner[j] = static_cast<int>(g);
  std::vector<int> free_cols;
  for (int j = 0; j < j_full; ++j) {
    if (owner[j] >= 0 && groups[owner[j]].back() == j) continue;
    free_cols.push_back(j);
  }
  Eigen::MatrixXd map = Eigen::MatrixXd::Zero(j_full, static_cast<Eigen::Index>(free_cols.size()));
  for (std::size_t c = 0; c < free_cols.size(); ++c) {
    const int j = free_cols[c];
    map(j, static_cast<Eigen::Index>(c)) = 1.0;
    if (owner[j] >= 0) map(groups[owner[j]].back(), static_cast<Eigen::Index>(c)) = -1.0;
  }
  return map;
}

// Replaces the block of `map` belonging to `group` by an orthonormal basis of
// the vectors orthogonal to every row of `constraints` (one column per member).
Eigen::MatrixXd constrain_group(const Eigen::MatrixXd& map, const std::vector<int>& group,
                                const Eigen::MatrixXd& constraints) {
  const Eigen::Index m = static_cast<Eigen::Index>(group.size());
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(constraints.transpose());
  qr.setThreshold(1e-10);
  const Eigen::Index rank = qr.rank();
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(m, m);
  const Eigen::MatrixXd basis = q.rightCols(m - rank);

  std::vector<bool> in_group(map.rows(), false);
  for (int j : group) in_group[j] = true;
  std::vector<Eigen::Index> keep;
  for (Eigen::Index c = 0; c < map.cols(); ++c) {
    bool touches = false;
    for (int j : group) touches = touches || map(j, c) != 0.0;
    if (!touches) keep.push_back(c);
  }
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(map.rows(), static_cast<Eigen::Index>(keep.size()) + basis.cols());
  for (std::size_t c = 0; c < keep.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = map.col(keep[c]);
  for (Eigen::Index c = 0; c < basis.cols(); ++c)
    for (Eigen::Index r = 0; r < m; ++r) out(group[r], static_cast<Eigen::Index>(keep.size()) + c) = basis(r, c);
  return out;
}

// Null direction of C + sum_l scale_l S_l after Jacobi scaling, or an empty
// vector when the matrix is numerically nonsingular.
Eigen::VectorXd null_direction(const Eigen::MatrixXd& m) {
  const Eigen::Index n = m.rows();
  if (n == 0) return Eigen::VectorXd();
  Eigen::VectorXd d(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(m(i, i) > 0.0)) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
      e[i] = 1.0;
      return e;
    }
    d[i] = 1.0 / std::sqrt(m(i, i));
  }
  const Eigen::MatrixXd scaled = d.asDiagonal() * m * d.asDiagonal();
  // A Cholesky pass is enough to accept; the eigensolver only runs to name
  // the offending direction (or on small systems, where it is cheap).
  if (n > 400) {
    Eigen::LLT<Eigen::MatrixXd> llt(scaled);
    if (llt.info() == Eigen::Success) {
      const auto diag = llt.matrixLLT().diagonal();
      if (diag.array().square().minCoeff() > 1e-12) return Eigen::VectorXd();
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(scaled);
  const Eigen::VectorXd& ev = es.eigenvalues();
  if (ev[0] > 1e-12 * ev[n - 1]) return Eigen::VectorXd();
  Eigen::VectorXd dir = d.asDiagonal() * es.eigenvectors().col(0);
  dir /= dir.norm();
  Eigen::Index at = 0;
  dir.cwiseAbs().maxCoeff(&at);
  if (dir[at] < 0) dir = -dir;
  return dir;
}

}  // namespace

AssembledSystem assemble(const Dataset& data, const SplineBasis& basis,
                         const CovariateBasis& covariates_in, const ParametricBasis& parametric_in,
                         int gamma, const AssembleOptions& options) {
  validate_dataset(data, basis.domain());
  const CovariateBasis covariates =
      covariates_in.is_prepared() ? covariates_in : covariates_in.prepared(data);
  const ParametricBasis parametric =
      parametric_in.is_prepared() ? parametric_in : parametric_in.prepared(data);

  std::vector<std::string> ids;
  for (const auto& ind : data) ids.push_back(ind.id);
  const int j_full = parametric.size();
  AssembledSystem sys(ModelLayout{basis, covariates, parametric, ids,
                                  Eigen::MatrixXd::Identity(j_full, j_full)},
                      penalty_matrix(basis, gamma));
  const ModelLayout& lay = sys.layout;
  const int nf = lay.n_functions();
  const int ns = lay.n_spline();

  bool time_varying = false, diagonal = true;
  for (const auto& ind : data) {
    time_varying = time_varying || ind.time_varying;
    diagonal = diagonal && !ind.covariance;
  }
  sys.time_varying = time_varying;
  bool banded = !time_varying && diagonal;
  if (options.storage == Storage::Dense) banded = false;
  if (options.storage == Storage::Banded && !banded)
    bad("banded storage needs time-independent covariates and diagonal covariances");

  sys.row_offset.assign(1, 0);
  for (const auto& ind : data) sys.row_offset.push_back(sys.row_offset.back() + ind.size());
  const int n_obs = sys.row_offset.back();
  sys.n_obs = n_obs;

  Eigen::MatrixXd design_full(n_obs, ns + j_full);
  Eigen::MatrixXd wdesign_full(n_obs, ns + j_full);
  sys.response.resize(n_obs);
  sys.wresponse.resize(n_obs);
  sys.point_variance.resize(n_obs);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Individual& ind = data[i];
    const int r0 = sys.row_offset[i], n = ind.size();
    auto [np, pp] = individual_design(ind, basis, covariates, parametric, static_cast<int>(i));
    Eigen::MatrixXd block(n, ns + j_full);
    block << np, pp;
    design_full.middleRows(r0, n) = block;
    sys.response.segment(r0, n) = ind.responses;
    if (ind.covariance) {
      const Eigen::LLT<Eigen::MatrixXd> llt = checked_llt(*ind.covariance, "within-individual covariance");
      wdesign_full.middleRows(r0, n) = llt.matrixL().solve(block);
      sys.wresponse.segment(r0, n) = llt.matrixL().solve(ind.responses);
      sys.point_variance.segment(r0, n) = ind.covariance->diagonal();
    } else {
      const Eigen::VectorXd w = ind.variances.cwiseSqrt().cwiseInverse();
      wdesign_full.middleRows(r0, n) = w.asDiagonal() * block;
      sys.wresponse.segment(r0, n) = w.cwiseProduct(ind.responses);
      sys.point_variance.segment(r0, n) = ind.variances;
    }
  }

  // Per-function lambda standardization.
  Eigen::MatrixXd cross_full = wdesign_full.transpose() * wdesign_full;
  const double tr_s = sys.penalty.S.trace();
  sys.lambda_scale = Eigen::VectorXd::Ones(nf);
  for (int l = 0; l < nf; ++l) {
    double tr_c = 0.0;
    for (int k = 0; k < lay.n_basis(); ++k) tr_c += cross_full(lay.coef_index(k, l), lay.coef_index(k, l));
    if (tr_c > 0.0 && tr_s > 0.0) sys.lambda_scale[l] = tr_c / tr_s;
  }

  auto check_matrix = [&](const Eigen::MatrixXd& beta_map) {
    const Eigen::Index nb = beta_map.cols();
    Eigen::MatrixXd t = Eigen::MatrixXd::Identity(ns + j_full, ns + nb);
    t.bottomRightCorner(j_full, nb) = beta_map;
    Eigen::MatrixXd m = t.transpose() * cross_full * t;
    const Eigen::MatrixXd& s = sys.penalty.S;
    for (int l = 0; l < nf; ++l)
      for (int a = 0; a < lay.n_basis(); ++a)
        for (int b = 0; b < lay.n_basis(); ++b)
          m(lay.coef_index(a, l), lay.coef_index(b, l)) += sys.lambda_scale[l] * s(a, b);
    return m;
  };

  Eigen::VectorXd dir = null_direction(check_matrix(sys.layout.beta_map));
  const auto groups = parametric.constant_groups();
  if (dir.size() && options.repair_intercepts && !groups.empty()) {
    Eigen::MatrixXd map = sum_to_zero_map(j_full, groups);
    dir = null_direction(check_matrix(map));
    sys.reparameterized = true;
    for (const auto& g : groups) {
      if (g.size() == 1)
        sys.notes.push_back("dropped '" + parametric.terms()[g[0]].label +
                            "': confounded with the constant in f0");
      else
        sys.notes.push_back("constrained " + std::to_string(g.size()) +
                            " per-id intercepts to sum to zero; their mean is carried by f0");
    }
    // Per-id intercepts also absorb the constant part of every f_l whose
    // covariate term is fixed within individuals. Make them orthogonal to
    // those covariate columns so the constants stay with f_l.
    const auto& per_id = groups.back();
    const bool has_per_id =
        parametric.terms()[per_id.front()].form == ParametricForm::PerIdIntercept;
    if (dir.size() && has_per_id && !time_varying) {
      std::vector<int> cols{0};
      for (int l = 1; l < nf; ++l)
        if (covariates.terms()[l - 1].form != CovariateForm::PerId) cols.push_back(l);
      if (cols.size() > 1) {
        Eigen::MatrixXd rows(static_cast<Eigen::Index>(cols.size()), static_cast<Eigen::Index>(per_id.size()));
        for (std::size_t q = 0; q < per_id.size(); ++q) {
          const int i = parametric.terms()[per_id[q]].individual;
          const Eigen::VectorXd g = covariates.evaluate(data[i].covariates.row(0), i);
          for (std::size_t c = 0; c < cols.size(); ++c)
            rows(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(q)) = g[cols[c]];
        }
        map = constrain_group(map, per_id, rows);
        dir = null_direction(check_matrix(map));
        sys.notes.push_back("constrained per-id intercepts to be orthogonal to the covariate "
                            "terms; between-individual covariate effects are carried by f_l");
      }
    }
    sys.layout.beta_map = map;
  }
  if (dir.size()) {
    std::vector<std::string> labels = sys.layout.coef_labels();
    std::ostringstream os;
    os << "model is not identifiable: C + sum_l S_l is singular. Null-space direction:";
    std::vector<Eigen::Index> order(dir.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](Eigen::Index a, Eigen::Index b) { return std::abs(dir[a]) > std::abs(dir[b]); });
    for (std::size_t q = 0; q < std::min<std::size_t>(6, order.size()); ++q) {
      if (std::abs(dir[order[q]]) < 1e-8) break;
      os << ' ' << labels[order[q]] << '=' << dir[order[q]];
    }
    throw IdentifiabilityError(os.str(), dir, std::move(labels));
  }

  const Eigen::Index nb = sys.layout.beta_map.cols();
  sys.design.resize(n_obs, ns + nb);
  sys.design.leftCols(ns) = design_full.leftCols(ns);
  sys.wdesign.resize(n_obs, ns + nb);
  sys.wdesign.leftCols(ns) = wdesign_full.leftCols(ns);
  if (nb > 0) {
    sys.design.rightCols(nb) = design_full.rightCols(j_full) * sys.layout.beta_map;
    sys.wdesign.rightCols(nb) = wdesign_full.rightCols(j_full) * sys.layout.beta_map;
  }
  sys.cross = sys.wdesign.transpose() * sys.wdesign;
  sys.rhs = sys.wdesign.transpose() * sys.wresponse;

  if (banded) {
    // Row p touches only the `order` basis functions live at t_p, so in the
    // interleaved ordering its spline part spans order (L+1) adjacent columns.
    const int width = basis.order() * nf;
    BandedSymmetric band(ns, width - 1);
    for (int r = 0; r < n_obs; ++r) {
      int lo = ns, hi = -1;
      for (int c = 0; c < ns; ++c)
        if (sys.wdesign(r, c) != 0.0) {
          lo = std::min(lo, c);
          hi = c;
        }
      for (int a = lo; a <= hi; ++a)
        for (int b = lo; b <= a; ++b) band.add(a, b, sys.wdesign(r, a) * sys.wdesign(r, b));
    }
    sys.cross_band = std::move(band);
    GivensFactor f(sys.n_coef(), ns, width - 1);
    Eigen::VectorXd row(sys.n_coef());
    for (int r = 0; r < n_obs; ++r) {
      row = sys.wdesign.row(r).transpose();
      f.add_row(row, sys.wresponse[r]);
    }
    sys.data_factor = std::move(f);
  } else {
    sys.data_factor = dense_data_factor(sys);
  }
  return sys;
}

GivensFactor dense_data_factor(const AssembledSystem& sys) {
  const int n = sys.n_coef();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(sys.wdesign);
  const Eigen::Index m = std::min<Eigen::Index>(sys.n_obs, n);
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(n, n);
  r.topRows(m) = qr.matrixQR().topRows(m).triangularView<Eigen::Upper>();
  Eigen::VectorXd qty = Eigen::VectorXd::Zero(n);
  qty.head(m) = (qr.householderQ().transpose() * sys.wresponse).head(m);
  return GivensFactor(r, qty, sys.n_spline(), sys.n_spline() - 1);
}

}  // namespace covgrow
