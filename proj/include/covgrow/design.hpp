#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "covgrow/banded.hpp"
#include "covgrow/bspline.hpp"

namespace covgrow {

/// One growth curve: responses at n_i times with a within-individual
/// covariance known up to the global scalar sigma^2.
struct Individual {
  std::string id;
  Eigen::VectorXd times;
  Eigen::VectorXd responses;
  /// Diagonal of Sigma_i; ignored when `covariance` is set.
  Eigen::VectorXd variances;
  std::optional<Eigen::MatrixXd> covariance;
  /// 1 x M for covariates fixed in time, n_i x M when `time_varying`.
  Eigen::MatrixXd covariates;
  bool time_varying = false;

  int size() const { return static_cast<int>(times.size()); }
  Eigen::RowVectorXd covariates_at(int p) const {
    return time_varying ? Eigen::RowVectorXd(covariates.row(p)) : Eigen::RowVectorXd(covariates.row(0));
  }
  Eigen::MatrixXd covariance_matrix() const;
};

using Dataset = std::vector<Individual>;

/// Throws std::invalid_argument describing the first violated invariant.
void validate_dataset(const Dataset& data, Interval domain);

/// Interior knots at quantiles j/(count+1) of the pooled measurement times.
std::vector<double> quantile_knots(const Dataset& data, int count, Interval domain);
/// Interior knots at the typical times (per-position means across individuals).
std::vector<double> typical_knots(const Dataset& data, Interval domain);

// ---------------------------------------------------------------------------
// Covariate basis g_l(u, i) multiplying the nonparametric function f_l(t).

enum class CovariateForm { Linear, Quadratic, Log, PerId };

struct CovariateSpec {
  CovariateForm form = CovariateForm::Linear;
  int column = -1;   // unused for PerId
  std::string name;  // column name, used in labels
};

struct CovariateTerm {
  CovariateForm form = CovariateForm::Linear;
  int column = -1;
  int individual = -1;  // PerId only
  double center = 0.0;
  double offset = 0.0;  // Quadratic: (u - center)^2 - offset
  std::string label;
};

class CovariateBasis {
 public:
  CovariateBasis() = default;
  explicit CovariateBasis(std::vector<CovariateSpec> specs) : specs_(std::move(specs)) {}
  /// Already-prepared terms, e.g. restored from a saved model.
  static CovariateBasis from_terms(std::vector<CovariateSpec> specs, std::vector<CovariateTerm> terms);

  /// Expands per-id terms and fixes centering constants from the dataset.
  /// Continuous terms are centered; indicator terms are not.
  CovariateBasis prepared(const Dataset& data) const;

  const std::vector<CovariateSpec>& specs() const { return specs_; }
  const std::vector<CovariateTerm>& terms() const { return terms_; }
  bool is_prepared() const { return prepared_; }
  /// L, the number of covariate-modulated functions (excluding f_0).
  int size() const { return static_cast<int>(terms_.size()); }
  /// (1, g_1, ..., g_L) for covariate row u of individual `individual`.
  Eigen::VectorXd evaluate(const Eigen::RowVectorXd& u, int individual) const;

 private:
  std::vector<CovariateSpec> specs_;
  std::vector<CovariateTerm> terms_;
  bool prepared_ = false;
};

// ---------------------------------------------------------------------------
// Parametric terms h_j(t, u, i) with coefficients beta_j.

enum class ParametricForm { Intercept, PerIdIntercept, Linear };

struct ParametricSpec {
  ParametricForm form = ParametricForm::Intercept;
  int column = -1;
  std::string name;
};

struct ParametricTerm {
  ParametricForm form = ParametricForm::Intercept;
  int column = -1;
  int individual = -1;
  double center = 0.0;
  std::string label;
};

class ParametricBasis {
 public:
  ParametricBasis() = default;
  explicit ParametricBasis(std::vector<ParametricSpec> specs) : specs_(std::move(specs)) {}
  static ParametricBasis from_terms(std::vector<ParametricSpec> specs, std::vector<ParametricTerm> terms);

  ParametricBasis prepared(const Dataset& data) const;

  const std::vector<ParametricSpec>& specs() const { return specs_; }
  const std::vector<ParametricTerm>& terms() const { return terms_; }
  bool is_prepared() const { return prepared_; }
  int size() const { return static_cast<int>(terms_.size()); }
  Eigen::RowVectorXd evaluate(double t, const Eigen::RowVectorXd& u, int individual) const;

  /// Groups of terms whose columns sum to the constant function.
  std::vector<std::vector<int>> constant_groups() const;

 private:
  std::vector<ParametricSpec> specs_;
  std::vector<ParametricTerm> terms_;
  bool prepared_ = false;
};

// ---------------------------------------------------------------------------

/// Coefficient layout shared by assembly, fitting and prediction.
///
/// Spline coefficients are interleaved: alpha(k, l) sits at k (L+1) + l, which
/// makes X^t X banded. Parametric coefficients follow, expressed in reduced
/// coordinates: beta_full = beta_map * beta_reduced.
struct ModelLayout {
  SplineBasis basis;
  CovariateBasis covariates;
  ParametricBasis parametric;
  std::vector<std::string> ids;
  Eigen::MatrixXd beta_map;

  int n_basis() const { return basis.size(); }
  int n_functions() const { return covariates.size() + 1; }
  int n_spline() const { return n_basis() * n_functions(); }
  int n_beta() const { return static_cast<int>(beta_map.cols()); }
  int n_beta_full() const { return parametric.size(); }
  int n_coef() const { return n_spline() + n_beta(); }
  int coef_index(int k, int l) const { return k * n_functions() + l; }

  int individual_index(const std::string& id) const;
  /// Design row in reduced coordinates for time t with covariate row u.
  Eigen::RowVectorXd design_row(double t, const Eigen::RowVectorXd& u, int individual) const;
  std::vector<std::string> coef_labels() const;

  /// alpha as K x (L+1) and beta in full coordinates.
  Eigen::MatrixXd alpha_matrix(const Eigen::VectorXd& coef) const;
  Eigen::VectorXd beta_full(const Eigen::VectorXd& coef) const;
  Eigen::VectorXd pack(const Eigen::MatrixXd& alpha, const Eigen::VectorXd& beta_reduced) const;
  /// Least-squares reduced coordinates of a full beta (exact when it lies in
  /// the range of beta_map, i.e. satisfies the sum-to-zero constraints).
  Eigen::VectorXd reduce_beta(const Eigen::VectorXd& beta_full) const;
};

/// Per-individual design blocks. For covariates fixed in time the spline block
/// is the interleaved Kronecker product g(u_i)^t (x) X_i; for time-varying
/// covariates each row uses g(u_i(t_p)). The parametric block is in full
/// coordinates (before any intercept reparameterization).
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> individual_design(const Individual& ind,
                                                              const SplineBasis& basis,
                                                              const CovariateBasis& covariates,
                                                              const ParametricBasis& parametric,
                                                              int individual);

enum class Storage { Auto, Dense, Banded };

struct AssembleOptions {
  Storage storage = Storage::Auto;
  bool repair_intercepts = true;
};

/// The concatenated generalized-ridge system (C + sum_l lambda_l S_l) a = X^t W Y
/// with W = Sigma_hat^-1, stored through whitened rows W^(1/2) X and W^(1/2) Y.
struct AssembledSystem {
  AssembledSystem(ModelLayout l, PenaltyMatrix p) : layout(std::move(l)), penalty(std::move(p)) {}

  ModelLayout layout;
  PenaltyMatrix penalty;

  int n_obs = 0;
  std::vector<int> row_offset;  // individual i owns rows [row_offset[i], row_offset[i+1])
  Eigen::MatrixXd design;       // X_c (reduced parametric coordinates)
  Eigen::VectorXd response;     // Y_c
  Eigen::VectorXd point_variance;  // diag of Sigma_hat_c
  Eigen::MatrixXd wdesign;      // Sigma_hat^-1/2 X_c
  Eigen::VectorXd wresponse;    // Sigma_hat^-1/2 Y_c
  Eigen::MatrixXd cross;        // C = X^t Sigma_hat^-1 X
  Eigen::VectorXd rhs;          // X^t Sigma_hat^-1 Y
  /// Spline block of C in band storage when the banded path is active.
  std::optional<BandedSymmetric> cross_band;
  /// Triangular factor of the whitened design: R^t R = C, with Q^t Y.
  GivensFactor data_factor;
  /// Per-function reference scale tr(C_ll) / tr(S) used to standardize lambda.
  Eigen::VectorXd lambda_scale;
  bool time_varying = false;
  bool reparameterized = false;
  std::vector<std::string> notes;

  int n_coef() const { return layout.n_coef(); }
  int n_functions() const { return layout.n_functions(); }
  int n_spline() const { return layout.n_spline(); }
  bool banded() const { return cross_band.has_value(); }

  /// S_l embedded in the full coefficient layout (dense, materialized).
  Eigen::MatrixXd penalty_block(int l) const;
  /// sum_l lambda_l S_l (dense).
  Eigen::MatrixXd penalty_total(const Eigen::VectorXd& lambdas) const;
  /// S_l v without materializing S_l.
  Eigen::MatrixXd apply_penalty(int l, const Eigen::MatrixXd& v) const;
  Eigen::MatrixXd apply_penalty_total(const Eigen::VectorXd& lambdas, const Eigen::MatrixXd& v) const;
};

/// Data factor by dense Householder QR of the whitened design (no band use).
GivensFactor dense_data_factor(const AssembledSystem& sys);

/// Builds the system and checks identifiability of C + sum_l S_l. Per-id and
/// global intercepts confounded with the constant in f_0 are repaired by a
/// sum-to-zero constraint per group. Throws IdentifiabilityError otherwise.
AssembledSystem assemble(const Dataset& data, const SplineBasis& basis,
                         const CovariateBasis& covariates, const ParametricBasis& parametric,
                         int gamma, const AssembleOptions& options = {});

}  // namespace covgrow
