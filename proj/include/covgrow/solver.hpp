#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "covgrow/banded.hpp"
#include "covgrow/design.hpp"

namespace covgrow {

/// Triangular factor R of G^-1 = C + sum_l lambda_l S_l (R^t R = G^-1).
///
/// R is obtained by rotating the weighted penalty square-root rows
/// sqrt(lambda_l) E_l into the data factor, which keeps the data information
/// in the penalty null space accurate even for very large lambda. On banded
/// systems the spline block keeps its band and the parametric part is a
/// dense border.
class PenalizedFactor {
 public:
  /// `path` = Dense ignores the band structure (and refactors the data).
  /// Throws std::invalid_argument for negative or wrongly sized lambdas and
  /// SingularSystemError when the penalized matrix is numerically singular.
  PenalizedFactor(const AssembledSystem& sys, const Eigen::VectorXd& lambdas,
                  Storage path = Storage::Auto);

  bool banded() const { return banded_; }
  int size() const { return factor_.size(); }
  /// G b.
  Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const;
  /// The penalized least-squares solution alpha_hat_c.
  Eigen::VectorXd coef() const;
  const GivensFactor& factor() const { return factor_; }
  /// Data factor the penalty rows were rotated into.
  const GivensFactor& data_factor() const { return data_; }

 private:
  bool banded_ = false;
  GivensFactor data_;
  GivensFactor factor_;
};

/// Everything the selection criteria need at one lambda vector.
struct PenalizedState {
  Eigen::VectorXd lambdas;
  PenalizedFactor factor;
  Eigen::VectorXd coef;  // alpha_hat_c
  Eigen::MatrixXd w;     // R_data R^-1, so that tr A_c = ||w||_F^2
  double trace = 0.0;    // tr A_c = tr(G C)
  double rss = 0.0;      // weighted residual sum of squares

  /// G C G, symmetric.
  Eigen::MatrixXd gcg() const;
};

PenalizedState penalized_state(const AssembledSystem& sys, const Eigen::VectorXd& lambdas,
                               Storage path = Storage::Auto);

/// alpha_hat_c solving (C + S_c(lambda)) a = X^t Sigma_hat^-1 Y.
Eigen::VectorXd solve_penalized(const AssembledSystem& sys, const Eigen::VectorXd& lambdas,
                                Storage path = Storage::Auto);

/// tr A_c(lambda) = tr(G C), computed without forming A_c.
double influence_trace(const AssembledSystem& sys, const Eigen::VectorXd& lambdas);

/// (Y - X a)^t Sigma_hat^-1 (Y - X a).
double weighted_rss(const AssembledSystem& sys, const Eigen::VectorXd& coef);

/// Bayesian posterior covariance ((sigma^2 C^-1)^-1 + (sigma^2 S_c^-)^-)^-1,
/// with the generalized inverse of S_c taken by eigendecomposition
/// (relative threshold 1e-10). Throws SingularSystemError if C is singular.
Eigen::MatrixXd posterior_covariance(const AssembledSystem& sys, const Eigen::VectorXd& lambdas,
                                     double sigma2);

/// E[(a_hat - a)(a_hat - a)^t] = sigma^2 G C G + G S_c a a^t S_c G.
struct ExpectedError {
  Eigen::MatrixXd variance;
  Eigen::MatrixXd bias;
  Eigen::MatrixXd total() const { return variance + bias; }
};

ExpectedError expected_error(const AssembledSystem& sys, const Eigen::VectorXd& lambdas,
                             const Eigen::VectorXd& alpha_true, double sigma2);

/// A fitted model. Lambdas are in the sigma^2-absorbed convention.
struct FitResult {
  Eigen::VectorXd coef;     // reduced coordinates, model layout order
  Eigen::MatrixXd alpha;    // K x (L+1)
  Eigen::VectorXd beta;     // full parametric coefficients
  Eigen::VectorXd lambdas;
  double sigma2 = 0.0;
  bool sigma2_estimated = false;
  double trace_A = 0.0;
  double gcv = 0.0;
  double rss = 0.0;
  std::optional<double> risk_hat;
  /// Plug-in expected-error covariance of coef, used for error bands.
  Eigen::MatrixXd band_covariance;
  std::optional<Eigen::MatrixXd> posterior_cov;

  std::string method;
  bool converged = true;
  int iterations = 0;
  std::vector<Eigen::VectorXd> lambda_path;
  std::vector<double> criterion_path;  // V or R-hat along lambda_path
  std::vector<std::string> notes;
};

/// Fills the coefficient, trace, residual and error-band fields at `lambdas`.
FitResult finish_fit(const AssembledSystem& sys, const PenalizedState& state, double sigma2);

struct Prediction {
  Eigen::VectorXd mean;
  Eigen::VectorXd se;
};

/// Mean and plug-in standard error at the given times. `covariates` is one
/// row (fixed in time) or one row per time. `individual` indexes per-id terms
/// (-1 for an individual outside the fitted data: its per-id terms are zero).
Prediction predict(const ModelLayout& layout, const Eigen::VectorXd& coef,
                   const Eigen::MatrixXd& band_covariance, const Eigen::VectorXd& times,
                   const Eigen::MatrixXd& covariates, int individual);

}  // namespace covgrow
