#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "covgrow/design.hpp"
#include "covgrow/solver.hpp"

namespace covgrow {

enum class SelectionMethod { GcvGrid, RiskFixedPoint, RiskFixedPointSimplified, Fixed };

/// Weight Q of the exact risk: C (predictive) or sum_l S_l (gamma-th derivative).
enum class RiskWeight { Predictive, Derivative };

enum class Fallback { GcvGrid, None };

/// Log-spaced grid of standardized smoothing parameters. A raw lambda_l is
/// the standardized value times AssembledSystem::lambda_scale[l].
struct LambdaGrid {
  double min = 1e-8;
  double max = 1e8;
  int per_decade = 4;

  std::vector<double> values() const;
  void validate() const;
};

struct SelectionConfig {
  SelectionMethod method = SelectionMethod::GcvGrid;
  RiskWeight q = RiskWeight::Predictive;
  LambdaGrid grid;
  bool tie_lambdas = false;  // lambda_1 = ... = lambda_L, lambda_0 free
  double tol = 1e-4;         // relative lambda change per sweep
  int max_iter = 100;
  Fallback fallback = Fallback::GcvGrid;
  /// Standardized starting point of the fixed-point iteration (default all 1).
  std::optional<Eigen::VectorXd> initial;
  /// Standardized lambdas for SelectionMethod::Fixed.
  std::optional<Eigen::VectorXd> fixed;
  /// Known sigma^2. When absent it is estimated from the unpenalized fit.
  std::optional<double> sigma2;

  void validate(int n_functions) const;
};

std::string method_name(SelectionMethod m);
SelectionMethod parse_method(const std::string& name);

/// Raw lambdas from standardized ones.
Eigen::VectorXd raw_lambdas(const AssembledSystem& sys, const Eigen::VectorXd& standardized);

/// V = (RSS / N_T) / (1 - tr A / N_T)^2. Throws std::domain_error if tr A >= N_T.
double gcv_score(const AssembledSystem& sys, const Eigen::VectorXd& lambdas);
double gcv_score(const PenalizedState& state, int n_obs);

/// Unbiased sigma^2 from the unpenalized fit: RSS(0) / (N_T - tr A(0)).
/// A(0) is the projection on the column space of the whitened design, so
/// tr A(0) is its numerical rank. Throws std::domain_error if N_T <= rank.
struct Sigma2Estimate {
  double value = 0.0;
  double rss = 0.0;
  double trace = 0.0;
};
Sigma2Estimate sigma2_hat(const AssembledSystem& sys);

/// Exact risk Tr(Q [sigma^2 G C G + G S_c a a^t S_c G]) and its half
/// derivatives with respect to each lambda_l.
double risk(const AssembledSystem& sys, const Eigen::VectorXd& lambdas, RiskWeight q,
            const Eigen::VectorXd& alpha_true, double sigma2);
Eigen::VectorXd risk_gradient(const AssembledSystem& sys, const Eigen::VectorXd& lambdas,
                              RiskWeight q, const Eigen::VectorXd& alpha_true, double sigma2);

/// Empirical predictive risk R-hat = RSS + 2 sigma^2 tr A - N_T sigma^2 and
/// its half derivatives
///   a^t S_c G S_l a - sigma^2 tr(G S_l G C),  a = alpha_hat(lambda).
double risk_hat(const AssembledSystem& sys, const Eigen::VectorXd& lambdas, double sigma2);
Eigen::VectorXd risk_hat_gradient(const AssembledSystem& sys, const Eigen::VectorXd& lambdas,
                                  double sigma2);

struct FixedPointResult {
  Eigen::VectorXd lambdas;  // raw
  int iterations = 0;
  bool converged = false;
  std::vector<Eigen::VectorXd> path;
  std::vector<std::string> notes;
};

/// Cyclic fixed-point iteration of the R-hat stationarity condition,
///   lambda_l = [sigma^2 tr(G S_l G C) - sum_{l' != l} lambda_l' a^t S_l' G S_l a]
///              / a^t S_l G S_l a,
/// or without the cross terms when the method is RiskFixedPointSimplified.
/// With tied lambdas the functions 1..L share one parameter and one update.
/// Lambdas are clamped to the grid; a vanishing denominator sends lambda_l to
/// the grid maximum with a "null-signal" note. Convergence requires the
/// relative change below config.tol and, for the full update, every free
/// component of the R-hat gradient below 1e-6 sigma^2 tr(G S_l G C).
FixedPointResult lambda_fixed_point(const AssembledSystem& sys, const SelectionConfig& config,
                                    double sigma2);

struct ScanPoint {
  Eigen::VectorXd lambdas;  // raw
  double gcv = 0.0;         // +inf where undefined
  double trace = 0.0;
  double rss = 0.0;
  std::optional<double> risk_hat;
};

/// GCV (and R-hat when sigma^2 is given) on the tensor grid of standardized
/// lambdas, in lexicographic order with lambda_0 slowest. With tied lambdas
/// the grid has two axes (lambda_0, shared lambda_1..L).
std::vector<ScanPoint> gcv_scan(const AssembledSystem& sys, const LambdaGrid& grid, bool tie,
                                std::optional<double> sigma2 = std::nullopt);

/// Index of the selected grid point: the smallest V, ties within 1e-12
/// relative going to the earliest point. When the data are fitted exactly
/// (RSS numerically zero) everywhere on the minimizing plateau, the most
/// smoothing point on it is taken instead.
std::size_t gcv_argmin(const std::vector<ScanPoint>& scan, double response_norm2);

/// Selects lambda, solves, and fills the fit diagnostics.
FitResult select(const AssembledSystem& sys, const SelectionConfig& config);

}  // namespace covgrow
