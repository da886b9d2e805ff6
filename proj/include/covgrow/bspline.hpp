#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace covgrow {

struct Interval {
  double lo = 0.0;
  double hi = 1.0;

  bool contains(double t) const { return t >= lo && t <= hi; }
  double width() const { return hi - lo; }
};

/// Boundary treatment of the basis. `Natural` eliminates one coefficient at
/// each end so that every spline in the span has zero second derivative at
/// the domain endpoints (the end basis functions become linear there).
enum class EndCondition { Clamped, Natural };

/// B-spline basis of a given order on a clamped knot vector.
///
/// The knot vector repeats each domain endpoint `order` times, so the basis
/// has `interior.size() + order` functions (two fewer with natural ends).
class SplineBasis {
 public:
  SplineBasis(std::vector<double> interior, Interval domain, int order,
              EndCondition ends);

  int order() const { return order_; }
  int degree() const { return order_ - 1; }
  /// Number of basis functions K.
  int size() const { return ends_ == EndCondition::Natural ? raw_size_ - 2 : raw_size_; }
  Interval domain() const { return domain_; }
  EndCondition ends() const { return ends_; }
  const std::vector<double>& knots() const { return knots_; }
  const std::vector<double>& interior_knots() const { return interior_; }

  // Raw (unconstrained) clamped B-spline band at t: first index into the raw
  // basis and `order` values of the deriv-th derivative.
  int raw_size() const { return raw_size_; }
  int raw_band(double t, int deriv, Eigen::Ref<Eigen::VectorXd> values) const;

  // Band of the effective basis (after any end constraint); no validation.
  void band(double t, int deriv, int& first, Eigen::Ref<Eigen::VectorXd> values) const;

 private:
  int find_span(double t) const;

  std::vector<double> interior_;
  std::vector<double> knots_;
  Interval domain_;
  int order_;
  int raw_size_;
  EndCondition ends_;
  // Natural ends: weights folding the eliminated end coefficients onto the
  // neighbouring ones, indexed by raw function.
  std::vector<double> left_fold_;
  std::vector<double> right_fold_;
};

/// Validates the knots and builds the basis.
/// Throws std::invalid_argument for non-increasing knots, knots outside the
/// open domain, order < 2, or natural ends on a basis too small to constrain.
SplineBasis make_basis(std::span<const double> interior, Interval domain, int order = 4,
                       EndCondition ends = EndCondition::Clamped);

/// Nonzero band of basis (derivative) values at one point.
struct BasisBand {
  int first = 0;
  Eigen::VectorXd values;
};

/// Evaluates the deriv-th derivative of every basis function that can be
/// nonzero at t. Throws std::out_of_range outside the domain (no extrapolation)
/// and std::invalid_argument for deriv >= order.
BasisBand eval_basis(const SplineBasis& basis, double t, int deriv = 0);

/// Dense n x K matrix of basis (derivative) values.
Eigen::MatrixXd basis_matrix(const SplineBasis& basis, std::span<const double> times,
                             int deriv = 0);

/// Value of sum_k coef[k] B_k^(deriv)(t).
double eval_spline(const SplineBasis& basis, const Eigen::Ref<const Eigen::VectorXd>& coef,
                   double t, int deriv = 0);

/// Gram matrix of gamma-th derivatives, S[k,k'] = int B_k^(g) B_k'^(g) dt.
struct PenaltyMatrix {
  int gamma = 2;
  Eigen::MatrixXd S;
  /// S[k,k'] == 0 whenever |k - k'| >= bandwidth.
  int bandwidth = 0;
  /// Square root S = E^t E: one row per quadrature node, each with at most
  /// `order` adjacent nonzeros.
  Eigen::MatrixXd root;
};

/// Exact penalty Gram matrix by per-interval Gauss-Legendre quadrature.
/// Requires 2 <= gamma <= 3 and gamma < order.
PenaltyMatrix penalty_matrix(const SplineBasis& basis, int gamma);

/// Gauss-Legendre nodes and weights on [-1, 1].
void gauss_legendre(int n, Eigen::VectorXd& nodes, Eigen::VectorXd& weights);

}  // namespace covgrow
