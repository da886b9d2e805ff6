#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "covgrow/bspline.hpp"
#include "covgrow/design.hpp"

namespace covgrow {

/// Uniform temporal design in multivariate form, Y = X alpha U + E, with no
/// parametric terms. Every individual shares the times and the covariance.
struct UniformSystem {
  Eigen::MatrixXd x;       // n x K shared temporal design
  Eigen::MatrixXd y;       // n x N, column i = individual i
  Eigen::MatrixXd u;       // (L+1) x N, column i = g(u_i)
  Eigen::MatrixXd sigma;   // n x n shared within-individual covariance
  Eigen::MatrixXd s;       // K x K penalty
  Eigen::VectorXd lambdas;  // diagonal of Lambda

  // U U^t = O diag(d) O^t, d nonincreasing, first nonzero entry of each
  // column of O positive.
  Eigen::MatrixXd o;
  Eigen::VectorXd d;
  /// Smallest relative gap between consecutive eigenvalues (inf for L = 0).
  double min_gap = 0.0;

  // X^t Sigma^-1 X and X^t Sigma^-1 Y.
  Eigen::MatrixXd cx;
  Eigen::MatrixXd xwy;

  int n_basis() const { return static_cast<int>(x.cols()); }
  int n_functions() const { return static_cast<int>(u.rows()); }
};

/// True iff all individuals have exactly the same time vector.
bool check_uniform(const Dataset& data);

/// Builds the multivariate system. Throws std::invalid_argument when the
/// times or the within-individual covariances differ between individuals.
UniformSystem uniform_system(const Dataset& data, const SplineBasis& basis, const CovariateBasis& covariates,
                             int gamma, const Eigen::VectorXd& lambdas);

/// Solves X^t W X alpha U U^t + S alpha Lambda = X^t W Y U^t as one
/// (L+1)K system. Returns alpha, K x (L+1).
Eigen::MatrixXd solve_multivariate(const UniformSystem& us);

/// Records the size of every factorization a solver performs.
struct FactorizationLog {
  std::vector<int> sizes;
};

struct SeparableSolution {
  Eigen::MatrixXd alpha;          // back in the original covariate coordinates
  Eigen::MatrixXd alpha_rotated;  // alpha O
  /// True when all lambdas are equal, so the solution is also the solution
  /// of the original (non-separable) model.
  bool same_model = false;
  std::vector<std::string> notes;
};

/// Rotated model alpha_new = alpha O, g_new = O^t g, with lambda_l acting on
/// rotated function l: solves (d_l X^t W X + lambda_l S) a_l = (X^t W Y U^t O)_l
/// for each l independently and maps back.
SeparableSolution solve_separable(const UniformSystem& us, FactorizationLog* log = nullptr);

}  // namespace covgrow
