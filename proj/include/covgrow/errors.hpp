#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace covgrow {

/// Malformed dataset, configuration or model file.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A penalized system whose factorization failed (not positive definite).
class SingularSystemError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The model is not identifiable even after the intercept repair.
/// Carries a unit null-space direction of C + sum_l S_l and coefficient labels.
class IdentifiabilityError : public SingularSystemError {
 public:
  IdentifiabilityError(const std::string& what, Eigen::VectorXd direction,
                       std::vector<std::string> labels)
      : SingularSystemError(what),
        direction_(std::move(direction)),
        labels_(std::move(labels)) {}

  const Eigen::VectorXd& direction() const { return direction_; }
  const std::vector<std::string>& labels() const { return labels_; }

 private:
  Eigen::VectorXd direction_;
  std::vector<std::string> labels_;
};

/// Smoothing-parameter selection did not converge and no fallback was allowed.
class SelectionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace covgrow
