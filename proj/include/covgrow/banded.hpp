#pragma once

#include <Eigen/Dense>

namespace covgrow {

/// Symmetric matrix stored as its lower band: entry (i, j) with 0 <= i - j <= kd
/// lives at data(i - j, j).
class BandedSymmetric {
 public:
  BandedSymmetric() = default;
  BandedSymmetric(int n, int kd);

  int size() const { return n_; }
  /// Number of stored sub-diagonals.
  int bandwidth() const { return kd_; }

  double operator()(int i, int j) const;
  /// Adds v to (i, j) and, implicitly, (j, i). Throws outside the band.
  void add(int i, int j, double v);
  Eigen::MatrixXd to_dense() const;
  const Eigen::MatrixXd& storage() const { return data_; }

 private:
  int n_ = 0;
  int kd_ = 0;
  Eigen::MatrixXd data_;
};

/// Upper-triangular factor R of a sum of outer products, R^t R = sum_r v_r v_r^t,
/// kept current by Givens rotations as rows arrive. The leading `ns` columns
/// have upper bandwidth `kd`; the trailing columns form a dense border. A row
/// whose leading part fits in a window of kd + 1 columns costs
/// O(kd (kd + n - ns) + (n - ns)^2).
///
/// Rotating rows in, rather than adding v v^t to a matrix and eliminating,
/// keeps small contributions accurate next to large ones (e.g. data next to a
/// heavily weighted penalty).
class GivensFactor {
 public:
  GivensFactor() = default;
  GivensFactor(int n, int ns, int kd);
  /// Starts from a given upper-triangular R and Q^t y.
  GivensFactor(const Eigen::MatrixXd& r, const Eigen::VectorXd& qty, int ns, int kd);

  int size() const { return n_; }
  int banded_size() const { return ns_; }
  int bandwidth() const { return kd_; }

  /// Rotates the row (v, y) into the factor. `v` is overwritten.
  void add_row(Eigen::Ref<Eigen::VectorXd> v, double y = 0.0);

  /// R^t, stored lower-triangular so that rows of R are contiguous.
  const Eigen::MatrixXd& rt() const { return rt_; }
  Eigen::MatrixXd r() const { return rt_.transpose(); }
  const Eigen::VectorXd& qty() const { return qty_; }

  /// b <- R^-1 b and b <- R^-t b.
  void solve_r(Eigen::Ref<Eigen::MatrixXd> b) const;
  void solve_rt(Eigen::Ref<Eigen::MatrixXd> b) const;

  /// Throws SingularSystemError if some |R_jj| <= rel * scale[j].
  void check_pivots(const Eigen::VectorXd& scale, double rel, const char* what) const;

 private:
  void rotate(int j, Eigen::Ref<Eigen::VectorXd> v, double& y, int band_end);

  int n_ = 0;
  int ns_ = 0;
  int kd_ = 0;
  Eigen::MatrixXd rt_;
  Eigen::VectorXd qty_;
};

/// Dense Cholesky with a relative pivot test (pivot > 1e-14 * diagonal).
/// Throws SingularSystemError on failure.
Eigen::LLT<Eigen::MatrixXd> checked_llt(const Eigen::MatrixXd& a, const char* what);

}  // namespace covgrow
