#include "covgrow/banded.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "covgrow/errors.hpp"

namespace covgrow {

namespace {

constexpr double kPivotTolerance = 1e-14;

[[noreturn]] void pivot_failure(const char* what, int j, double pivot, double diag) {
  std::ostringstream os;
  os << what << ": factorization failed at pivot " << j << " (pivot " << pivot
     << ", diagonal " << diag << "); the system is singular or indefinite";
  throw SingularSystemError(os.str());
}

}  // namespace

BandedSymmetric::BandedSymmetric(int n, int kd)
    : n_(n), kd_(std::min(kd, std::max(n - 1, 0))), data_(Eigen::MatrixXd::Zero(kd_ + 1, n)) {}

double BandedSymmetric::operator()(int i, int j) const {
  if (i < j) std::swap(i, j);
  if (i - j > kd_) return 0.0;
  return data_(i - j, j);
}

void BandedSymmetric::add(int i, int j, double v) {
  if (i < j) std::swap(i, j);
  if (i - j > kd_) throw std::out_of_range("entry outside the stored band");
  data_(i - j, j) += v;
}

Eigen::MatrixXd BandedSymmetric::to_dense() const {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n_, n_);
  for (int j = 0; j < n_; ++j)
    for (int d = 0; d <= kd_ && j + d < n_; ++d) {
      a(j + d, j) = data_(d, j);
      a(j, j + d) = data_(d, j);
    }
  return a;
}

GivensFactor::GivensFactor(int n, int ns, int kd)
    : n_(n), ns_(ns), kd_(std::max(0, kd)), rt_(Eigen::MatrixXd::Zero(n, n)), qty_(Eigen::VectorXd::Zero(n)) {}

GivensFactor::GivensFactor(const Eigen::MatrixXd& r, const Eigen::VectorXd& qty, int ns, int kd)
    : n_(static_cast<int>(r.rows())), ns_(ns), kd_(std::max(0, kd)), qty_(qty) {
  rt_ = r.triangularView<Eigen::Upper>().toDenseMatrix().transpose();
}

void GivensFactor::rotate(int j, Eigen::Ref<Eigen::VectorXd> v, double& y, int band_end) {
  const double a = rt_(j, j), b = v[j];
  const double rho = std::hypot(a, b);
  const double c = a / rho, s = b / rho;
  auto apply = [&](int k) {
    const double rk = rt_(k, j), vk = v[k];
    rt_(k, j) = c * rk + s * vk;
    v[k] = c * vk - s * rk;
  };
  rt_(j, j) = rho;
  v[j] = 0.0;
  for (int k = j + 1; k <= band_end; ++k) apply(k);
  for (int k = std::max(ns_, band_end + 1); k < n_; ++k) apply(k);
  const double q = qty_[j];
  qty_[j] = c * q + s * y;
  y = c * y - s * q;
}

void GivensFactor::add_row(Eigen::Ref<Eigen::VectorXd> v, double y) {
  int lo = -1, hi = -1;
  for (int c = 0; c < ns_; ++c)
    if (v[c] != 0.0) {
      if (lo < 0) lo = c;
      hi = c;
    }
  if (lo >= 0) {
    for (int j = lo; j <= hi; ++j) {
      if (v[j] == 0.0) continue;
      const int end = std::min(j + kd_, ns_ - 1);
      rotate(j, v, y, end);
      hi = std::max(hi, end);
    }
  }
  for (int j = ns_; j < n_; ++j)
    if (v[j] != 0.0) rotate(j, v, y, n_ - 1);
}

void GivensFactor::solve_r(Eigen::Ref<Eigen::MatrixXd> b) const {
  rt_.transpose().triangularView<Eigen::Upper>().solveInPlace(b);
}

void GivensFactor::solve_rt(Eigen::Ref<Eigen::MatrixXd> b) const {
  rt_.triangularView<Eigen::Lower>().solveInPlace(b);
}

void GivensFactor::check_pivots(const Eigen::VectorXd& scale, double rel, const char* what) const {
  for (int j = 0; j < n_; ++j)
    if (!(std::abs(rt_(j, j)) > rel * scale[j])) pivot_failure(what, j, rt_(j, j), scale[j]);
}

Eigen::LLT<Eigen::MatrixXd> checked_llt(const Eigen::MatrixXd& a, const char* what) {
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success) pivot_failure(what, -1, 0.0, 0.0);
  const Eigen::MatrixXd& l = llt.matrixLLT();
  for (Eigen::Index j = 0; j < a.rows(); ++j) {
    const double pivot = l(j, j) * l(j, j);
    if (!(pivot > kPivotTolerance * std::abs(a(j, j))))
      pivot_failure(what, static_cast<int>(j), pivot, a(j, j));
  }
  return llt;
}

}  // namespace covgrow
