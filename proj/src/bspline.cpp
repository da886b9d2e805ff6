#include "covgrow/bspline.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace covgrow {

SplineBasis::SplineBasis(std::vector<double> interior, Interval domain, int order,
                         EndCondition ends)
    : interior_(std::move(interior)), domain_(domain), order_(order), ends_(ends) {
  knots_.reserve(interior_.size() + 2 * order_);
  knots_.insert(knots_.end(), order_, domain_.lo);
  knots_.insert(knots_.end(), interior_.begin(), interior_.end());
  knots_.insert(knots_.end(), order_, domain_.hi);
  raw_size_ = static_cast<int>(interior_.size()) + order_;

  if (ends_ == EndCondition::Natural) {
    // Eliminate the first and last coefficient through f''(lo) = f''(hi) = 0.
    Eigen::VectorXd c(order_);
    left_fold_.assign(raw_size_, 0.0);
    right_fold_.assign(raw_size_, 0.0);
    int first = raw_band(domain_.lo, 2, c);
    for (int j = 1; j < order_; ++j) left_fold_[first + j] = -c[j] / c[0];
    first = raw_band(domain_.hi, 2, c);
    for (int j = 0; j < order_ - 1; ++j) right_fold_[first + j] = -c[j] / c[order_ - 1];
  }
}

int SplineBasis::find_span(double t) const {
  // knots_[span] <= t < knots_[span + 1], with the last nonempty span at hi.
  const int p = degree();
  auto begin = knots_.begin() + p;
  auto end = knots_.begin() + raw_size_ + 1;
  int span = static_cast<int>(std::upper_bound(begin, end, t) - knots_.begin()) - 1;
  return std::clamp(span, p, raw_size_ - 1);
}

int SplineBasis::raw_band(double t, int deriv, Eigen::Ref<Eigen::VectorXd> values) const {
  const int p = degree();
  const int span = find_span(t);
  const auto& u = knots_;

  Eigen::MatrixXd ndu(p + 1, p + 1);
  std::vector<double> left(p + 1), right(p + 1);
  ndu(0, 0) = 1.0;
  for (int j = 1; j <= p; ++j) {
    left[j] = t - u[span + 1 - j];
    right[j] = u[span + j] - t;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      ndu(j, r) = right[r + 1] + left[j - r];
      const double temp = ndu(r, j - 1) / ndu(j, r);
      ndu(r, j) = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    ndu(j, j) = saved;
  }

  if (deriv == 0) {
    for (int j = 0; j <= p; ++j) values[j] = ndu(j, p);
    return span - p;
  }

  // Derivatives by differencing the lower-order table.
  Eigen::MatrixXd a(2, p + 1);
  for (int r = 0; r <= p; ++r) {
    int s1 = 0, s2 = 1;
    a.setZero();
    a(0, 0) = 1.0;
    double d = 0.0;
    for (int k = 1; k <= deriv; ++k) {
      d = 0.0;
      const int rk = r - k;
      const int pk = p - k;
      if (r >= k) {
        a(s2, 0) = a(s1, 0) / ndu(pk + 1, rk);
        d = a(s2, 0) * ndu(rk, pk);
      }
      const int j1 = rk >= -1 ? 1 : -rk;
      const int j2 = (r - 1 <= pk) ? k - 1 : p - r;
      for (int j = j1; j <= j2; ++j) {
        a(s2, j) = (a(s1, j) - a(s1, j - 1)) / ndu(pk + 1, rk + j);
        d += a(s2, j) * ndu(rk + j, pk);
      }
      if (r <= pk) {
        a(s2, k) = -a(s1, k - 1) / ndu(pk + 1, r);
        d += a(s2, k) * ndu(r, pk);
      }
      std::swap(s1, s2);
    }
    values[r] = d;
  }
  double factor = p;
  for (int k = 1; k < deriv; ++k) factor *= (p - k);
  values *= factor;
  return span - p;
}

SplineBasis make_basis(std::span<const double> interior, Interval domain, int order,
                       EndCondition ends) {
  if (order < 2) throw std::invalid_argument("spline order must be at least 2");
  if (!(domain.lo < domain.hi)) throw std::invalid_argument("empty spline domain");
  for (std::size_t i = 0; i < interior.size(); ++i) {
    const double k = interior[i];
    if (!(k > domain.lo && k < domain.hi)) {
      std::ostringstream os;
      os << "interior knot " << k << " is not strictly inside [" << domain.lo << ", "
         << domain.hi << "]";
      throw std::invalid_argument(os.str());
    }
    if (i > 0 && !(k > interior[i - 1]))
      throw std::invalid_argument("interior knots must be strictly increasing");
  }
  if (ends == EndCondition::Natural) {
    if (order < 3) throw std::invalid_argument("natural ends need order >= 3");
    if (static_cast<int>(interior.size()) + order < 4)
      throw std::invalid_argument("natural ends need at least 4 raw basis functions");
  }
  return SplineBasis({interior.begin(), interior.end()}, domain, order, ends);
}

BasisBand eval_basis(const SplineBasis& basis, double t, int deriv) {
  if (!basis.domain().contains(t)) {
    std::ostringstream os;
    os << "time " << t << " outside spline domain [" << basis.domain().lo << ", "
       << basis.domain().hi << "]";
    throw std::out_of_range(os.str());
  }
  if (deriv < 0 || deriv >= basis.order())
    throw std::invalid_argument("derivative order must be in [0, order)");

  BasisBand out;
  out.values.resize(basis.order());
  basis.band(t, deriv, out.first, out.values);
  return out;
}

Eigen::MatrixXd basis_matrix(const SplineBasis& basis, std::span<const double> times,
                             int deriv) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(times.size()),
                                            basis.size());
  for (std::size_t i = 0; i < times.size(); ++i) {
    const BasisBand b = eval_basis(basis, times[i], deriv);
    for (Eigen::Index j = 0; j < b.values.size(); ++j)
      if (b.first + j < basis.size()) x(static_cast<Eigen::Index>(i), b.first + j) = b.values[j];
  }
  return x;
}

double eval_spline(const SplineBasis& basis, const Eigen::Ref<const Eigen::VectorXd>& coef,
                   double t, int deriv) {
  if (coef.size() != basis.size())
    throw std::invalid_argument("coefficient vector length differs from basis size");
  const BasisBand b = eval_basis(basis, t, deriv);
  double s = 0.0;
  for (Eigen::Index j = 0; j < b.values.size(); ++j)
    if (b.first + j < basis.size()) s += coef[b.first + j] * b.values[j];
  return s;
}

void gauss_legendre(int n, Eigen::VectorXd& nodes, Eigen::VectorXd& weights) {
  nodes.resize(n);
  weights.resize(n);
  for (int i = 0; i < n; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      // Legendre recurrence for P_n(x) and its derivative.
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      if (n == 1) p0 = 1.0;
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    double p0 = 1.0, p1 = x;
    for (int k = 2; k <= n; ++k) {
      const double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
      p0 = p1;
      p1 = p2;
    }
    dp = n * (x * p1 - p0) / (x * x - 1.0);
    nodes[i] = x;
    weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
  }
}

PenaltyMatrix penalty_matrix(const SplineBasis& basis, int gamma) {
  if (gamma < 2 || gamma > 3 || gamma >= basis.order())
    throw std::invalid_argument("penalty derivative order must satisfy 2 <= gamma <= 3 and gamma < order");

  const int k_count = basis.size();
  const int m = basis.order();
  // The integrand has degree 2 (order - 1 - gamma) on each knot interval.
  const int nodes_per_interval = m - gamma;
  Eigen::VectorXd gx, gw;
  gauss_legendre(nodes_per_interval, gx, gw);

  PenaltyMatrix out;
  out.gamma = gamma;
  out.bandwidth = m;
  out.S = Eigen::MatrixXd::Zero(k_count, k_count);

  const auto& knots = basis.knots();
  int intervals = 0;
  for (std::size_t j = 0; j + 1 < knots.size(); ++j) intervals += knots[j + 1] > knots[j];
  out.root = Eigen::MatrixXd::Zero(intervals * nodes_per_interval, k_count);
  int row = 0;
  Eigen::VectorXd v(m);
  for (std::size_t j = 0; j + 1 < knots.size(); ++j) {
    const double a = knots[j], b = knots[j + 1];
    if (!(b > a)) continue;
    const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
    for (int q = 0; q < nodes_per_interval; ++q) {
      int first = 0;
      basis.band(mid + half * gx[q], gamma, first, v);
      const double w = half * gw[q];
      for (int r = 0; r < m; ++r) {
        const int kr = first + r;
        if (kr >= k_count) break;
        out.root(row, kr) = std::sqrt(w) * v[r];
        for (int c = 0; c <= r; ++c) out.S(kr, first + c) += w * v[r] * v[c];
      }
      ++row;
    }
  }
  out.S.triangularView<Eigen::StrictlyUpper>() = out.S.transpose();
  return out;
}

void SplineBasis::band(double t, int deriv, int& first,
                       Eigen::Ref<Eigen::VectorXd> values) const {
  const int m = order_;
  if (ends_ == EndCondition::Clamped) {
    first = raw_band(t, deriv, values);
    return;
  }
  Eigen::VectorXd raw(m);
  const int raw_first = raw_band(t, deriv, raw);
  const int raw_last = raw_first + m - 1;
  // Contributions of the two eliminated functions (raw 0 and raw K-1).
  const double v_first = raw[0], v_last = raw[m - 1];
  if (raw_first == 0) {
    for (int j = 1; j < m; ++j) raw[j] += v_first * left_fold_[j];
  }
  if (raw_last == raw_size_ - 1) {
    for (int j = 0; j < m - 1; ++j) raw[j] += v_last * right_fold_[raw_first + j];
  }
  const int lo = std::max(raw_first, 1);
  const int hi = std::min(raw_last, raw_size_ - 2);
  values.setZero();
  for (int r = lo; r <= hi; ++r) values[r - lo] = raw[r - raw_first];
  first = lo - 1;
}

}  // namespace covgrow
