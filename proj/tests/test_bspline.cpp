#include <doctest.h>

#include <random>

#include "covgrow/bspline.hpp"
#include "oracles.hpp"

using namespace covgrow;

namespace {

std::vector<double> uniform_knots(int n, Interval d) {
  std::vector<double> k(n);
  for (int i = 0; i < n; ++i) k[i] = d.lo + d.width() * (i + 1) / (n + 1);
  return k;
}

SplineBasis irregular_basis() {
  const std::vector<double> interior{0.07, 0.2, 0.21, 0.5, 0.77, 0.9};
  return make_basis(interior, {0.0, 1.0}, 4);
}

Eigen::VectorXd dense_row(const SplineBasis& b, double t, int deriv) {
  Eigen::VectorXd row = Eigen::VectorXd::Zero(b.size());
  const BasisBand band = eval_basis(b, t, deriv);
  for (Eigen::Index j = 0; j < band.values.size(); ++j)
    if (band.first + j < b.size()) row[band.first + j] = band.values[j];
  return row;
}

bool near_knot(const SplineBasis& b, double t, double eps) {
  for (double k : b.knots())
    if (std::abs(k - t) < eps) return true;
  return false;
}

}  // namespace

TEST_CASE("make_basis counts functions as interior knots plus order") {
  const Interval d{0.0, 1.0};
  CHECK(make_basis(uniform_knots(10, d), d, 4).size() == 14);
  CHECK(make_basis(std::vector<double>{}, d, 4).size() == 4);
  CHECK(make_basis(uniform_knots(42, d), d, 4).size() == 46);
  CHECK(make_basis(uniform_knots(10, d), d, 4, EndCondition::Natural).size() == 12);

  const SplineBasis small = make_basis(uniform_knots(3, d), d, 4);
  const auto& knots = small.knots();
  REQUIRE(knots.size() == 3 + 8);
  for (int i = 0; i < 4; ++i) {
    CHECK(knots[i] == 0.0);
    CHECK(knots[knots.size() - 1 - i] == 1.0);
  }
}

TEST_CASE("make_basis rejects invalid knots and orders") {
  const Interval d{0.0, 1.0};
  CHECK_THROWS_AS(make_basis(std::vector<double>{0.3, 0.2}, d, 4), std::invalid_argument);
  CHECK_THROWS_AS(make_basis(std::vector<double>{0.3, 0.3}, d, 4), std::invalid_argument);
  CHECK_THROWS_AS(make_basis(std::vector<double>{0.0, 0.5}, d, 4), std::invalid_argument);
  CHECK_THROWS_AS(make_basis(std::vector<double>{0.5, 1.2}, d, 4), std::invalid_argument);
  CHECK_THROWS_AS(make_basis(std::vector<double>{0.5}, d, 1), std::invalid_argument);
  CHECK_THROWS_AS(make_basis(std::vector<double>{}, d, 2, EndCondition::Natural),
                  std::invalid_argument);
}

TEST_CASE("eval_basis rejects points outside the domain and high derivatives") {
  const SplineBasis b = irregular_basis();
  CHECK_THROWS_AS(eval_basis(b, -1e-12), std::out_of_range);
  CHECK_THROWS_AS(eval_basis(b, 1.0 + 1e-12), std::out_of_range);
  CHECK_THROWS_AS(eval_basis(b, 0.5, 4), std::invalid_argument);
  CHECK_NOTHROW(eval_basis(b, 1.0, 3));
}

TEST_CASE("clamped endpoint values") {
  const SplineBasis b = irregular_basis();
  const Eigen::VectorXd lo = dense_row(b, 0.0, 0);
  CHECK(lo[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(lo.tail(b.size() - 1).cwiseAbs().maxCoeff() == 0.0);
  const Eigen::VectorXd hi = dense_row(b, 1.0, 0);
  CHECK(hi[b.size() - 1] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(hi.head(b.size() - 1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("partition of unity and local support on 1000 points") {
  const SplineBasis b = irregular_basis();
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double t = i / 999.0;
    const BasisBand band = eval_basis(b, t);
    CHECK(band.values.size() <= b.order());
    worst = std::max(worst, std::abs(band.values.sum() - 1.0));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("values and derivatives agree with the Cox-de Boor recursion") {
  const SplineBasis b = irregular_basis();
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    const double t = unif(rng);
    for (int deriv = 0; deriv < 4; ++deriv) {
      if (deriv == 3 && near_knot(b, t, 1e-9)) continue;
      const Eigen::VectorXd row = dense_row(b, t, deriv);
      for (int k = 0; k < b.size(); ++k) {
        const double want = oracle::bspline(b.knots(), k, b.order(), t, deriv);
        CHECK(std::abs(row[k] - want) <= 1e-9 * std::max(1.0, std::abs(want)));
      }
    }
  }
}

TEST_CASE("analytic derivatives match central finite differences") {
  const SplineBasis b = irregular_basis();
  const double h = 1e-6;
  for (int deriv = 1; deriv <= 2; ++deriv) {
    double worst = 0.0;
    for (int i = 1; i < 400; ++i) {
      const double t = i / 400.0;
      if (near_knot(b, t, 1e-4)) continue;
      const Eigen::VectorXd d = dense_row(b, t, deriv);
      const Eigen::VectorXd fd = (dense_row(b, t + h, deriv - 1) - dense_row(b, t - h, deriv - 1)) / (2 * h);
      worst = std::max(worst, (d - fd).cwiseAbs().maxCoeff() / d.cwiseAbs().maxCoeff());
    }
    CAPTURE(deriv);
    CHECK(worst < (deriv == 1 ? 1e-6 : 1e-5));
  }
}

TEST_CASE("band reconstruction equals dense reconstruction") {
  const SplineBasis b = irregular_basis();
  std::mt19937 rng(3);
  std::normal_distribution<double> z;
  Eigen::VectorXd coef(b.size());
  for (auto& c : coef) c = z(rng);
  for (int i = 0; i <= 50; ++i) {
    const double t = i / 50.0;
    double dense = 0.0;
    for (int k = 0; k < b.size(); ++k) dense += coef[k] * oracle::bspline(b.knots(), k, 4, t);
    CHECK(eval_spline(b, coef, t) == doctest::Approx(dense).epsilon(1e-12));
  }
}

TEST_CASE("penalty matrix annihilates low-degree polynomials") {
  const SplineBasis b = irregular_basis();
  const PenaltyMatrix p2 = penalty_matrix(b, 2);
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(b.size());
  CHECK((p2.S * ones).cwiseAbs().maxCoeff() < 1e-12 * p2.S.cwiseAbs().maxCoeff());

  // Greville abscissae reproduce f(t) = t.
  Eigen::VectorXd lin(b.size());
  for (int k = 0; k < b.size(); ++k) {
    double s = 0.0;
    for (int j = 1; j < b.order(); ++j) s += b.knots()[k + j];
    lin[k] = s / (b.order() - 1);
  }
  for (double t : {0.0, 0.13, 0.5, 0.99, 1.0}) CHECK(eval_spline(b, lin, t) == doctest::Approx(t));
  CHECK((p2.S * lin).cwiseAbs().maxCoeff() < 1e-12 * p2.S.cwiseAbs().maxCoeff());
}

TEST_CASE("penalty matrix is symmetric, banded and has rank K - gamma") {
  const SplineBasis b = make_basis(uniform_knots(9, {0.0, 2.0}), {0.0, 2.0}, 4);
  for (int gamma : {2, 3}) {
    const PenaltyMatrix p = penalty_matrix(b, gamma);
    CHECK((p.S - p.S.transpose()).cwiseAbs().maxCoeff() == 0.0);
    for (int i = 0; i < b.size(); ++i)
      for (int j = 0; j < b.size(); ++j)
        if (std::abs(i - j) >= p.bandwidth) CHECK(p.S(i, j) == 0.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(p.S);
    const auto& ev = es.eigenvalues();
    CHECK(ev.minCoeff() > -1e-10 * ev.maxCoeff());
    const int rank = static_cast<int>((ev.array() > 1e-10 * ev.maxCoeff()).count());
    CHECK(rank == b.size() - gamma);
    CHECK((p.root.transpose() * p.root - p.S).cwiseAbs().maxCoeff() < 1e-12 * p.S.cwiseAbs().maxCoeff());
    for (Eigen::Index r = 0; r < p.root.rows(); ++r) CHECK((p.root.row(r).array() != 0.0).count() <= 4);
  }
}

TEST_CASE("penalty entries match adaptive quadrature on a 6-knot basis") {
  const SplineBasis b = irregular_basis();
  for (int gamma : {2, 3}) {
    const PenaltyMatrix p = penalty_matrix(b, gamma);
    const auto& u = b.knots();
    for (int i = 0; i < b.size(); ++i) {
      for (int j = i; j < std::min(b.size(), i + b.order()); ++j) {
        double want = 0.0;
        for (std::size_t s = 0; s + 1 < u.size(); ++s) {
          if (!(u[s + 1] > u[s])) continue;
          // Evaluate inside the open interval so the recursion picks this piece.
          const double a = u[s], c = u[s + 1], eps = 1e-13 * (c - a);
          want += oracle::simpson(
              [&](double t) {
                return oracle::bspline(u, i, 4, t, gamma) * oracle::bspline(u, j, 4, t, gamma);
              },
              a + eps, c - eps, 1e-13);
        }
        const double scale = std::max(std::abs(want), 1e-9 * p.S.cwiseAbs().maxCoeff());
        CAPTURE(gamma);
        CAPTURE(i);
        CAPTURE(j);
        CHECK(std::abs(p.S(i, j) - want) / scale < 1e-9);
      }
    }
  }
}

TEST_CASE("quadratic form equals the integrated squared derivative") {
  const SplineBasis b = irregular_basis();
  std::mt19937 rng(11);
  std::normal_distribution<double> z;
  for (int gamma : {2, 3}) {
    const PenaltyMatrix p = penalty_matrix(b, gamma);
    for (int rep = 0; rep < 5; ++rep) {
      Eigen::VectorXd a(b.size());
      for (auto& v : a) v = z(rng);
      double integral = 0.0;
      const auto& u = b.knots();
      for (std::size_t s = 0; s + 1 < u.size(); ++s) {
        if (!(u[s + 1] > u[s])) continue;
        const double eps = 1e-13 * (u[s + 1] - u[s]);
        integral += oracle::simpson(
            [&](double t) {
              double f = 0.0;
              for (int k = 0; k < b.size(); ++k) f += a[k] * oracle::bspline(u, k, 4, t, gamma);
              return f * f;
            },
            u[s] + eps, u[s + 1] - eps, 1e-12);
      }
      CHECK(oracle::rel_err(a.dot(p.S * a), integral) < 1e-8);
    }
  }
}

TEST_CASE("penalty rejects gamma outside the allowed range") {
  const SplineBasis b = irregular_basis();
  CHECK_THROWS_AS(penalty_matrix(b, 1), std::invalid_argument);
  CHECK_THROWS_AS(penalty_matrix(b, 4), std::invalid_argument);
  const SplineBasis quad = make_basis(std::vector<double>{0.5}, {0.0, 1.0}, 3);
  CHECK_THROWS_AS(penalty_matrix(quad, 3), std::invalid_argument);
}

TEST_CASE("natural ends give zero curvature at both endpoints") {
  const SplineBasis b = make_basis(uniform_knots(6, {0.0, 1.0}), {0.0, 1.0}, 4,
                                   EndCondition::Natural);
  CHECK(b.size() == 8);
  std::mt19937 rng(5);
  std::normal_distribution<double> z;
  Eigen::VectorXd coef(b.size());
  for (auto& c : coef) c = z(rng);
  CHECK(std::abs(eval_spline(b, coef, 0.0, 2)) < 1e-10);
  CHECK(std::abs(eval_spline(b, coef, 1.0, 2)) < 1e-10);

  double worst = 0.0;
  for (int i = 0; i <= 200; ++i) worst = std::max(worst, std::abs(eval_basis(b, i / 200.0).values.sum() - 1.0));
  CHECK(worst < 1e-12);

  const PenaltyMatrix p = penalty_matrix(b, 2);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(p.S);
  const auto& ev = es.eigenvalues();
  CHECK(static_cast<int>((ev.array() > 1e-10 * ev.maxCoeff()).count()) == b.size() - 2);
  for (int i = 0; i < b.size(); ++i)
    for (int j = 0; j < b.size(); ++j)
      if (std::abs(i - j) >= p.bandwidth) CHECK(p.S(i, j) == 0.0);
}

TEST_CASE("gauss-legendre rules integrate polynomials exactly") {
  for (int n = 1; n <= 6; ++n) {
    Eigen::VectorXd x, w;
    gauss_legendre(n, x, w);
    for (int deg = 0; deg <= 2 * n - 1; ++deg) {
      const double want = deg % 2 ? 0.0 : 2.0 / (deg + 1);
      double got = 0.0;
      for (int i = 0; i < n; ++i) got += w[i] * std::pow(x[i], deg);
      CHECK(got == doctest::Approx(want).epsilon(1e-14));
    }
  }
}
