#include <doctest.h>

#include <cmath>
#include <random>

#include "covgrow/design.hpp"
#include "covgrow/errors.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace covgrow;

namespace {

const Interval kUnit{0.0, 1.0};

SplineBasis basis5() { return make_basis(fixture::uniform_knots(5, kUnit), kUnit, 4); }

// X^t Sigma^-1 X and X^t Sigma^-1 Y from an explicit block-diagonal inverse.
std::pair<Eigen::MatrixXd, Eigen::VectorXd> dense_cross(const Dataset& data, const AssembledSystem& sys) {
  Eigen::MatrixXd winv = Eigen::MatrixXd::Zero(sys.n_obs, sys.n_obs);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int r0 = sys.row_offset[i], n = data[i].size();
    winv.block(r0, r0, n, n) = oracle::inverse(data[i].covariance_matrix());
  }
  return {sys.design.transpose() * winv * sys.design, sys.design.transpose() * winv * sys.response};
}

}  // namespace

TEST_CASE("without covariates the design is the plain spline design") {
  std::mt19937 rng(3);
  const Dataset data = fixture::random_dataset(rng, {.individuals = 2, .covariates = 0});
  const SplineBasis b = basis5();
  const auto [np, pp] = individual_design(data[0], b, CovariateBasis(), ParametricBasis(), 0);
  const std::vector<double> t(data[0].times.begin(), data[0].times.end());
  CHECK((np - basis_matrix(b, t)).cwiseAbs().maxCoeff() == 0.0);
  CHECK(pp.cols() == 0);
}

TEST_CASE("log covariate with per-id intercepts gives the log-linear growth model") {
  std::mt19937 rng(4);
  const Dataset data = fixture::random_dataset(rng, {.individuals = 4});
  const SplineBasis b = basis5();
  const CovariateBasis g = CovariateBasis({{CovariateForm::Log, 0, "q"}}).prepared(data);
  const ParametricBasis h = ParametricBasis({{ParametricForm::PerIdIntercept, -1, ""}}).prepared(data);
  double mean_log = 0.0;
  for (const auto& ind : data) mean_log += std::log(ind.covariates(0, 0)) / data.size();
  for (int i = 0; i < 4; ++i) {
    const auto [np, pp] = individual_design(data[i], b, g, h, i);
    const double lq = std::log(data[i].covariates(0, 0)) - mean_log;
    for (int p = 0; p < data[i].size(); ++p) {
      for (int k = 0; k < b.size(); ++k) {
        const double bk = oracle::bspline(b.knots(), k, 4, data[i].times[p]);
        CHECK(np(p, 2 * k) == doctest::Approx(bk).epsilon(1e-13));
        CHECK(np(p, 2 * k + 1) == doctest::Approx(bk * lq).epsilon(1e-13));
      }
      for (int j = 0; j < 4; ++j) CHECK(pp(p, j) == (i == j ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("Kronecker path equals the time-varying path for constant covariates") {
  std::mt19937 rng(5);
  const Dataset fixed = fixture::random_dataset(rng, {.individuals = 5, .covariates = 2});
  Dataset varying = fixed;
  for (auto& ind : varying) {
    ind.time_varying = true;
    ind.covariates = ind.covariates.replicate(ind.size(), 1).eval();
  }
  const SplineBasis b = basis5();
  CovariateBasis g({{CovariateForm::Linear, 0, "a"}, {CovariateForm::Quadratic, 1, "b"}});
  g = g.prepared(fixed);
  const ParametricBasis h = ParametricBasis({{ParametricForm::Linear, 1, "b"}}).prepared(fixed);
  for (int i = 0; i < 5; ++i) {
    const auto [a1, p1] = individual_design(fixed[i], b, g, h, i);
    const auto [a2, p2] = individual_design(varying[i], b, g, h, i);
    CHECK((a1 - a2).cwiseAbs().maxCoeff() <= 1e-15);
    CHECK((p1 - p2).cwiseAbs().maxCoeff() <= 1e-15);
  }
}

TEST_CASE("40 profiles of 61 points with 14 basis functions and per-id intercepts") {
  std::mt19937 rng(6);
  const Dataset data =
      fixture::random_dataset(rng, {.individuals = 40, .min_points = 61, .max_points = 61});
  const SplineBasis b = make_basis(fixture::uniform_knots(10, kUnit), kUnit, 4);
  const AssembledSystem sys = assemble(data, b, CovariateBasis({{CovariateForm::Log, 0, "q"}}),
                                       ParametricBasis({{ParametricForm::PerIdIntercept, -1, ""}}), 3);
  CHECK(sys.n_obs == 2440);
  CHECK(sys.layout.n_basis() == 14);
  CHECK(sys.n_spline() == 28);
  CHECK(sys.layout.n_beta_full() == 40);
  // Two intercept degrees of freedom move into the constants of f0 and f1.
  CHECK(sys.layout.n_beta() == 38);
  CHECK(sys.reparameterized);
  CHECK(sys.banded());
  CHECK(sys.design.rows() == 2440);
  CHECK(sys.design.cols() == 28 + 38);
}

TEST_CASE("individuals with a single measurement are accepted") {
  std::mt19937 rng(7);
  Dataset data = fixture::random_dataset(rng, {.individuals = 4, .covariates = 0});
  data[1].times.conservativeResize(1);
  data[1].times[0] = 0.4;
  data[1].responses.conservativeResize(1);
  data[1].variances.conservativeResize(1);
  CHECK_NOTHROW(assemble(data, basis5(), CovariateBasis(), ParametricBasis(), 2));

  // Many individuals, one point each.
  const Dataset singles =
      fixture::random_dataset(rng, {.individuals = 30, .min_points = 1, .max_points = 1});
  const AssembledSystem sys =
      assemble(singles, basis5(), fixture::linear_covariates(1), ParametricBasis(), 2);
  CHECK(sys.n_obs == 30);
}

TEST_CASE("banded cross-product matches the dense oracle") {
  std::mt19937 rng(8);
  for (int rep = 0; rep < 5; ++rep) {
    const Dataset data = fixture::random_dataset(rng, {.individuals = 3, .covariates = 2});
    const AssembledSystem sys =
        assemble(data, basis5(), fixture::linear_covariates(1),
                 ParametricBasis({{ParametricForm::Linear, 1, "u2"}}), 2, {.storage = Storage::Banded});
    REQUIRE(sys.banded());
    const auto [c, r] = dense_cross(data, sys);
    const int ns = sys.n_spline();
    CHECK(oracle::rel_err(sys.cross_band->to_dense(), Eigen::MatrixXd(c.topLeftCorner(ns, ns))) < 1e-12);
    CHECK(oracle::rel_err(sys.cross, c) < 1e-12);
    CHECK(oracle::rel_err(sys.rhs, r) < 1e-12);
  }
}

TEST_CASE("dense within-individual covariances are whitened exactly") {
  std::mt19937 rng(9);
  const Dataset data = fixture::random_dataset(rng, {.individuals = 3, .dense_covariance = true});
  const AssembledSystem sys = assemble(data, basis5(), fixture::linear_covariates(1), ParametricBasis(), 3);
  CHECK_FALSE(sys.banded());
  const auto [c, r] = dense_cross(data, sys);
  CHECK(oracle::rel_err(sys.cross, c) < 1e-12);
  CHECK(oracle::rel_err(sys.rhs, r) < 1e-12);
  CHECK_THROWS_AS(assemble(data, basis5(), fixture::linear_covariates(1), ParametricBasis(), 3,
                           {.storage = Storage::Banded}),
                  std::invalid_argument);
}

TEST_CASE("cross-product is banded in the interleaved ordering") {
  std::mt19937 rng(10);
  for (int m : {0, 1, 2}) {
    const Dataset data = fixture::random_dataset(rng, {.individuals = 6, .covariates = m});
    const AssembledSystem sys = assemble(data, basis5(), fixture::linear_covariates(m), ParametricBasis(), 2);
    const int w = (m + 1) * 4;
    for (int a = 0; a < sys.n_spline(); ++a)
      for (int b = 0; b < sys.n_spline(); ++b)
        if (std::abs(a - b) >= w) CHECK(sys.cross(a, b) == 0.0);
  }
}

TEST_CASE("penalty embeddings have disjoint blocks and vanish on beta") {
  std::mt19937 rng(11);
  const Dataset data = fixture::random_dataset(rng, {.individuals = 5, .covariates = 3});
  const AssembledSystem sys = assemble(data, basis5(), fixture::linear_covariates(2),
                                       ParametricBasis({{ParametricForm::Linear, 2, "u3"}}), 2);
  const int nf = sys.n_functions();
  Eigen::MatrixXd total = Eigen::MatrixXd::Zero(sys.n_coef(), sys.n_coef());
  for (int l = 0; l < nf; ++l) {
    const Eigen::MatrixXd sl = sys.penalty_block(l);
    total += sl;
    CHECK(sl.bottomRows(sys.layout.n_beta()).cwiseAbs().maxCoeff() == 0.0);
    for (int m = 0; m < nf; ++m)
      if (m != l) CHECK((sl * sys.penalty_block(m)).cwiseAbs().maxCoeff() == 0.0);
    const Eigen::MatrixXd v = Eigen::MatrixXd::Random(sys.n_coef(), 2);
    CHECK(oracle::rel_err(sys.apply_penalty(l, v), Eigen::MatrixXd(sl * v)) < 1e-14);
  }
  CHECK(oracle::rel_err(sys.penalty_total(Eigen::VectorXd::Ones(nf)), total) < 1e-15);
  const Eigen::VectorXd lam = Eigen::VectorXd::LinSpaced(nf, 0.5, 2.0);
  const Eigen::MatrixXd v = Eigen::MatrixXd::Random(sys.n_coef(), 3);
  CHECK(oracle::rel_err(sys.apply_penalty_total(lam, v), Eigen::MatrixXd(sys.penalty_total(lam) * v)) < 1e-14);
  for (int l = 0; l < nf; ++l)
    for (int k = 0; k < sys.layout.n_basis(); ++k)
      for (int k2 = 0; k2 < sys.layout.n_basis(); ++k2)
        CHECK(total(sys.layout.coef_index(k, l), sys.layout.coef_index(k2, l)) == sys.penalty.S(k, k2));
}

TEST_CASE("continuous covariate terms are centered over the dataset") {
  std::mt19937 rng(12);
  const Dataset data = fixture::random_dataset(rng, {.individuals = 9, .covariates = 2});
  CovariateBasis g({{CovariateForm::Linear, 0, "a"}, {CovariateForm::Log, 1, "b"},
                    {CovariateForm::Quadratic, 0, "a"}});
  g = g.prepared(data);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(4);
  for (std::size_t i = 0; i < data.size(); ++i) sum += g.evaluate(data[i].covariates.row(0), static_cast<int>(i));
  CHECK(std::abs(sum[1]) < 1e-10);
  CHECK(std::abs(sum[2]) < 1e-10);
  CHECK(std::abs(sum[3]) < 1e-10);

  // Time-varying covariates are centered over observations.
  const Dataset tv = fixture::random_dataset(rng, {.individuals = 4, .time_varying = true});
  const CovariateBasis gl = fixture::linear_covariates(1).prepared(tv);
  double s = 0.0;
  for (const auto& ind : tv)
    for (int p = 0; p < ind.size(); ++p) s += gl.evaluate(ind.covariates.row(p), 0)[1];
  CHECK(std::abs(s) < 1e-10);
}

TEST_CASE("intercepts confounded with f0 are repaired by sum-to-zero") {
  std::mt19937 rng(13);
  const Dataset data = fixture::random_dataset(rng, {.individuals = 5, .covariates = 0});
  const AssembledSystem sys =
      assemble(data, basis5(), CovariateBasis(),
               ParametricBasis({{ParametricForm::Intercept, -1, ""}, {ParametricForm::PerIdIntercept, -1, ""}}), 3);
  CHECK(sys.reparameterized);
  CHECK(sys.layout.n_beta_full() == 6);
  CHECK(sys.layout.n_beta() == 4);
  CHECK(sys.notes.size() == 2);
  Eigen::VectorXd coef = Eigen::VectorXd::Random(sys.n_coef());
  const Eigen::VectorXd full = sys.layout.beta_full(coef);
  CHECK(full[0] == 0.0);
  CHECK(std::abs(full.tail(5).sum()) < 1e-14);
  CHECK(oracle::rel_err(sys.layout.reduce_beta(full), Eigen::VectorXd(coef.tail(4))) < 1e-12);

  CHECK_THROWS_AS(assemble(data, basis5(), CovariateBasis(),
                           ParametricBasis({{ParametricForm::PerIdIntercept, -1, ""}}), 3,
                           {.repair_intercepts = false}),
                  IdentifiabilityError);
}

TEST_CASE("per-id intercepts are made orthogonal to fixed covariate terms") {
  std::mt19937 rng(16);
  const Dataset data = fixture::random_dataset(rng, {.individuals = 6, .covariates = 2});
  const CovariateBasis g = fixture::linear_covariates(2).prepared(data);
  const AssembledSystem sys = assemble(data, basis5(), g,
                                       ParametricBasis({{ParametricForm::PerIdIntercept, -1, ""}}), 3);
  CHECK(sys.reparameterized);
  CHECK(sys.layout.n_beta() == 3);
  const Eigen::VectorXd full = sys.layout.beta_full(Eigen::VectorXd::Random(sys.n_coef()));
  for (int l = 0; l < 3; ++l) {
    double dot = 0.0;
    for (int i = 0; i < 6; ++i) dot += full[i] * g.evaluate(data[i].covariates.row(0), i)[l];
    CHECK(std::abs(dot) < 1e-12);
  }
  CHECK(oracle::rel_err(sys.layout.beta_map.transpose() * sys.layout.beta_map,
                        Eigen::MatrixXd(Eigen::MatrixXd::Identity(3, 3))) < 1e-12);
}

TEST_CASE("unrepairable confounding reports the null-space direction") {
  std::mt19937 rng(14);
  const Dataset data = fixture::random_dataset(rng, {.individuals = 5});
  // A per-id covariate function has a constant that duplicates the per-id intercept.
  try {
    assemble(data, basis5(), CovariateBasis({{CovariateForm::PerId, -1, ""}}),
             ParametricBasis({{ParametricForm::PerIdIntercept, -1, ""}}), 2);
    FAIL("expected an identifiability error");
  } catch (const IdentifiabilityError& e) {
    CHECK(e.direction().size() == static_cast<Eigen::Index>(e.labels().size()));
    CHECK(e.direction().norm() == doctest::Approx(1.0));
    CHECK(std::string(e.what()).find("not identifiable") != std::string::npos);
  }
}

TEST_CASE("assembly rejects invalid datasets") {
  std::mt19937 rng(15);
  CHECK_THROWS_AS(assemble({}, basis5(), CovariateBasis(), ParametricBasis(), 2), std::invalid_argument);
  Dataset data = fixture::random_dataset(rng, {.individuals = 2});
  data[0].times[0] = 1.5;
  CHECK_THROWS_AS(assemble(data, basis5(), CovariateBasis(), ParametricBasis(), 2), std::invalid_argument);
  data = fixture::random_dataset(rng, {.individuals = 2});
  data[1].covariates.resize(1, 3);
  data[1].covariates.setOnes();
  CHECK_THROWS_AS(assemble(data, basis5(), fixture::linear_covariates(1), ParametricBasis(), 2),
                  std::invalid_argument);
}

TEST_CASE("quantile and typical knots") {
  Dataset data(2);
  for (auto& ind : data) {
    ind.times = Eigen::VectorXd::LinSpaced(11, 0.0, 1.0);
  }
  data[1].times.array() += 0.01;
  data[1].times[10] = 1.0;
  const auto q = quantile_knots(data, 3, kUnit);
  REQUIRE(q.size() == 3);
  CHECK(q[0] > 0.0);
  CHECK(q[2] < 1.0);
  CHECK(std::is_sorted(q.begin(), q.end()));
  const auto t = typical_knots(data, kUnit);
  CHECK(t.size() == 10);
  CHECK(t[0] == doctest::Approx(0.005));
  CHECK_THROWS_AS(quantile_knots(data, 40, kUnit), std::invalid_argument);
}
