#pragma once

// Random datasets and models shared by the unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "covgrow/design.hpp"

namespace fixture {

inline std::vector<double> uniform_knots(int n, covgrow::Interval d) {
  std::vector<double> k(n);
  for (int i = 0; i < n; ++i) k[i] = d.lo + d.width() * (i + 1) / (n + 1);
  return k;
}

struct DatasetShape {
  int individuals = 3;
  int min_points = 4;
  int max_points = 8;
  int covariates = 1;
  bool time_varying = false;
  bool dense_covariance = false;
  bool shared_times = false;
};

/// Random dataset on [0, 1]: sorted uniform times, standard normal responses,
/// positive covariates in (0.5, 2.5), heteroscedastic variances.
inline covgrow::Dataset random_dataset(std::mt19937& rng, const DatasetShape& s) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> z;
  std::uniform_int_distribution<int> count(s.min_points, s.max_points);
  covgrow::Dataset data;
  Eigen::VectorXd shared;
  if (s.shared_times) {
    shared.resize(count(rng));
    for (auto& t : shared) t = unit(rng);
    std::sort(shared.begin(), shared.end());
  }
  for (int i = 0; i < s.individuals; ++i) {
    covgrow::Individual ind;
    ind.id = "p" + std::to_string(i);
    if (s.shared_times) {
      ind.times = shared;
    } else {
      ind.times.resize(count(rng));
      for (auto& t : ind.times) t = unit(rng);
      std::sort(ind.times.begin(), ind.times.end());
    }
    const int n = ind.size();
    ind.responses.resize(n);
    for (auto& y : ind.responses) y = z(rng);
    ind.variances.resize(n);
    for (auto& v : ind.variances) v = 0.5 + unit(rng);
    if (s.dense_covariance) {
      Eigen::MatrixXd a(n, n);
      for (auto& v : a.reshaped()) v = 0.3 * z(rng);
      ind.covariance = a * a.transpose() + Eigen::MatrixXd::Identity(n, n);
    }
    ind.time_varying = s.time_varying;
    ind.covariates.resize(s.time_varying ? n : 1, s.covariates);
    for (auto& u : ind.covariates.reshaped()) u = 0.5 + 2.0 * unit(rng);
    data.push_back(std::move(ind));
  }
  return data;
}

inline covgrow::CovariateBasis linear_covariates(int m) {
  std::vector<covgrow::CovariateSpec> specs;
  for (int c = 0; c < m; ++c)
    specs.push_back({covgrow::CovariateForm::Linear, c, "u" + std::to_string(c + 1)});
  return covgrow::CovariateBasis(specs);
}

inline covgrow::Dataset permuted(const covgrow::Dataset& data, const std::vector<int>& order) {
  covgrow::Dataset out;
  for (int i : order) out.push_back(data[i]);
  return out;
}

/// Responses replaced by X a plus independent N(0, sigma2 * variance) noise.
/// Diagonal within-individual covariances only.
inline covgrow::Dataset simulated(covgrow::Dataset data, const covgrow::AssembledSystem& sys,
                                  const Eigen::VectorXd& coef, double sigma2, std::mt19937& rng) {
  std::normal_distribution<double> z;
  const Eigen::VectorXd mu = sys.design * coef;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto& ind = data[i];
    for (int p = 0; p < ind.size(); ++p)
      ind.responses[p] = mu[sys.row_offset[i] + p] + std::sqrt(sigma2 * ind.variances[p]) * z(rng);
  }
  return data;
}

/// Smooth spline coefficients: alpha(k, l) follows a slow wave whose
/// amplitude shrinks with l. Parametric coefficients are zero.
inline Eigen::VectorXd smooth_truth(const covgrow::ModelLayout& lay) {
  const int kk = lay.n_basis();
  Eigen::MatrixXd alpha(kk, lay.n_functions());
  for (int k = 0; k < kk; ++k)
    for (int l = 0; l < lay.n_functions(); ++l)
      alpha(k, l) = std::sin(3.0 * k / kk + l) / (1.0 + l);
  return lay.pack(alpha, Eigen::VectorXd::Zero(lay.n_beta()));
}

}  // namespace fixture
