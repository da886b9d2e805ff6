#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "covgrow/cli.hpp"
#include "covgrow/errors.hpp"

namespace covgrow {

namespace {

[[noreturn]] void bad_truth(const std::string& msg) { throw ParseError("[simulate]: " + msg); }

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// Least-squares projection of a shape onto the spline basis on a fine grid.
Eigen::VectorXd project(const SplineBasis& basis, const std::string& shape) {
  const Interval d = basis.domain();
  const int m = 40 * basis.size() + 200;
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(m, basis.size());
  Eigen::VectorXd f(m);
  for (int i = 0; i < m; ++i) {
    const double x = static_cast<double>(i) / (m - 1);
    const BasisBand band = eval_basis(basis, std::clamp(d.lo + x * d.width(), d.lo, d.hi));
    b.row(i).segment(band.first, band.values.size()) = band.values.transpose();
    f[i] = shape_value(shape, x);
  }
  return b.colPivHouseholderQr().solve(f);
}

Eigen::VectorXd truth_function(const SplineBasis& basis, const std::string& spec) {
  if (spec.rfind("coef:", 0) == 0) {
    std::vector<double> v;
    for (const std::string& item : split(spec.substr(5), ' '))
      if (!item.empty()) v.push_back(parse_number(item, "[simulate] coefficient list"));
    if (static_cast<int>(v.size()) != basis.size())
      bad_truth("coefficient list has " + std::to_string(v.size()) + " values, the basis has " +
                std::to_string(basis.size()));
    return Eigen::Map<Eigen::VectorXd>(v.data(), basis.size());
  }
  return project(basis, spec);
}

}  // namespace

double shape_value(const std::string& shape, double x) {
  const auto colon = shape.find(':');
  const std::string name = shape.substr(0, colon);
  const double amp = colon == std::string::npos ? 1.0 : parse_number(shape.substr(colon + 1), "[simulate] shape amplitude");
  constexpr double pi = std::numbers::pi;
  double v;
  if (name == "zero") v = 0.0;
  else if (name == "constant") v = 1.0;
  else if (name == "linear") v = x;
  else if (name == "quadratic") v = x * x;
  else if (name == "sine") v = std::sin(2.0 * pi * x);
  else if (name == "cosine") v = std::cos(2.0 * pi * x);
  else if (name == "bump") v = std::exp(-std::pow((x - 0.5) / 0.15, 2));
  else if (name == "logistic") v = 1.0 / (1.0 + std::exp(-10.0 * (x - 0.5)));
  else if (name == "saturating") v = 1.0 - std::exp(-3.0 * x);
  else bad_truth("unknown shape '" + name + "'");
  return amp * v;
}

Simulation simulate(const ModelConfig& config, std::uint64_t seed) {
  const SimulateSpec& s = config.simulate;
  if (s.individuals < 1) bad_truth("individuals must be at least 1");
  if (s.noise_sd < 0.0 || s.per_id_sd < 0.0 || s.jitter < 0.0 || s.sigma_edge < 0.0)
    bad_truth("noise_sd, per_id_sd, jitter and sigma_edge must be nonnegative");
  const Interval dom = config.domain.value_or(Interval{0.0, 1.0});

  struct Range {
    std::string name;
    double lo, hi;
  };
  std::vector<Range> cov;
  for (const std::string& c : s.covariates) {
    const auto f = split(c, ':');
    if (f.size() != 3 || f[0].empty()) bad_truth("covariates need name:lo:hi, got '" + c + "'");
    cov.push_back({f[0], parse_number(f[1], "[simulate] covariates"), parse_number(f[2], "[simulate] covariates")});
    if (!(cov.back().lo <= cov.back().hi)) bad_truth("covariate range must have lo <= hi");
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> z;
  std::uniform_int_distribution<int> count(s.min_points, s.max_points);

  DataTable table;
  for (const Range& r : cov) table.covariate_names.push_back(r.name);
  table.has_sigma = true;
  const int width = static_cast<int>(std::to_string(s.individuals - 1).size());
  for (int i = 0; i < s.individuals; ++i) {
    Individual ind;
    std::string num = std::to_string(i);
    ind.id = "id" + std::string(static_cast<std::size_t>(width) - num.size(), '0') + num;
    const int n = count(rng);
    ind.times.resize(n);
    const double step = n > 1 ? dom.width() / (n - 1) : 0.0;
    for (int p = 0; p < n; ++p) {
      const double t0 = n > 1 ? dom.lo + p * step : dom.lo + 0.5 * dom.width();
      ind.times[p] = std::clamp(t0 + s.jitter * step * (unit(rng) - 0.5), dom.lo, dom.hi);
    }
    std::sort(ind.times.begin(), ind.times.end());
    ind.covariates.resize(1, static_cast<Eigen::Index>(cov.size()));
    for (std::size_t c = 0; c < cov.size(); ++c)
      ind.covariates(0, static_cast<Eigen::Index>(c)) = cov[c].lo + (cov[c].hi - cov[c].lo) * unit(rng);
    if (config.time_varying) {
      ind.time_varying = true;
      ind.covariates = ind.covariates.replicate(n, 1).eval();
    }
    ind.responses = Eigen::VectorXd::Zero(n);
    ind.variances.resize(n);
    for (int p = 0; p < n; ++p) {
      const double x = (ind.times[p] - dom.lo) / dom.width();
      ind.variances[p] = std::pow(1.0 + s.sigma_edge * (2.0 * x - 1.0) * (2.0 * x - 1.0), 2);
    }
    table.data.push_back(std::move(ind));
  }

  ModelConfig cfg = config;
  cfg.domain = dom;
  const ModelSpec spec = build_model(cfg, table);
  AssembleOptions opts;
  const AssembledSystem sys = assemble(table.data, spec.basis, spec.covariates, spec.parametric, config.gamma, opts);
  const ModelLayout& lay = sys.layout;

  if (static_cast<int>(s.functions.size()) != lay.n_functions())
    bad_truth("the model has " + std::to_string(lay.n_functions()) + " functions but " +
              std::to_string(s.functions.size()) + " are defined (f0, f1, ...)");
  Eigen::MatrixXd alpha(lay.n_basis(), lay.n_functions());
  for (int l = 0; l < lay.n_functions(); ++l) alpha.col(l) = truth_function(lay.basis, s.functions[static_cast<std::size_t>(l)]);

  const auto& terms = lay.parametric.terms();
  std::size_t fixed_terms = 0;
  for (const auto& t : terms) fixed_terms += t.form != ParametricForm::PerIdIntercept;
  if (!s.beta.empty() && s.beta.size() != fixed_terms)
    bad_truth("beta has " + std::to_string(s.beta.size()) + " values for " + std::to_string(fixed_terms) +
              " non-per-id parametric terms");
  Eigen::VectorXd beta(static_cast<Eigen::Index>(terms.size()));
  std::size_t next = 0;
  for (std::size_t j = 0; j < terms.size(); ++j)
    beta[static_cast<Eigen::Index>(j)] = terms[j].form == ParametricForm::PerIdIntercept
                                             ? s.per_id_sd * z(rng)
                                             : (s.beta.empty() ? 0.0 : s.beta[next++]);

  Simulation sim{std::move(table), lay, lay.pack(alpha, lay.reduce_beta(beta))};
  for (std::size_t i = 0; i < sim.table.data.size(); ++i) {
    Individual& ind = sim.table.data[i];
    for (int p = 0; p < ind.size(); ++p) {
      const double mean = lay.design_row(ind.times[p], ind.covariates_at(p), static_cast<int>(i)).dot(sim.coef);
      const double y = mean + s.noise_sd * std::sqrt(ind.variances[p]) * z(rng);
      ind.responses[p] = config.log_response ? std::exp(y) : y;
    }
  }
  return sim;
}

}  // namespace covgrow
