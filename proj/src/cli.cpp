#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>

#include "covgrow/cli.hpp"
#include "covgrow/errors.hpp"

namespace covgrow {

namespace fs = std::filesystem;

namespace {

constexpr int kCurvePoints = 200;

std::ofstream open_output(const fs::path& path) {
  // Binary mode keeps LF line endings on every platform.
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  return out;
}

fs::path output_dir(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (!fs::is_directory(p)) throw std::runtime_error("cannot create output directory '" + dir + "'");
  return p;
}

ReadOptions read_options(const ModelConfig& cfg, bool require_response = true) {
  return {cfg.time_varying, require_response};
}

void write_curves(std::ostream& out, const FittedModel& m) {
  const ModelLayout& lay = m.sys.layout;
  const Interval d = lay.basis.domain();
  Eigen::VectorXd grid(kCurvePoints);
  for (int p = 0; p < kCurvePoints; ++p) grid[p] = p + 1 == kCurvePoints ? d.hi : d.lo + d.width() * p / (kCurvePoints - 1);
  out << "id,t,fit,se\n";
  for (std::size_t i = 0; i < m.table.data.size(); ++i) {
    const Individual& ind = m.table.data[i];
    Eigen::MatrixXd u(kCurvePoints, ind.covariates.cols());
    for (int p = 0; p < kCurvePoints; ++p) u.row(p) = covariates_at_time(ind, grid[p]);
    const Prediction pr = predict(lay, m.fit.coef, m.fit.band_covariance, grid, u, lay.individual_index(ind.id));
    for (int p = 0; p < kCurvePoints; ++p)
      out << ind.id << ',' << format_number(grid[p]) << ',' << format_number(pr.mean[p]) << ','
          << format_number(pr.se[p]) << '\n';
  }
}

void write_residuals(std::ostream& out, const FittedModel& m) {
  const Eigen::VectorXd fitted = m.sys.design * m.fit.coef;
  out << "id,t,y,fit,residual,standardized\n";
  for (std::size_t i = 0; i < m.table.data.size(); ++i) {
    const Individual& ind = m.table.data[i];
    const int r0 = m.sys.row_offset[i];
    for (int p = 0; p < ind.size(); ++p) {
      const double y = ind.responses[p];
      const double f = fitted[r0 + p];
      const double scale = std::sqrt(m.fit.sigma2 * m.sys.point_variance[r0 + p]);
      out << ind.id << ',' << format_number(ind.times[p]) << ',' << format_number(y) << ',' << format_number(f)
          << ',' << format_number(y - f) << ',' << format_number(scale > 0.0 ? (y - f) / scale : 0.0) << '\n';
    }
  }
}

// Null-space report: the coefficients carrying the unidentified direction.
void report_null_space(std::ostream& err, const IdentifiabilityError& e) {
  const Eigen::VectorXd& v = e.direction();
  std::vector<int> idx(static_cast<std::size_t>(v.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return std::abs(v[a]) > std::abs(v[b]); });
  err << "null-space direction (largest components):\n";
  for (int i : idx) {
    if (std::abs(v[i]) < 1e-3) break;
    const std::string label = static_cast<std::size_t>(i) < e.labels().size() ? e.labels()[static_cast<std::size_t>(i)]
                                                                              : "coef " + std::to_string(i);
    err << "  " << label << ": " << format_number(v[i]) << '\n';
  }
}

int cmd_fit(const std::string& data, const std::string& config, const std::string& dir, std::ostream& out) {
  const ModelConfig cfg = read_config_file(config);
  const FittedModel m = fit_dataset(cfg, read_dataset_file(data, read_options(cfg)));
  const fs::path root = output_dir(dir);
  {
    auto f = open_output(root / "coef.csv");
    write_coefficients(f, m.sys.layout, m.fit.coef);
  }
  {
    auto f = open_output(root / "summary.txt");
    write_summary(f, m.sys, m.fit);
  }
  {
    auto f = open_output(root / "curves.csv");
    write_curves(f, m);
  }
  {
    auto f = open_output(root / "residuals.csv");
    write_residuals(f, m);
  }
  {
    auto f = open_output(root / "model.json");
    write_model(f, {m.sys.layout, m.fit.coef, m.fit.band_covariance, m.fit.lambdas, m.fit.sigma2, cfg.log_response,
                    cfg.gamma, m.table.covariate_names});
  }
  write_summary(out, m.sys, m.fit);
  return 0;
}

int cmd_predict(const std::string& model_path, const std::string& data, const std::string& out_path) {
  std::ifstream in(model_path);
  if (!in) throw ParseError("cannot open '" + model_path + "'");
  SavedModel model = [&] {
    try {
      return read_model(in);
    } catch (const ParseError& e) {
      throw ParseError(model_path + ": " + e.what());
    }
  }();
  // Time-varying mode accepts both kinds of covariate columns.
  const DataTable table = read_dataset_file(data, {true, false});
  std::vector<int> columns;
  for (const std::string& name : model.covariate_names) {
    const int c = table.covariate_index(name);
    if (c < 0) throw ParseError(data + ": missing covariate column '" + name + "' used by the model");
    columns.push_back(c);
  }
  const Interval d = model.layout.basis.domain();
  auto f = open_output(out_path);
  f << "id,t,fit,se\n";
  for (const Individual& ind : table.data) {
    Eigen::MatrixXd u(ind.size(), static_cast<Eigen::Index>(columns.size()));
    for (int p = 0; p < ind.size(); ++p) {
      if (!d.contains(ind.times[p]))
        throw std::invalid_argument("id '" + ind.id + "': time " + format_number(ind.times[p]) +
                                    " is outside the model domain");
      for (std::size_t c = 0; c < columns.size(); ++c)
        u(p, static_cast<Eigen::Index>(c)) = ind.covariates(p, columns[c]);
    }
    const Prediction pr = predict(model.layout, model.coef, model.band_covariance, ind.times, u,
                                  model.layout.individual_index(ind.id));
    for (int p = 0; p < ind.size(); ++p)
      f << ind.id << ',' << format_number(ind.times[p]) << ',' << format_number(pr.mean[p]) << ','
        << format_number(pr.se[p]) << '\n';
  }
  return 0;
}

int cmd_simulate(const std::string& config, std::uint64_t seed, const std::string& out_path, std::ostream& out) {
  const ModelConfig cfg = read_config_file(config);
  const Simulation sim = simulate(cfg, seed);
  const fs::path path(out_path);
  if (path.has_parent_path()) output_dir(path.parent_path().string());
  {
    auto f = open_output(path);
    write_dataset(f, sim.table);
  }
  fs::path truth = path;
  truth.replace_extension(".truth.csv");
  {
    auto f = open_output(truth);
    write_coefficients(f, sim.layout, sim.coef);
  }
  out << "wrote " << path.string() << " and " << truth.string() << '\n';
  return 0;
}

int cmd_scan(const std::string& data, const std::string& config, const std::string& grid, const std::string& dir,
             std::ostream& out) {
  ModelConfig cfg = read_config_file(config);
  if (!grid.empty()) {
    std::istringstream g("[selection]\ngrid = " + grid + "\n");
    cfg.selection.grid = parse_config(g).selection.grid;
  }
  const DataTable table = transformed(read_dataset_file(data, read_options(cfg)), cfg);
  const ModelSpec spec = build_model(cfg, table);
  const AssembledSystem sys = assemble(table.data, spec.basis, spec.covariates, spec.parametric, cfg.gamma);
  std::optional<double> sigma2 = cfg.selection.sigma2;
  if (!sigma2) {
    try {
      sigma2 = sigma2_hat(sys).value;
    } catch (const std::domain_error&) {
      // R-hat column omitted
    }
  }
  const std::vector<ScanPoint> scan = gcv_scan(sys, cfg.selection.grid, cfg.selection.tie_lambdas, sigma2);
  auto f = open_output(output_dir(dir) / "scan.csv");
  for (int l = 0; l < sys.n_functions(); ++l) f << "lambda_" << l << ',';
  f << "V," << (sigma2 ? "risk_hat," : "") << "trace_A\n";
  for (const ScanPoint& p : scan) {
    for (double l : p.lambdas) f << format_number(l) << ',';
    f << format_number(p.gcv) << ',';
    if (sigma2) f << format_number(p.risk_hat.value_or(std::numeric_limits<double>::quiet_NaN())) << ',';
    f << format_number(p.trace) << '\n';
  }
  const ScanPoint& best = scan[gcv_argmin(scan, sys.wresponse.squaredNorm())];
  out << "points: " << scan.size() << "\nminimum V: " << format_number(best.gcv) << " at lambda =";
  for (double l : best.lambdas) out << ' ' << format_number(l);
  out << '\n';
  return 0;
}

}  // namespace

FittedModel fit_dataset(const ModelConfig& config, const DataTable& raw) {
  DataTable table = transformed(raw, config);
  const ModelSpec spec = build_model(config, table);
  AssembledSystem sys = assemble(table.data, spec.basis, spec.covariates, spec.parametric, config.gamma);
  FitResult fit = select(sys, config.selection);
  return {std::move(table), std::move(sys), std::move(fit)};
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"covgrow: penalized spline growth curves with covariates"};
  app.require_subcommand(1);
  std::string data, config, dir, model, grid;
  std::uint64_t seed = 1;

  CLI::App* fit = app.add_subcommand("fit", "fit a model and write coef, summary, curves, residuals and model files");
  fit->add_option("--data", data, "dataset CSV")->required();
  fit->add_option("--config", config, "model configuration")->required();
  fit->add_option("--out", dir, "output directory")->required();

  CLI::App* pred = app.add_subcommand("predict", "evaluate a fitted model at the rows of a dataset");
  pred->add_option("--model", model, "model.json written by fit")->required();
  pred->add_option("--data", data, "dataset CSV (y optional)")->required();
  pred->add_option("--out", dir, "output CSV")->required();

  CLI::App* sim = app.add_subcommand("simulate", "draw a dataset and its true coefficients");
  sim->add_option("--config", config, "model configuration with a [simulate] section")->required();
  sim->add_option("--seed", seed, "random seed");
  sim->add_option("--out", dir, "output dataset CSV (truth goes to <stem>.truth.csv)")->required();

  CLI::App* scan = app.add_subcommand("gcv-scan", "tabulate V, R-hat and tr A over a lambda grid");
  scan->add_option("--data", data, "dataset CSV")->required();
  scan->add_option("--config", config, "model configuration")->required();
  scan->add_option("--grid", grid, "standardized grid min:max:points_per_decade");
  scan->add_option("--out", dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    if (app.get_subcommands().empty()) err << app.help();
    return 2;
  }

  try {
    if (*fit) return cmd_fit(data, config, dir, out);
    if (*pred) return cmd_predict(model, data, dir);
    if (*sim) return cmd_simulate(config, seed, dir, out);
    return cmd_scan(data, config, grid, dir, out);
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return 2;
  } catch (const IdentifiabilityError& e) {
    err << "identifiability error: " << e.what() << '\n';
    report_null_space(err, e);
    return 3;
  } catch (const SingularSystemError& e) {
    err << "singular system: " << e.what() << '\n';
    return 3;
  } catch (const SelectionError& e) {
    err << "selection error: " << e.what() << '\n';
    return 4;
  } catch (const std::invalid_argument& e) {
    err << "invalid input: " << e.what() << '\n';
    return 2;
  } catch (const std::out_of_range& e) {
    err << "invalid input: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace covgrow
