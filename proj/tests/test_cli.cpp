#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "covgrow/cli.hpp"
#include "covgrow/errors.hpp"
#include "oracles.hpp"

using namespace covgrow;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("covgrow_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "covgrow");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

void write_file(const std::string& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Header plus numeric rows (columns listed in `text_columns` are not numbers).
struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  double num(std::size_t r, const std::string& col) const {
    const auto c = std::find(header.begin(), header.end(), col) - header.begin();
    return parse_number(rows[r][static_cast<std::size_t>(c)], col);
  }
};

Csv read_csv(const std::string& path, std::size_t text_columns = 0) {
  std::istringstream in(read_file(path));
  Csv csv;
  std::string line;
  std::getline(in, line);
  csv.header = split_csv_line(line);
  while (std::getline(in, line)) {
    auto f = split_csv_line(line);
    REQUIRE(f.size() == csv.header.size());
    for (std::size_t c = text_columns; c < f.size(); ++c) parse_number(f[c], csv.header[c]);
    csv.rows.push_back(std::move(f));
  }
  return csv;
}

const std::string kProfiles =
    "domain = [0, 1]\nknots = quantile:6\nresponse_transform = log\ng_terms = log:q\n"
    "h_terms = per_id_intercept\n"
    "[selection]\nmethod = gcv-grid\ngrid = 1e-4:1e4:2\n"
    "[simulate]\nindividuals = 8\npoints = 15:25\njitter = 0.5\nnoise_sd = 0.02\nsigma_edge = 1\n"
    "per_id_sd = 0.1\ncovariates = q:1:4\nf0 = saturating:2\nf1 = bump:0.5\n";

}  // namespace

TEST_CASE("fit writes every output and they re-parse") {
  TempDir dir("fit");
  write_file(dir / "m.conf", kProfiles);
  REQUIRE(cli({"simulate", "--config", dir / "m.conf", "--seed", "4", "--out", dir / "d.csv"}).code == 0);
  CHECK(fs::exists(dir / "d.truth.csv"));
  const Run r = cli({"fit", "--data", dir / "d.csv", "--config", dir / "m.conf", "--out", dir / "out"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("method: gcv-grid") != std::string::npos);

  std::ifstream coef(dir / "out/coef.csv");
  const CoefficientTable ct = read_coefficients(coef);
  CHECK(ct.alpha.cols() == 2);
  CHECK(ct.beta.size() == 8);

  const Csv curves = read_csv(dir / "out/curves.csv", 1);
  CHECK(curves.header == std::vector<std::string>{"id", "t", "fit", "se"});
  CHECK(curves.rows.size() == 8 * 200);
  CHECK(curves.num(0, "t") == 0.0);
  CHECK(curves.num(199, "t") == 1.0);
  for (std::size_t i = 0; i < curves.rows.size(); ++i) CHECK(curves.num(i, "se") >= 0.0);

  const Csv res = read_csv(dir / "out/residuals.csv", 1);
  const DataTable data = read_dataset_file(dir / "d.csv");
  std::size_t n = 0;
  for (const auto& ind : data.data) n += static_cast<std::size_t>(ind.size());
  CHECK(res.rows.size() == n);

  std::map<std::string, std::string> summary;
  std::istringstream s(read_file(dir / "out/summary.txt"));
  for (std::string line; std::getline(s, line);) {
    const auto colon = line.find(": ");
    REQUIRE(colon != std::string::npos);
    summary[line.substr(0, colon)] = line.substr(colon + 2);
  }
  for (const char* key : {"method", "converged", "lambda", "sigma2", "trace_A", "gcv", "rss", "n_obs"})
    CHECK(summary.count(key) == 1);
  CHECK(summary["converged"] == "true");

  std::ifstream mj(dir / "out/model.json");
  const SavedModel m = read_model(mj);
  CHECK(m.log_response);
  CHECK(m.covariate_names == std::vector<std::string>{"q"});

  // predict on the fitted rows reproduces the residual file's fitted values.
  REQUIRE(cli({"predict", "--model", dir / "out/model.json", "--data", dir / "d.csv", "--out", dir / "p.csv"}).code == 0);
  const Csv pred = read_csv(dir / "p.csv", 1);
  REQUIRE(pred.rows.size() == n);
  for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(pred.num(i, "fit") - res.num(i, "fit")) < 1e-12);
}

TEST_CASE("rerunning with identical inputs gives identical bytes") {
  TempDir dir("determinism");
  write_file(dir / "m.conf", kProfiles);
  for (const char* d : {"a.csv", "b.csv"})
    REQUIRE(cli({"simulate", "--config", dir / "m.conf", "--seed", "21", "--out", dir / d}).code == 0);
  CHECK(read_file(dir / "a.csv") == read_file(dir / "b.csv"));
  CHECK(read_file(dir / "a.truth.csv") == read_file(dir / "b.truth.csv"));
  for (const char* o : {"o1", "o2"})
    REQUIRE(cli({"fit", "--data", dir / "a.csv", "--config", dir / "m.conf", "--out", dir / o}).code == 0);
  for (const char* f : {"coef.csv", "summary.txt", "curves.csv", "residuals.csv", "model.json"}) {
    const std::string a = read_file(dir / (std::string("o1/") + f));
    CHECK(!a.empty());
    CHECK(a == read_file(dir / (std::string("o2/") + f)));
    CHECK(a.find('\r') == std::string::npos);
  }
}

TEST_CASE("noiseless simulate, fit at lambda = 0 and predict recover the truth") {
  TempDir dir("roundtrip");
  std::string conf = kProfiles;
  conf.replace(conf.find("noise_sd = 0.02"), 15, "noise_sd = 0");
  conf.replace(conf.find("method = gcv-grid"), 17, "method = fixed\nlambdas = 0, 0");
  write_file(dir / "m.conf", conf);
  REQUIRE(cli({"simulate", "--config", dir / "m.conf", "--seed", "5", "--out", dir / "d.csv"}).code == 0);
  REQUIRE(cli({"fit", "--data", dir / "d.csv", "--config", dir / "m.conf", "--out", dir / "out"}).code == 0);
  std::ifstream t(dir / "d.truth.csv"), f(dir / "out/coef.csv");
  const CoefficientTable truth = read_coefficients(t), fit = read_coefficients(f);
  REQUIRE(truth.alpha.rows() == fit.alpha.rows());
  CHECK((truth.alpha - fit.alpha).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((truth.beta - fit.beta).cwiseAbs().maxCoeff() < 1e-8);

  REQUIRE(cli({"predict", "--model", dir / "out/model.json", "--data", dir / "d.csv", "--out", dir / "p.csv"}).code == 0);
  const Csv pred = read_csv(dir / "p.csv", 1);
  const Csv data = read_csv(dir / "d.csv", 1);
  for (std::size_t i = 0; i < pred.rows.size(); ++i)
    CHECK(std::abs(pred.num(i, "fit") - std::log(data.num(i, "y"))) < 1e-8);
}

TEST_CASE("a single curve reduces to the classical smoothing spline") {
  TempDir dir("single");
  std::string rows = "id,t,y\n";
  for (int p = 0; p < 40; ++p) {
    const double t = 0.25 * p;
    rows += "only," + format_number(t) + "," + format_number(std::sin(t) + 0.1 * std::cos(7.0 * p)) + "\n";
  }
  write_file(dir / "d.csv", rows);
  write_file(dir / "m.conf", "knots = quantile:8\ngamma = 2\n[selection]\nmethod = fixed\nlambdas = 0.5\n");
  REQUIRE(cli({"fit", "--data", dir / "d.csv", "--config", dir / "m.conf", "--out", dir / "out"}).code == 0);
  std::ifstream f(dir / "out/coef.csv");
  const CoefficientTable ct = read_coefficients(f);
  CHECK(ct.alpha.cols() == 1);
  CHECK(ct.beta.size() == 0);

  // (B^t B + lambda S) a = B^t y with the same basis and raw lambda.
  const DataTable table = read_dataset_file(dir / "d.csv");
  std::istringstream conf(read_file(dir / "m.conf"));
  const ModelConfig cfg = parse_config(conf);
  const ModelSpec spec = build_model(cfg, table);
  const Individual& ind = table.data[0];
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(ind.size(), spec.basis.size());
  for (int p = 0; p < ind.size(); ++p) {
    const BasisBand band = eval_basis(spec.basis, ind.times[p]);
    b.row(p).segment(band.first, band.values.size()) = band.values.transpose();
  }
  const Eigen::MatrixXd s = penalty_matrix(spec.basis, 2).S;
  const double scale = (b.transpose() * b).trace() / s.trace();
  const Eigen::VectorXd want = oracle::inverse(b.transpose() * b + 0.5 * scale * s) * (b.transpose() * ind.responses);
  CHECK(oracle::rel_err(Eigen::MatrixXd(ct.alpha.col(0)), Eigen::MatrixXd(want)) < 1e-9);
}

TEST_CASE("gcv-scan values agree with an independent gcv evaluation") {
  TempDir dir("scan");
  write_file(dir / "m.conf", kProfiles);
  REQUIRE(cli({"simulate", "--config", dir / "m.conf", "--seed", "8", "--out", dir / "d.csv"}).code == 0);
  const Run r = cli({"gcv-scan", "--data", dir / "d.csv", "--config", dir / "m.conf", "--grid", "1e-3:1e3:1",
                     "--out", dir / "scan"});
  REQUIRE(r.code == 0);
  const Csv scan = read_csv(dir / "scan/scan.csv");
  CHECK(scan.header == std::vector<std::string>{"lambda_0", "lambda_1", "V", "risk_hat", "trace_A"});
  CHECK(scan.rows.size() == 49);

  std::istringstream conf(kProfiles);
  const ModelConfig cfg = parse_config(conf);
  const FittedModel m = fit_dataset(cfg, read_dataset_file(dir / "d.csv"));
  // Independent dense evaluation of V from the whitened system.
  const Eigen::MatrixXd& x = m.sys.wdesign;
  double best = std::numeric_limits<double>::infinity();
  Eigen::Vector2d best_lambda;
  for (std::size_t i = 0; i < scan.rows.size(); ++i) {
    const Eigen::Vector2d lam(scan.num(i, "lambda_0"), scan.num(i, "lambda_1"));
    const Eigen::MatrixXd a = x * oracle::inverse(x.transpose() * x + m.sys.penalty_total(lam)) * x.transpose();
    const Eigen::VectorXd res = m.sys.wresponse - a * m.sys.wresponse;
    const double nn = static_cast<double>(x.rows());
    const double v = res.squaredNorm() / nn / std::pow(1.0 - a.trace() / nn, 2);
    CHECK(oracle::rel_err(scan.num(i, "V"), v) < 1e-9);
    CHECK(oracle::rel_err(scan.num(i, "V"), gcv_score(m.sys, lam)) < 1e-12);
    CHECK(oracle::rel_err(scan.num(i, "trace_A"), a.trace()) < 1e-9);
    if (scan.num(i, "V") < best) {
      best = scan.num(i, "V");
      best_lambda = lam;
    }
  }
  // The scan minimizer is the one select() picks on the same grid.
  ModelConfig coarse = cfg;
  coarse.selection.grid = {1e-3, 1e3, 1};
  const FittedModel sel = fit_dataset(coarse, read_dataset_file(dir / "d.csv"));
  CHECK(sel.fit.lambdas == best_lambda);
}

TEST_CASE("exit codes classify failures") {
  TempDir dir("exits");
  write_file(dir / "m.conf", kProfiles);
  REQUIRE(cli({"simulate", "--config", dir / "m.conf", "--seed", "2", "--out", dir / "d.csv"}).code == 0);
  const std::string data = dir / "d.csv";

  CHECK(cli({}).code == 2);
  CHECK(cli({"fit", "--data", data}).code == 2);
  CHECK(cli({"fit", "--data", dir / "missing.csv", "--config", dir / "m.conf", "--out", dir / "o"}).code == 2);
  write_file(dir / "bad.conf", "gamma = 7\n");
  CHECK(cli({"fit", "--data", data, "--config", dir / "bad.conf", "--out", dir / "o"}).code == 2);
  write_file(dir / "col.conf", "g_terms = lin:nope\n");
  CHECK(cli({"fit", "--data", data, "--config", dir / "col.conf", "--out", dir / "o"}).code == 2);

  // f1(t) q contains the constant multiple of q that the parametric term also fits.
  write_file(dir / "unid.conf", "knots = quantile:4\ng_terms = lin:q\nh_terms = lin:q\n");
  const Run unid = cli({"fit", "--data", data, "--config", dir / "unid.conf", "--out", dir / "o"});
  CHECK(unid.code == 3);
  CHECK(unid.err.find("null-space direction") != std::string::npos);
  CHECK(unid.err.find("lin:q") != std::string::npos);

  write_file(dir / "nc.conf",
             "knots = quantile:4\ng_terms = log:q\nh_terms = per_id_intercept\n"
             "[selection]\nmethod = risk-fixed-point\nmax_iter = 1\nfallback = none\n");
  CHECK(cli({"fit", "--data", data, "--config", dir / "nc.conf", "--out", dir / "o"}).code == 4);

  write_file(dir / "nc2.conf",
             "knots = quantile:4\ng_terms = log:q\nh_terms = per_id_intercept\n"
             "[selection]\nmethod = risk-fixed-point\nmax_iter = 1\n");
  const Run fb = cli({"fit", "--data", data, "--config", dir / "nc2.conf", "--out", dir / "o"});
  CHECK(fb.code == 0);
  CHECK(fb.out.find("converged: false") != std::string::npos);

  write_file(dir / "nocov.csv", "id,t\nx,0.5\n");
  REQUIRE(cli({"fit", "--data", data, "--config", dir / "m.conf", "--out", dir / "o"}).code == 0);
  CHECK(cli({"predict", "--model", dir / "o/model.json", "--data", dir / "nocov.csv", "--out", dir / "p.csv"}).code == 2);
  CHECK(cli({"predict", "--model", dir / "m.conf", "--data", data, "--out", dir / "p.csv"}).code == 2);
  CHECK(cli({"simulate", "--config", dir / "bad.conf", "--out", dir / "s.csv"}).code == 2);
}
