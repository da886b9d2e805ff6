#include "covgrow/io.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "covgrow/errors.hpp"

namespace covgrow {

namespace {

using nlohmann::json;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string line_context(int line) { return "line " + std::to_string(line); }

[[noreturn]] void parse_fail(const std::string& msg) { throw ParseError(msg); }

// "a, b, c" or "[a, b, c]" -> trimmed items (empty list for "" or "[]").
std::vector<std::string> split_list(const std::string& value, char sep = ',') {
  std::string v = trim(value);
  if (v.size() >= 2 && v.front() == '[' && v.back() == ']') v = v.substr(1, v.size() - 2);
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  if (!v.empty() && v.back() == sep) out.emplace_back();
  return out;
}

std::vector<double> parse_numbers(const std::string& value, const std::string& context, char sep = ',') {
  std::vector<double> out;
  for (const std::string& item : split_list(value, sep))
    if (!item.empty() || sep != ' ') out.push_back(parse_number(item, context));
  return out;
}

int parse_int(const std::string& field, const std::string& context) {
  const std::string f = trim(field);
  int v = 0;
  const auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
  if (ec != std::errc() || p != f.data() + f.size() || f.empty())
    parse_fail(context + ": expected an integer, got '" + field + "'");
  return v;
}

bool parse_bool(const std::string& field, const std::string& context) {
  const std::string f = lower(trim(field));
  if (f == "true" || f == "yes" || f == "1") return true;
  if (f == "false" || f == "no" || f == "0") return false;
  parse_fail(context + ": expected true or false, got '" + field + "'");
}

std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) parse_fail("cannot open '" + path + "'");
  return in;
}

}  // namespace

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, r.ptr);
}

double parse_number(const std::string& field, const std::string& context) {
  std::string f = trim(field);
  if (!f.empty() && f.front() == '+') f.erase(0, 1);
  double v = 0.0;
  const auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
  if (f.empty() || ec != std::errc() || p != f.data() + f.size())
    parse_fail(context + ": expected a number, got '" + field + "'");
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// ---------------------------------------------------------------------------

int DataTable::covariate_index(const std::string& name) const {
  const auto it = std::find(covariate_names.begin(), covariate_names.end(), name);
  return it == covariate_names.end() ? -1 : static_cast<int>(it - covariate_names.begin());
}

DataTable read_dataset(std::istream& in, const ReadOptions& options) {
  std::string line;
  int lineno = 0;
  std::vector<std::string> header;
  while (header.empty() && std::getline(in, line)) {
    ++lineno;
    if (!trim(line).empty()) header = split_csv_line(line);
  }
  if (header.empty()) parse_fail("dataset is empty (no header row)");
  for (auto& h : header) h = trim(h);

  int c_id = -1, c_t = -1, c_y = -1, c_sigma = -1;
  std::vector<int> c_cov;
  DataTable table;
  for (int c = 0; c < static_cast<int>(header.size()); ++c) {
    const std::string h = lower(header[static_cast<std::size_t>(c)]);
    int* slot = h == "id" ? &c_id : h == "t" ? &c_t : h == "y" ? &c_y : h == "sigma" ? &c_sigma : nullptr;
    if (slot) {
      if (*slot >= 0) parse_fail("line 1: duplicate column '" + h + "'");
      *slot = c;
    } else {
      if (header[static_cast<std::size_t>(c)].empty()) parse_fail("line 1: empty column name");
      c_cov.push_back(c);
      table.covariate_names.push_back(header[static_cast<std::size_t>(c)]);
    }
  }
  if (c_id < 0 || c_t < 0) parse_fail("line 1: header needs 'id' and 't' columns");
  if (c_y < 0 && options.require_response) parse_fail("line 1: header needs a 'y' column");
  table.has_response = c_y >= 0;
  table.has_sigma = c_sigma >= 0;

  struct Rows {
    std::vector<double> t, y, s2;
    std::vector<std::vector<double>> u;
    int first_line = 0;
  };
  std::vector<std::string> order;
  std::map<std::string, Rows> groups;
  const std::size_t m = c_cov.size();
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::vector<std::string> f = split_csv_line(line);
    const std::string ctx = line_context(lineno);
    if (f.size() != header.size())
      parse_fail(ctx + ": expected " + std::to_string(header.size()) + " fields, found " + std::to_string(f.size()));
    auto number = [&](int c) {
      const std::string& v = f[static_cast<std::size_t>(c)];
      if (trim(v).empty()) parse_fail(ctx + ": missing value in column '" + header[static_cast<std::size_t>(c)] + "'");
      const double x = parse_number(v, ctx + ", column '" + header[static_cast<std::size_t>(c)] + "'");
      if (!std::isfinite(x)) parse_fail(ctx + ": non-finite value in column '" + header[static_cast<std::size_t>(c)] + "'");
      return x;
    };
    const std::string id = trim(f[static_cast<std::size_t>(c_id)]);
    if (id.empty()) parse_fail(ctx + ": empty id");
    auto [it, fresh] = groups.try_emplace(id);
    Rows& g = it->second;
    if (fresh) {
      order.push_back(id);
      g.first_line = lineno;
    }
    g.t.push_back(number(c_t));
    g.y.push_back(c_y >= 0 ? number(c_y) : 0.0);
    double s = 1.0;
    if (c_sigma >= 0) {
      s = number(c_sigma);
      if (!(s > 0.0)) parse_fail(ctx + ": sigma must be positive");
    }
    g.s2.push_back(s * s);
    std::vector<double> u(m);
    for (std::size_t j = 0; j < m; ++j) u[j] = number(c_cov[j]);
    if (!options.time_varying && !g.u.empty() && u != g.u.front())
      parse_fail(ctx + ": covariates change within id '" + id +
                 "' (set time_varying = true for time-dependent covariates)");
    g.u.push_back(std::move(u));
  }
  if (order.empty()) parse_fail("dataset has a header but no data rows");

  double total = 0.0;
  std::size_t count = 0;
  for (const auto& [id, g] : groups) {
    total = std::accumulate(g.s2.begin(), g.s2.end(), total);
    count += g.s2.size();
  }
  const double mean_s2 = total / static_cast<double>(count);

  for (const std::string& id : order) {
    const Rows& g = groups.at(id);
    Individual ind;
    ind.id = id;
    const int n = static_cast<int>(g.t.size());
    ind.times = Eigen::Map<const Eigen::VectorXd>(g.t.data(), n);
    ind.responses = Eigen::Map<const Eigen::VectorXd>(g.y.data(), n);
    ind.variances = Eigen::Map<const Eigen::VectorXd>(g.s2.data(), n) / mean_s2;
    ind.time_varying = options.time_varying;
    const int rows = options.time_varying ? n : 1;
    ind.covariates.resize(rows, static_cast<Eigen::Index>(m));
    for (int r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < m; ++j) ind.covariates(r, static_cast<Eigen::Index>(j)) = g.u[static_cast<std::size_t>(r)][j];
    table.data.push_back(std::move(ind));
  }
  return table;
}

DataTable read_dataset_file(const std::string& path, const ReadOptions& options) {
  std::ifstream in = open_input(path);
  try {
    return read_dataset(in, options);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

void write_dataset(std::ostream& out, const DataTable& table) {
  out << "id,t,y,sigma";
  for (const auto& n : table.covariate_names) out << ',' << n;
  out << '\n';
  for (const Individual& ind : table.data)
    for (int p = 0; p < ind.size(); ++p) {
      out << ind.id << ',' << format_number(ind.times[p]) << ',' << format_number(ind.responses[p]) << ','
          << format_number(std::sqrt(ind.covariance_matrix()(p, p)));
      const Eigen::RowVectorXd u = ind.covariates_at(p);
      for (Eigen::Index j = 0; j < u.size(); ++j) out << ',' << format_number(u[j]);
      out << '\n';
    }
}

// ---------------------------------------------------------------------------

ModelConfig parse_config(std::istream& in) {
  ModelConfig cfg;
  std::string line, section;
  int lineno = 0;
  std::map<int, std::string> functions;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string ctx = line_context(lineno);
    const auto hash = line.find('#');
    const std::string text = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (text.empty()) continue;
    if (text.front() == '[' && text.back() == ']') {
      section = lower(trim(text.substr(1, text.size() - 2)));
      if (section != "selection" && section != "simulate") parse_fail(ctx + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = text.find('=');
    if (eq == std::string::npos) parse_fail(ctx + ": expected 'key = value'");
    const std::string key = lower(trim(text.substr(0, eq)));
    const std::string value = trim(text.substr(eq + 1));
    const std::string kctx = ctx + " (" + key + ")";
    auto unknown = [&]() { parse_fail(ctx + ": unknown key '" + key + "'" + (section.empty() ? "" : " in [" + section + "]")); };

    if (section.empty()) {
      if (key == "domain") {
        const auto d = parse_numbers(value, kctx);
        if (d.size() != 2 || !(d[0] < d[1])) parse_fail(kctx + ": domain must be [a, b] with a < b");
        cfg.domain = Interval{d[0], d[1]};
      } else if (key == "knots") {
        const std::string v = lower(value);
        if (v.rfind("quantile:", 0) == 0) {
          cfg.knots.kind = KnotSpec::Kind::Quantile;
          cfg.knots.count = parse_int(value.substr(9), kctx);
          if (cfg.knots.count < 0) parse_fail(kctx + ": knot count must be nonnegative");
        } else if (v == "typical") {
          cfg.knots.kind = KnotSpec::Kind::Typical;
        } else {
          cfg.knots.kind = KnotSpec::Kind::Explicit;
          cfg.knots.values = parse_numbers(v.rfind("explicit:", 0) == 0 ? value.substr(9) : value, kctx);
        }
      } else if (key == "order") {
        cfg.order = parse_int(value, kctx);
      } else if (key == "gamma") {
        cfg.gamma = parse_int(value, kctx);
        if (cfg.gamma != 2 && cfg.gamma != 3) parse_fail(kctx + ": gamma must be 2 or 3");
      } else if (key == "ends") {
        const std::string v = lower(value);
        if (v == "clamped") cfg.ends = EndCondition::Clamped;
        else if (v == "natural") cfg.ends = EndCondition::Natural;
        else parse_fail(kctx + ": expected clamped or natural");
      } else if (key == "response_transform") {
        const std::string v = lower(value);
        if (v != "none" && v != "log") parse_fail(kctx + ": expected none or log");
        cfg.log_response = v == "log";
      } else if (key == "time_varying") {
        cfg.time_varying = parse_bool(value, kctx);
      } else if (key == "g_terms") {
        cfg.g_terms = split_list(value);
      } else if (key == "h_terms") {
        cfg.h_terms = split_list(value);
      } else if (key == "sigma2") {
        const std::string v = lower(value);
        if (v == "estimate") {
          cfg.selection.sigma2.reset();
        } else if (v.rfind("known:", 0) == 0) {
          const double s = parse_number(value.substr(6), kctx);
          if (!(s > 0.0) || !std::isfinite(s)) parse_fail(kctx + ": known sigma^2 must be positive");
          cfg.selection.sigma2 = s;
        } else {
          parse_fail(kctx + ": expected known:<value> or estimate");
        }
      } else {
        unknown();
      }
    } else if (section == "selection") {
      SelectionConfig& s = cfg.selection;
      if (key == "method") {
        try {
          s.method = parse_method(lower(value));
        } catch (const std::invalid_argument& e) {
          parse_fail(kctx + ": " + e.what());
        }
      } else if (key == "q") {
        const std::string v = lower(value);
        if (v == "c") s.q = RiskWeight::Predictive;
        else if (v == "s_c") s.q = RiskWeight::Derivative;
        else parse_fail(kctx + ": expected C or S_c");
      } else if (key == "lambda_min") {
        s.grid.min = parse_number(value, kctx);
      } else if (key == "lambda_max") {
        s.grid.max = parse_number(value, kctx);
      } else if (key == "points_per_decade") {
        s.grid.per_decade = parse_int(value, kctx);
      } else if (key == "grid") {
        const auto g = parse_numbers(value, kctx, ':');
        if (g.size() != 3) parse_fail(kctx + ": expected min:max:points_per_decade");
        s.grid = {g[0], g[1], static_cast<int>(g[2])};
      } else if (key == "tie_lambdas") {
        s.tie_lambdas = parse_bool(value, kctx);
      } else if (key == "tol") {
        s.tol = parse_number(value, kctx);
      } else if (key == "max_iter") {
        s.max_iter = parse_int(value, kctx);
      } else if (key == "fallback") {
        const std::string v = lower(value);
        if (v == "gcv-grid") s.fallback = Fallback::GcvGrid;
        else if (v == "none") s.fallback = Fallback::None;
        else parse_fail(kctx + ": expected gcv-grid or none");
      } else if (key == "initial" || key == "lambdas") {
        const auto v = parse_numbers(value, kctx);
        (key == "initial" ? s.initial : s.fixed) = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
      } else {
        unknown();
      }
    } else {
      SimulateSpec& s = cfg.simulate;
      if (key == "individuals") {
        s.individuals = parse_int(value, kctx);
      } else if (key == "points") {
        const auto p = split_list(value, ':');
        s.min_points = parse_int(p.front(), kctx);
        s.max_points = p.size() > 1 ? parse_int(p[1], kctx) : s.min_points;
        if (p.size() > 2 || s.min_points < 1 || s.max_points < s.min_points)
          parse_fail(kctx + ": expected n or min:max with 1 <= min <= max");
      } else if (key == "jitter") {
        s.jitter = parse_number(value, kctx);
      } else if (key == "noise_sd") {
        s.noise_sd = parse_number(value, kctx);
      } else if (key == "sigma_edge") {
        s.sigma_edge = parse_number(value, kctx);
      } else if (key == "per_id_sd") {
        s.per_id_sd = parse_number(value, kctx);
      } else if (key == "beta") {
        s.beta = parse_numbers(value, kctx);
      } else if (key == "covariates") {
        s.covariates = split_list(value);
      } else if (key.size() > 1 && key[0] == 'f' && std::all_of(key.begin() + 1, key.end(), ::isdigit)) {
        functions[parse_int(key.substr(1), kctx)] = value;
      } else {
        unknown();
      }
    }
  }
  if (cfg.order < cfg.gamma + 1) parse_fail("order must exceed gamma");
  for (const auto& [l, v] : functions) {
    if (l != static_cast<int>(cfg.simulate.functions.size()))
      parse_fail("[simulate]: functions must be numbered f0, f1, ... without gaps");
    cfg.simulate.functions.push_back(v);
  }
  try {
    cfg.selection.grid.validate();
    if (!(cfg.selection.tol > 0.0)) throw std::invalid_argument("tol must be positive");
    if (cfg.selection.max_iter < 1) throw std::invalid_argument("max_iter must be at least 1");
  } catch (const std::invalid_argument& e) {
    parse_fail(std::string("[selection]: ") + e.what());
  }
  return cfg;
}

ModelConfig read_config_file(const std::string& path) {
  std::ifstream in = open_input(path);
  try {
    return parse_config(in);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

ModelSpec build_model(const ModelConfig& config, const DataTable& table) {
  const Dataset& data = table.data;
  Interval domain;
  if (config.domain) {
    domain = *config.domain;
  } else {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const Individual& ind : data) {
      if (ind.size() == 0) continue;
      lo = std::min(lo, ind.times.minCoeff());
      hi = std::max(hi, ind.times.maxCoeff());
    }
    if (!(lo < hi)) parse_fail("cannot infer the domain from the data; set domain = [a, b]");
    domain = {lo, hi};
  }
  std::vector<double> knots;
  try {
    switch (config.knots.kind) {
      case KnotSpec::Kind::Quantile: knots = quantile_knots(data, config.knots.count, domain); break;
      case KnotSpec::Kind::Typical: knots = typical_knots(data, domain); break;
      case KnotSpec::Kind::Explicit: knots = config.knots.values; break;
    }
  } catch (const std::invalid_argument& e) {
    parse_fail(std::string("knots: ") + e.what());
  }

  auto column = [&](const std::string& term, const std::string& what) {
    const auto colon = term.find(':');
    const std::string name = trim(term.substr(colon + 1));
    const int c = table.covariate_index(name);
    if (c < 0) parse_fail(what + ": unknown covariate column '" + name + "'");
    return std::make_pair(c, name);
  };
  std::vector<CovariateSpec> g;
  for (const std::string& term : config.g_terms) {
    const std::string t = lower(term);
    if (t == "per_id") {
      g.push_back({CovariateForm::PerId, -1, "id"});
      continue;
    }
    CovariateForm form;
    if (t.rfind("lin:", 0) == 0) form = CovariateForm::Linear;
    else if (t.rfind("quad:", 0) == 0) form = CovariateForm::Quadratic;
    else if (t.rfind("log:", 0) == 0) form = CovariateForm::Log;
    else parse_fail("g_terms: unknown term '" + term + "' (expected lin:, quad:, log:<column> or per_id)");
    const auto [c, name] = column(term, "g_terms");
    g.push_back({form, c, name});
  }
  std::vector<ParametricSpec> h;
  for (const std::string& term : config.h_terms) {
    const std::string t = lower(term);
    if (t == "intercept") {
      h.push_back({ParametricForm::Intercept, -1, "intercept"});
    } else if (t == "per_id_intercept") {
      h.push_back({ParametricForm::PerIdIntercept, -1, "intercept"});
    } else if (t.rfind("lin:", 0) == 0) {
      const auto [c, name] = column(term, "h_terms");
      h.push_back({ParametricForm::Linear, c, name});
    } else {
      parse_fail("h_terms: unknown term '" + term + "' (expected intercept, per_id_intercept or lin:<column>)");
    }
  }
  try {
    return {make_basis(knots, domain, config.order, config.ends), CovariateBasis(g), ParametricBasis(h)};
  } catch (const std::invalid_argument& e) {
    parse_fail(std::string("spline basis: ") + e.what());
  }
}

DataTable transformed(DataTable table, const ModelConfig& config) {
  if (!config.log_response) return table;
  for (Individual& ind : table.data) {
    if ((ind.responses.array() <= 0.0).any())
      parse_fail("response_transform = log needs positive responses (id '" + ind.id + "')");
    ind.responses = ind.responses.array().log();
  }
  return table;
}

// ---------------------------------------------------------------------------

void write_coefficients(std::ostream& out, const ModelLayout& layout, const Eigen::VectorXd& coef) {
  const std::vector<std::string> labels = layout.coef_labels();
  const Eigen::MatrixXd alpha = layout.alpha_matrix(coef);
  const Eigen::VectorXd beta = layout.beta_full(coef);
  out << "kind,k,l,label,value\n";
  for (int k = 0; k < layout.n_basis(); ++k)
    for (int l = 0; l < layout.n_functions(); ++l)
      out << "alpha," << k << ',' << l << ",\"" << labels[static_cast<std::size_t>(layout.coef_index(k, l))]
          << "\"," << format_number(alpha(k, l)) << '\n';
  for (int j = 0; j < layout.n_beta_full(); ++j)
    out << "beta," << j << ",,\"" << layout.parametric.terms()[static_cast<std::size_t>(j)].label << "\","
        << format_number(beta[j]) << '\n';
}

CoefficientTable read_coefficients(std::istream& in) {
  std::string line;
  int lineno = 0;
  std::vector<std::tuple<int, int, double>> a;
  std::vector<std::pair<int, double>> b;
  int kmax = -1, lmax = -1, jmax = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || trim(line).empty()) continue;
    const auto f = split_csv_line(line);
    const std::string ctx = line_context(lineno);
    if (f.size() != 5) parse_fail(ctx + ": expected 5 fields in the coefficient table");
    if (f[0] == "alpha") {
      const int k = parse_int(f[1], ctx), l = parse_int(f[2], ctx);
      a.emplace_back(k, l, parse_number(f[4], ctx));
      kmax = std::max(kmax, k);
      lmax = std::max(lmax, l);
    } else if (f[0] == "beta") {
      const int j = parse_int(f[1], ctx);
      b.emplace_back(j, parse_number(f[4], ctx));
      jmax = std::max(jmax, j);
    } else {
      parse_fail(ctx + ": unknown coefficient kind '" + f[0] + "'");
    }
  }
  CoefficientTable t{Eigen::MatrixXd::Zero(kmax + 1, lmax + 1), Eigen::VectorXd::Zero(jmax + 1)};
  for (const auto& [k, l, v] : a) t.alpha(k, l) = v;
  for (const auto& [j, v] : b) t.beta[j] = v;
  return t;
}

void write_summary(std::ostream& out, const AssembledSystem& sys, const FitResult& fit) {
  auto vec = [](const Eigen::VectorXd& v) {
    std::string s;
    for (Eigen::Index i = 0; i < v.size(); ++i) s += (i ? ", " : "") + format_number(v[i]);
    return s;
  };
  out << "method: " << fit.method << '\n';
  out << "converged: " << (fit.converged ? "true" : "false") << '\n';
  out << "iterations: " << fit.iterations << '\n';
  out << "lambda: " << vec(fit.lambdas) << '\n';
  out << "lambda_standardized: " << vec(fit.lambdas.cwiseQuotient(sys.lambda_scale)) << '\n';
  out << "sigma2: " << format_number(fit.sigma2) << '\n';
  out << "sigma2_source: " << (fit.sigma2_estimated ? "estimated" : "known") << '\n';
  out << "trace_A: " << format_number(fit.trace_A) << '\n';
  out << "gcv: " << format_number(fit.gcv) << '\n';
  out << "rss: " << format_number(fit.rss) << '\n';
  if (fit.risk_hat) out << "risk_hat: " << format_number(*fit.risk_hat) << '\n';
  out << "n_obs: " << sys.n_obs << '\n';
  out << "n_individuals: " << sys.layout.ids.size() << '\n';
  out << "n_basis: " << sys.layout.n_basis() << '\n';
  out << "n_functions: " << sys.n_functions() << '\n';
  out << "n_coef: " << sys.n_coef() << '\n';
  out << "storage: " << (sys.banded() ? "banded" : "dense") << '\n';
  for (const std::string& n : fit.notes) out << "note: " << n << '\n';
}

// ---------------------------------------------------------------------------

namespace {

json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

Eigen::MatrixXd json_matrix(const json& j, Eigen::Index cols_if_empty = 0) {
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows ? static_cast<Eigen::Index>(j[0].size()) : cols_if_empty;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j[static_cast<std::size_t>(r)].size()) != cols) parse_fail("model: ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

Eigen::VectorXd json_vector(const json& j) {
  std::vector<double> v = j.get<std::vector<double>>();
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

const char* covariate_form_name(CovariateForm f) {
  switch (f) {
    case CovariateForm::Linear: return "lin";
    case CovariateForm::Quadratic: return "quad";
    case CovariateForm::Log: return "log";
    case CovariateForm::PerId: return "per_id";
  }
  return "?";
}

CovariateForm covariate_form(const std::string& s) {
  for (CovariateForm f : {CovariateForm::Linear, CovariateForm::Quadratic, CovariateForm::Log, CovariateForm::PerId})
    if (s == covariate_form_name(f)) return f;
  parse_fail("model: unknown covariate form '" + s + "'");
}

const char* parametric_form_name(ParametricForm f) {
  switch (f) {
    case ParametricForm::Intercept: return "intercept";
    case ParametricForm::PerIdIntercept: return "per_id_intercept";
    case ParametricForm::Linear: return "lin";
  }
  return "?";
}

ParametricForm parametric_form(const std::string& s) {
  for (ParametricForm f : {ParametricForm::Intercept, ParametricForm::PerIdIntercept, ParametricForm::Linear})
    if (s == parametric_form_name(f)) return f;
  parse_fail("model: unknown parametric form '" + s + "'");
}

}  // namespace

void write_model(std::ostream& out, const SavedModel& model) {
  const ModelLayout& lay = model.layout;
  json j;
  j["format"] = "covgrow-model";
  j["version"] = 1;
  j["basis"] = {{"domain", {lay.basis.domain().lo, lay.basis.domain().hi}},
                {"order", lay.basis.order()},
                {"ends", lay.basis.ends() == EndCondition::Natural ? "natural" : "clamped"},
                {"interior_knots", lay.basis.interior_knots()}};
  j["gamma"] = model.gamma;
  json cs = json::array(), ct = json::array();
  for (const auto& s : lay.covariates.specs())
    cs.push_back({{"form", covariate_form_name(s.form)}, {"column", s.column}, {"name", s.name}});
  for (const auto& t : lay.covariates.terms())
    ct.push_back({{"form", covariate_form_name(t.form)}, {"column", t.column}, {"individual", t.individual},
                  {"center", t.center}, {"offset", t.offset}, {"label", t.label}});
  j["covariates"] = {{"specs", cs}, {"terms", ct}};
  json ps = json::array(), pt = json::array();
  for (const auto& s : lay.parametric.specs())
    ps.push_back({{"form", parametric_form_name(s.form)}, {"column", s.column}, {"name", s.name}});
  for (const auto& t : lay.parametric.terms())
    pt.push_back({{"form", parametric_form_name(t.form)}, {"column", t.column}, {"individual", t.individual},
                  {"center", t.center}, {"label", t.label}});
  j["parametric"] = {{"specs", ps}, {"terms", pt}};
  j["ids"] = lay.ids;
  j["beta_map"] = matrix_json(lay.beta_map);
  j["coef"] = std::vector<double>(model.coef.begin(), model.coef.end());
  j["band_covariance"] = matrix_json(model.band_covariance);
  j["lambdas"] = std::vector<double>(model.lambdas.begin(), model.lambdas.end());
  j["sigma2"] = model.sigma2;
  j["log_response"] = model.log_response;
  j["covariate_names"] = model.covariate_names;
  out << j.dump(1) << '\n';
}

SavedModel read_model(std::istream& in) {
  json j;
  try {
    in >> j;
    if (j.at("format") != "covgrow-model") parse_fail("model: not a covgrow model file");
    const json& b = j.at("basis");
    const auto dom = b.at("domain").get<std::vector<double>>();
    if (dom.size() != 2) parse_fail("model: bad domain");
    const auto interior = b.at("interior_knots").get<std::vector<double>>();
    SplineBasis basis = make_basis(interior, Interval{dom[0], dom[1]}, b.at("order").get<int>(),
                                   b.at("ends") == "natural" ? EndCondition::Natural : EndCondition::Clamped);
    std::vector<CovariateSpec> cs;
    std::vector<CovariateTerm> ct;
    for (const json& s : j.at("covariates").at("specs"))
      cs.push_back({covariate_form(s.at("form")), s.at("column"), s.at("name")});
    for (const json& t : j.at("covariates").at("terms"))
      ct.push_back({covariate_form(t.at("form")), t.at("column"), t.at("individual"), t.at("center"),
                    t.at("offset"), t.at("label")});
    std::vector<ParametricSpec> ps;
    std::vector<ParametricTerm> pt;
    for (const json& s : j.at("parametric").at("specs"))
      ps.push_back({parametric_form(s.at("form")), s.at("column"), s.at("name")});
    for (const json& t : j.at("parametric").at("terms"))
      pt.push_back({parametric_form(t.at("form")), t.at("column"), t.at("individual"), t.at("center"), t.at("label")});
    const Eigen::Index n_full = static_cast<Eigen::Index>(pt.size());
    ModelLayout lay{std::move(basis), CovariateBasis::from_terms(cs, ct), ParametricBasis::from_terms(ps, pt),
                    j.at("ids").get<std::vector<std::string>>(), Eigen::MatrixXd()};
    lay.beta_map = json_matrix(j.at("beta_map"));
    if (lay.beta_map.rows() == 0) lay.beta_map.resize(n_full, 0);
    if (lay.beta_map.rows() != n_full) parse_fail("model: beta_map does not match the parametric terms");
    SavedModel m{std::move(lay), json_vector(j.at("coef")), json_matrix(j.at("band_covariance")),
                 json_vector(j.at("lambdas")), j.at("sigma2").get<double>(), j.at("log_response").get<bool>(),
                 j.at("gamma").get<int>(), j.at("covariate_names").get<std::vector<std::string>>()};
    if (m.coef.size() != m.layout.n_coef() || m.band_covariance.rows() != m.coef.size() ||
        m.band_covariance.cols() != m.coef.size())
      parse_fail("model: coefficient sizes are inconsistent");
    return m;
  } catch (const json::exception& e) {
    parse_fail(std::string("model: ") + e.what());
  } catch (const std::invalid_argument& e) {
    parse_fail(std::string("model: ") + e.what());
  }
}

Eigen::RowVectorXd covariates_at_time(const Individual& ind, double t) {
  if (!ind.time_varying || ind.covariates.rows() == 1) return ind.covariates.row(0);
  std::vector<int> idx(static_cast<std::size_t>(ind.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) { return ind.times[a] < ind.times[b]; });
  if (t <= ind.times[idx.front()]) return ind.covariates.row(idx.front());
  if (t >= ind.times[idx.back()]) return ind.covariates.row(idx.back());
  for (std::size_t q = 1; q < idx.size(); ++q) {
    const double t0 = ind.times[idx[q - 1]], t1 = ind.times[idx[q]];
    if (t <= t1) {
      const double w = t1 > t0 ? (t - t0) / (t1 - t0) : 1.0;
      return (1.0 - w) * ind.covariates.row(idx[q - 1]) + w * ind.covariates.row(idx[q]);
    }
  }
  return ind.covariates.row(idx.back());
}

}  // namespace covgrow
