#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "covgrow/design.hpp"
#include "covgrow/selection.hpp"
#include "covgrow/solver.hpp"

namespace covgrow {

// ---------------------------------------------------------------------------
// Numbers and CSV

/// Locale-independent shortest round-trip (or 17 significant digit) text.
std::string format_number(double v);
/// Strict, locale-independent parse of a whole field. Throws ParseError.
double parse_number(const std::string& field, const std::string& context);

std::vector<std::string> split_csv_line(const std::string& line);

// ---------------------------------------------------------------------------
// Dataset files: header `id,t,y[,sigma],u1,...,uM`

struct DataTable {
  Dataset data;
  std::vector<std::string> covariate_names;
  bool has_response = true;
  bool has_sigma = false;

  /// Column index of a covariate, or -1.
  int covariate_index(const std::string& name) const;
};

struct ReadOptions {
  bool time_varying = false;   // covariates may change within an id
  bool require_response = true;
};

/// Rows are grouped by id in order of first appearance. The sigma column
/// enters Sigma_i as diag(sigma^2), normalized over the whole file to unit
/// mean. Throws ParseError with the line number on malformed input.
DataTable read_dataset(std::istream& in, const ReadOptions& options = {});
DataTable read_dataset_file(const std::string& path, const ReadOptions& options = {});
void write_dataset(std::ostream& out, const DataTable& table);

// ---------------------------------------------------------------------------
// Model configuration: `key = value` lines, `#` comments, optional
// [selection] and [simulate] sections.

struct KnotSpec {
  enum class Kind { Quantile, Typical, Explicit } kind = Kind::Quantile;
  int count = 10;
  std::vector<double> values;
};

struct SimulateSpec {
  int individuals = 40;
  int min_points = 61;
  int max_points = 61;
  double jitter = 0.0;      // time jitter as a fraction of the grid step
  double noise_sd = 0.0;    // sigma
  double sigma_edge = 0.0;  // sigma column 1 + edge (2x - 1)^2
  double per_id_sd = 0.0;   // spread of true per-id intercepts
  std::vector<double> beta; // other parametric terms, in h_terms order
  /// One entry per function: a named shape or "coef:<list>".
  std::vector<std::string> functions;
  /// One entry per covariate column: "name:lo:hi" drawn uniformly.
  std::vector<std::string> covariates;
};

struct ModelConfig {
  std::optional<Interval> domain;
  KnotSpec knots;
  int order = 4;
  int gamma = 3;
  EndCondition ends = EndCondition::Clamped;
  bool log_response = false;
  bool time_varying = false;
  std::vector<std::string> g_terms;
  std::vector<std::string> h_terms;
  SelectionConfig selection;
  SimulateSpec simulate;
};

ModelConfig parse_config(std::istream& in);
ModelConfig read_config_file(const std::string& path);

/// Model ingredients resolved against the dataset columns.
struct ModelSpec {
  SplineBasis basis;
  CovariateBasis covariates;
  ParametricBasis parametric;
};

ModelSpec build_model(const ModelConfig& config, const DataTable& table);

/// Applies the response transform (log requires positive responses).
DataTable transformed(DataTable table, const ModelConfig& config);

// ---------------------------------------------------------------------------
// Outputs

/// Coefficient table: `kind,k,l,label,value` with kind alpha (k, l) or beta
/// (k = j, l empty). Parametric values are full coordinates.
void write_coefficients(std::ostream& out, const ModelLayout& layout, const Eigen::VectorXd& coef);

struct CoefficientTable {
  Eigen::MatrixXd alpha;
  Eigen::VectorXd beta;
};
CoefficientTable read_coefficients(std::istream& in);

void write_summary(std::ostream& out, const AssembledSystem& sys, const FitResult& fit);

/// Everything needed to predict from a fitted model.
struct SavedModel {
  ModelLayout layout;
  Eigen::VectorXd coef;
  Eigen::MatrixXd band_covariance;
  Eigen::VectorXd lambdas;
  double sigma2 = 0.0;
  bool log_response = false;
  int gamma = 3;
  std::vector<std::string> covariate_names;
};

void write_model(std::ostream& out, const SavedModel& model);
SavedModel read_model(std::istream& in);

/// Covariates of an individual at time t: the fixed row, or linear
/// interpolation between measurement times (constant beyond the ends).
Eigen::RowVectorXd covariates_at_time(const Individual& ind, double t);

}  // namespace covgrow
