#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include <Eigen/Dense>

#include "covgrow/io.hpp"

namespace covgrow {

/// A simulated dataset and the coefficients that generated it.
struct Simulation {
  DataTable table;
  ModelLayout layout;   // prepared on the simulated design
  Eigen::VectorXd coef; // identified (reduced) coordinates
};

/// Draws a dataset from the [simulate] section of `config`: times on a
/// jittered uniform grid, covariates uniform per individual, functions given
/// as named shapes projected onto the spline basis or as coefficient lists,
/// Gaussian noise with sd noise_sd * (1 + sigma_edge (2x - 1)^2).
/// Deterministic given the seed. Throws ParseError for an invalid truth.
Simulation simulate(const ModelConfig& config, std::uint64_t seed);

/// Values of a named shape ("sine", "bump:2", ...) at x in [0, 1].
double shape_value(const std::string& shape, double x);

/// Fit pipeline shared by the CLI, the tests and the acceptance run.
struct FittedModel {
  DataTable table;  // after the response transform
  AssembledSystem sys;
  FitResult fit;
};
FittedModel fit_dataset(const ModelConfig& config, const DataTable& raw);

/// `covgrow fit|predict|simulate|gcv-scan`. Returns the process exit code:
/// 0 success, 2 parse or input error, 3 singular or unidentifiable model,
/// 4 selection failure without fallback, 1 anything else.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace covgrow
