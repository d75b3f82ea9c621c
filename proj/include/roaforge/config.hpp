#pragma once

#include "roaforge/trainer.hpp"

#include <map>
#include <string>

namespace roaforge::config {

struct EvalConfig {
  int boundary_samples = 0;  // 0: plant default (20 pendulum, 10 others)
  double stay_slack = 1e-3;  // V <= c + slack counts as staying inside
};

struct VerifyConfig {
  double zeta = 0.3;
  double resolution = 0.0;   // 0: mesh tau / 2
  double precision = 1e-3;   // recorded in the SMT export header
  int max_phi_width = 16;
};

/// Whole-run configuration backing the CLI; JSON schema version 1.
struct RunConfig {
  int schema = 1;
  std::string system;
  std::map<std::string, double> system_params;
  std::map<std::string, double> perturbation;  // applied to the true plant at eval
  trainer::TrainConfig train;
  EvalConfig eval;
  VerifyConfig verify;
};

/// Published hyperparameters for a benchmark system (lambda_roa, lambda_lip,
/// eta0, k_eta, a, b, mesh at paper scale).
RunConfig default_config(const std::string& system);

/// Parses and validates; unknown keys anywhere are an error.
RunConfig load_config(const std::string& path);
RunConfig parse_config(const std::string& json_text);

/// Default boundary sample count for the plant (20 pendulum, 10 others).
int default_boundary_samples(const std::string& system);

}  // namespace roaforge::config
