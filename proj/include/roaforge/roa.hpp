#pragma once

#include "roaforge/common.hpp"
#include "roaforge/dynamics.hpp"
#include "roaforge/lyapnet.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace roaforge::roa {

/// Uniform inclusive grid over the state box, lexicographic by grid index
/// (first dimension slowest).
struct Mesh {
  std::vector<int> dims;
  std::vector<Vec> points;
  double tau = 0.0;  // max spacing over dimensions
  std::vector<dynamics::StabilityLabel> labels;
  Eigen::RowVectorXd v_values;
  Eigen::RowVectorXd vdot_values;
  std::vector<bool> boundary_face;  // point touches a box face

  std::size_t size() const { return points.size(); }
  Mat points_matrix() const;
};

Mesh build_mesh(const dynamics::SystemSpec& spec, const std::vector<int>& points_per_dim);

struct RoaReport {
  double c = 0.0;
  double ratio_true = 0.0;
  double ratio_fi = 0.0;
  double ratio_estimated = 0.0;
  int iteration = 0;
  bool certified = false;
};

/// Fills v_values and vdot_values from the current networks (batched).
void populate_values(Mesh& mesh, const lyapnet::LyapunovEval& lyap,
                     const lyapnet::ControllerEval& ctrl, const lyapnet::ResidualEval& res,
                     const dynamics::SystemSpec& spec);

/// Same, with the quadratic V = x^T P x (analytic gradient 2 P x).
void populate_values_quadratic(Mesh& mesh, const Mat& P, const lyapnet::ControllerEval& ctrl,
                               const lyapnet::ResidualEval& res,
                               const dynamics::SystemSpec& spec);

/// Largest level c such that every mesh point of V(c) is stable-labeled and
/// satisfies vdot <= -kappa |x|^2, and c stays below the smallest boundary-face
/// V. Returned as (1 - 1e-9) * that supremum; 0 when no positive level exists.
RoaReport level_search(const Mesh& mesh, double kappa);

/// Mesh-count ratios for a given level (percent).
RoaReport roa_ratios(const Mesh& mesh, double c);

struct IssCertificate {
  double l_v = 0.0;               // sampled max |grad V| over Omega
  double d_max = 0.0;             // sampled max disturbance norm over Omega
  double boundary_min_norm = 0.0; // min |x| over sampled boundary
  double alpha_q_gain = 0.0;      // kappa / 2
  double margin = 0.0;            // boundary_min_norm - sqrt(2 L_V d_max / kappa)
  bool holds = false;
  int interior_samples = 0;
  int boundary_samples = 0;
  int boundary_requested = 0;
};

/// Samples Omega = V(c) (rejection) and its boundary (rays from the origin,
/// bisection to V = c within 1e-6); disturbance is the true-vs-estimated
/// field mismatch under the current controller.
IssCertificate iss_margin(const lyapnet::LyapunovEval& lyap, const lyapnet::ControllerEval& ctrl,
                          const lyapnet::ResidualEval& res, const dynamics::SystemSpec& spec,
                          double c, int samples, double kappa, std::uint64_t seed);

struct ViolationBound {
  double delta_prime = 0.0;
  bool bounded = false;
};

/// delta' = max over mesh points inside V(c) of [vdot + kappa |x|^2], floored
/// at zero; bounded checks min boundary |x| >= sqrt(2 (delta + delta') / kappa)
/// with delta = L_V d_max from the certificate.
ViolationBound violation_bound(const Mesh& mesh, double c, double kappa,
                               const IssCertificate& cert);

/// Samples points on the V = c surface (rays + bisection). May return fewer
/// than requested when rays exit the box first.
std::vector<Vec> sample_level_boundary(const lyapnet::LyapunovEval& lyap,
                                       const dynamics::SystemSpec& spec, double c, int count,
                                       std::uint64_t seed);

struct BoundaryCheck {
  int total = 0;
  int stayed = 0;      // V stayed below c + slack along the whole rollout
  int converged = 0;
  std::vector<Vec> starts;
  std::vector<dynamics::Trajectory> trajectories;
};

/// Rolls the true plant out from sampled V = c boundary points and checks
/// forward invariance of the sublevel set plus convergence. The rollout spec
/// may carry perturbed plant parameters.
BoundaryCheck boundary_rollouts(const lyapnet::LyapunovEval& lyap,
                                const dynamics::SystemSpec& rollout_spec,
                                const dynamics::Controller& ctrl, double c, int count,
                                double slack, const dynamics::RolloutOptions& opts,
                                std::uint64_t seed);

/// CSV dump x1..xn, V, Vdot_hat, label for external plotting.
void write_mesh_csv(const std::string& path, const Mesh& mesh);

}  // namespace roaforge::roa
