#pragma once

#include "roaforge/common.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace roaforge::dynamics {

enum class Field { true_plant, nominal };

enum class ResidualGShape { scalar, masked_net };

/// One benchmark plant: true and nominal vector fields, state box, and the
/// shape of the residual corrections layered on the nominal model.
struct SystemSpec {
  std::string name;
  int n = 0;
  int m = 0;
  std::map<std::string, double> params;  // resolved plant constants
  std::function<Vec(const Vec&)> true_f;
  std::function<Mat(const Vec&)> true_g;
  std::function<Vec(const Vec&)> nominal_f0;
  std::function<Mat(const Vec&)> nominal_g0;
  std::vector<std::pair<double, double>> state_box;  // per-dimension [lo, hi]
  std::vector<int> residual_f_mask;   // state-derivative rows the f-residual writes
  ResidualGShape residual_g_shape = ResidualGShape::scalar;
  std::vector<int> residual_g_mask;   // rows for scalar add or masked net output
  Vec equilibrium_input;

  bool inside_box(const Vec& x) const;
  Vec box_center_halfwidth(int dim) const;  // (center, halfwidth)
  double box_diagonal() const;
};

/// Plant constants; missing entries take the published benchmark values.
SystemSpec make_system(const std::string& name, const std::map<std::string, double>& params = {});

Vec eval_field(const SystemSpec& spec, Field which, const Vec& x, const Vec& u);

struct Trajectory {
  double t0 = 0.0;
  double dt = 0.0;
  std::vector<Vec> states;   // states.size() == inputs.size() + 1
  std::vector<Vec> inputs;
  bool left_box = false;
  bool converged = false;
};

using Controller = std::function<Vec(const Vec&)>;

struct RolloutOptions {
  double dt = 0.01;
  double horizon = 20.0;
  double r_conv = 0.1;
  int settle_window = 50;
  /// Default: rollouts end when the state exits the box. Classification
  /// instead keeps integrating (a trajectory may leave the box and still
  /// converge) until the escape radius is crossed.
  bool stop_on_box_exit = true;
  double escape_factor = 10.0;  // escape radius = factor * box diagonal
};

Trajectory rk4_rollout(const SystemSpec& spec, Field which, const Controller& controller,
                       const Vec& x0, const RolloutOptions& opts);

Trajectory rk4_rollout(const SystemSpec& spec, Field which, const Controller& controller,
                       const Vec& x0, double dt, double horizon);

/// Single RK4 step of the closed loop (controller sampled at each stage).
Vec rk4_step(const SystemSpec& spec, Field which, const Controller& controller, const Vec& x,
             double dt);

enum class StabilityLabel { unstable, stable, fi_stable };

inline bool is_stable(StabilityLabel l) { return l != StabilityLabel::unstable; }

struct ClassifyResult {
  std::vector<StabilityLabel> labels;
  /// Supervision pairs harvested from the same rollouts: consecutive states
  /// (x_k, x_{k+1}) subsampled along each trajectory, tagged by the index of
  /// the mesh point the trajectory started from. Only in-box pairs are kept.
  struct Pair {
    int origin_index;
    Vec x;
    Vec x_next;
  };
  std::vector<Pair> pairs;
};

struct ClassifyOptions {
  RolloutOptions rollout;
  int pair_stride = 5;       // keep every k-th step as a supervision pair
  int max_pairs_per_traj = 100;
  bool collect_pairs = false;
  unsigned threads = 0;
};

/// Labels every start state: stable (converges), fi_stable (converges and
/// never leaves the box), unstable otherwise. Deterministic: results merged
/// in index order.
ClassifyResult classify_stable(const SystemSpec& spec, const Controller& controller,
                               const std::vector<Vec>& starts, const ClassifyOptions& opts);

/// CSV trajectory dump: t, x1..xn, u1..um.
void write_trajectory_csv(const std::string& path, const Trajectory& traj);

}  // namespace roaforge::dynamics
