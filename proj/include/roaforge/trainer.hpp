#pragma once

#include "roaforge/common.hpp"
#include "roaforge/dynamics.hpp"
#include "roaforge/lqr.hpp"
#include "roaforge/lyapnet.hpp"
#include "roaforge/netcore.hpp"
#include "roaforge/roa.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace roaforge::trainer {

struct TrainConfig {
  // Loss and level-set hyperparameters.
  double lambda_roa = 1000.0;
  double lambda_lip = 0.1;
  double eta0 = 5.0;
  std::optional<int> k_eta = 15;  // absent: eta fixed at 1 + eta0
  double a = -2.0;
  double b = 2.0;
  double gamma = 1e-6;
  double kappa = 0.1;
  double epsilon = 0.01;

  int iterations = 100;
  std::uint64_t seed = 0;
  std::vector<int> mesh_dims;

  // Rollouts and stability labeling.
  double dt = 0.01;
  double horizon = 20.0;
  double r_conv = 0.1;
  int settle_window = 50;
  double escape_factor = 3.0;
  int pair_stride = 5;
  int max_pairs_per_traj = 100;
  int max_pairs_per_iteration = 50000;

  // SGD.
  int batch_size = 256;
  double lr_lyapunov = 1e-3;
  double lr_controller = 1e-3;
  double lr_dynamics = 1e-3;
  int steplr_step = 40;
  double steplr_decay = 0.5;
  int epochs_lyapunov = 10;
  int epochs_dynamics = 10;
  double grad_clip = 0.0;  // global-norm clip; 0 disables

  // Pretraining.
  double pretrain_lr = 1e-2;
  int pretrain_epoch_cap = 500;
  double pretrain_mse_target = 1e-4;
  double pretrain_v0_coeff = 0.1;  // target V0 = coeff * x^T x

  // Network widths.
  std::vector<int> phi_hidden{64, 64, 64};
  std::vector<int> psi_hidden{16, 16, 16};
  std::vector<int> res_hidden{16, 16, 16};

  // Plumbing.
  unsigned threads = 0;
  int dump_mesh_every = 0;        // 0 = never
  int checkpoint_every = 10;      // also written at the end
  std::string out_dir;            // empty = no file output

  void validate() const;
};

struct IterationLog {
  int iteration = 0;
  double c = 0.0;
  double eta = 0.0;
  double ratio_true = 0.0;
  double ratio_fi = 0.0;
  double ratio_estimated = 0.0;
  double loss_lyapunov = 0.0;
  double loss_dynamics = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
};

struct TrainedModel {
  lyapnet::LyapunovNet lyap;
  lyapnet::ControllerNet ctrl;
  lyapnet::ResidualDynamics res;
  netcore::ParamStore params;
  lqr::LqrSolution lqr_sol;
};

struct TrainResult {
  TrainedModel model;
  std::vector<IterationLog> logs;
  roa::RoaReport final_report;   // labels and level under the final parameters
  roa::Mesh final_mesh;
};

/// Alg. line 5 schedule: eta_i = 1 + eta0 / (1 + floor(i / k_eta)); a missing
/// k_eta keeps eta fixed at 1 + eta0.
double eta_schedule(int i, double eta0, std::optional<int> k_eta);

/// Initial locally stabilizing controller: the LQR law through the loose
/// saturation at zero slopes, i.e. clamp(-K x, a, b).
dynamics::Controller clamped_lqr_controller(const Mat& k_gain, double a, double b);

/// Raised when an iteration produces a non-finite loss; the last checkpoint
/// has been restored into the result at throw time.
struct TrainAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Builds nets for `spec` under `cfg` and seeds all parameter groups.
TrainedModel make_model(const TrainConfig& cfg, const dynamics::SystemSpec& spec);

/// Rebuilds the architecture for cfg/spec and adopts checkpoint parameters;
/// every architecture parameter must be present with a matching shape.
TrainedModel load_model(const TrainConfig& cfg, const dynamics::SystemSpec& spec,
                        const netcore::ParamStore& params);

/// Fits V to the quadratic pretraining target over the mesh, then fits the
/// residual derivative estimate on rollouts from the initial stable set.
void pretrain(TrainedModel& model, const TrainConfig& cfg, const dynamics::SystemSpec& spec,
              roa::Mesh& mesh, const std::vector<int>& x0_indices,
              const std::vector<dynamics::ClassifyResult::Pair>& x0_pairs);

/// Full Algorithm-1 run: pretraining plus `iterations` refinement passes.
TrainResult train(const TrainConfig& cfg, const dynamics::SystemSpec& spec);

/// Writes one metrics row (9 columns: iter,c,eta,ratio_true,ratio_fi,
/// ratio_est,loss_lyap,loss_dyn,lr).
std::string metrics_header();
std::string metrics_row(const IterationLog& log);

}  // namespace roaforge::trainer
