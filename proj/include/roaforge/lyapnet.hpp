#pragma once

#include "roaforge/common.hpp"
#include "roaforge/dynamics.hpp"
#include "roaforge/netcore.hpp"

#include <optional>
#include <string>
#include <vector>

namespace roaforge::lyapnet {

// Parameter name prefixes; the four trainable groups share one store.
inline constexpr const char* kLyapPrefix = "lyap";      // theta_3
inline constexpr const char* kCtrlPrefix = "ctrl";      // theta_4
inline constexpr const char* kResFPrefix = "res.f";     // theta_1
inline constexpr const char* kResGPrefix = "res.g";     // theta_2

// ---------------------------------------------------------------------------
// Network bundles
// ---------------------------------------------------------------------------

/// V(x) = x^T (M M^T + gamma I) x + phi(x)^T phi(x); M lower triangular with
/// trainable diagonal, phi a constrained positive-definite-block net.
struct LyapunovNet {
  int n = 0;
  double gamma = 1e-6;
  std::optional<netcore::DenseNetSpec> phi;  // absent means the phi term is zero

  static LyapunovNet make(int n, double gamma, std::vector<int> phi_hidden = {64, 64, 64});
  void init(netcore::ParamStore& store, std::uint64_t seed) const;
  /// Lower-triangular M from its packed parameter vector.
  Mat unpack_m(const netcore::ParamStore& store) const;
};

/// u(x) = LS_{a,b,m_a,m_b}(u0(x) + psi(x)); u0 fixed (LQR), psi and the
/// out-of-band slopes trainable.
struct ControllerNet {
  int n = 0;
  int m = 1;
  double a = -2.0;
  double b = 2.0;
  Mat k_gain;  // u0(x) = -K x
  netcore::DenseNetSpec psi;

  static ControllerNet make(int n, double a, double b, Mat k_gain,
                            std::vector<int> psi_hidden = {16, 16, 16});
  void init(netcore::ParamStore& store, std::uint64_t seed) const;
};

/// fhat = f0 + scatter(f_net), ghat = g0 + residual (trainable scalar on the
/// actuated rows, or a masked net for the cart-pole).
struct ResidualDynamics {
  int n = 0;
  std::vector<int> f_mask;
  netcore::DenseNetSpec f_net;
  dynamics::ResidualGShape g_shape = dynamics::ResidualGShape::scalar;
  std::vector<int> g_mask;
  std::optional<netcore::DenseNetSpec> g_net;  // masked_net only

  static ResidualDynamics make(const dynamics::SystemSpec& spec,
                               std::vector<int> hidden = {16, 16, 16});
  void init(netcore::ParamStore& store, std::uint64_t seed) const;
};

/// Loose saturation: identity on [a, b], slope m_a below a, slope m_b above b.
double loose_saturation(double y, double a, double b, double m_a, double m_b);

// ---------------------------------------------------------------------------
// Fast (tape-free) evaluators; rebuilt per parameter snapshot.
// ---------------------------------------------------------------------------

class LyapunovEval {
 public:
  LyapunovEval(const LyapunovNet& net, const netcore::ParamStore& store);
  double value(const Vec& x) const;
  Vec grad(const Vec& x) const;
  Eigen::RowVectorXd value_batch(const Mat& X) const;
  Mat grad_batch(const Mat& X) const;
  const Mat& quad_matrix() const { return A_; }

 private:
  Mat A_;  // M M^T + gamma I
  bool has_phi_ = false;
  netcore::DenseNetEval phi_;
};

class ControllerEval {
 public:
  ControllerEval(const ControllerNet& net, const netcore::ParamStore& store);
  Vec operator()(const Vec& x) const;
  Eigen::RowVectorXd eval_batch(const Mat& X) const;
  double slope_a() const { return m_a_; }
  double slope_b() const { return m_b_; }

 private:
  Mat k_gain_;
  double a_, b_, m_a_, m_b_;
  netcore::DenseNetEval psi_;
};

class ResidualEval {
 public:
  ResidualEval(const ResidualDynamics& res, const netcore::ParamStore& store);
  /// fhat(x) = f0(x) + masked residual.
  Vec f_hat(const dynamics::SystemSpec& spec, const Vec& x) const;
  /// ghat(x) column (m = 1 plants).
  Vec g_hat(const dynamics::SystemSpec& spec, const Vec& x) const;
  Mat f_hat_batch(const dynamics::SystemSpec& spec, const Mat& X) const;
  Mat g_hat_batch(const dynamics::SystemSpec& spec, const Mat& X) const;
  double g_scalar() const { return g_scalar_; }

 private:
  const ResidualDynamics* res_;
  netcore::DenseNetEval f_net_;
  bool g_is_scalar_ = true;
  double g_scalar_ = 0.0;
  netcore::DenseNetEval g_net_;
};

/// Estimated Lyapunov derivative grad V . (fhat + ghat u) at one state.
double vdot_hat(const LyapunovEval& lyap, const ControllerEval& ctrl, const ResidualEval& res,
                const dynamics::SystemSpec& spec, const Vec& x);

/// Batched version over columns of X.
Eigen::RowVectorXd vdot_hat_batch(const LyapunovEval& lyap, const ControllerEval& ctrl,
                                  const ResidualEval& res, const dynamics::SystemSpec& spec,
                                  const Mat& X);

// ---------------------------------------------------------------------------
// Tape graph builders (training / gradient checks)
// ---------------------------------------------------------------------------

struct GraphContext {
  netcore::Tape tape;
  std::unique_ptr<netcore::ParamLeaves> leaves;
  int x_node = -1;  // n x N batch leaf
};

/// Registers the batch and parameter leaves; `trainable` selects which store
/// entries receive gradients (others enter the graph frozen).
GraphContext make_context(const netcore::ParamStore& store, const Mat& X,
                          std::span<const int> trainable);

/// 1 x N node of V over the batch.
int build_value_row(GraphContext& ctx, const LyapunovNet& net);

/// n x N node of grad_x V via a tape-level reverse sweep (differentiable
/// again with respect to the parameters).
int build_grad_x(GraphContext& ctx, int value_row);

/// 1 x N node of the controller output (m = 1).
int build_controller_row(GraphContext& ctx, const ControllerNet& net);

/// n x N node of fhat (residual trainable) given the constant f0 batch.
int build_f_hat(GraphContext& ctx, const ResidualDynamics& res, const Mat& f0_batch);

/// n x N node of ghat column given the constant g0 batch.
int build_g_hat(GraphContext& ctx, const ResidualDynamics& res, const Mat& g0_batch);

/// 1 x N node of vdot_hat from grad-V, fhat, ghat and controller row nodes.
int build_vdot_row(GraphContext& ctx, int grad_x, int f_hat, int g_hat, int u_row);

struct LyapunovLossTerms {
  int loss = -1;
  int roa_term = -1;
  int lip_term = -1;
  double loss_value = 0.0;
};

/// Lyapunov loss over the batch:
///   lambda_roa/N sum ReLU(vdot + kappa |x|^2 + eps) + lambda_lip/N sum |grad V|.
LyapunovLossTerms build_lyapunov_loss(GraphContext& ctx, int vdot_row, int grad_x,
                                      const Mat& X, double lambda_roa, double lambda_lip,
                                      double kappa, double epsilon);

/// Mean squared error between a 1 x N row node and constant targets.
int build_mse_row(GraphContext& ctx, int row, const Eigen::RowVectorXd& targets);

// ---------------------------------------------------------------------------
// Data-driven supervision
// ---------------------------------------------------------------------------

/// (V(x_{k+1}) - V(x_k)) / dt along a true-system trajectory.
double vdot_tilde(const LyapunovEval& lyap, const dynamics::Trajectory& traj, int index);

struct SupervisionPair {
  Vec x;
  double target = 0.0;  // finite-difference Vdot under the current V
};

/// Recomputes finite-difference targets for raw state pairs with the current V.
std::vector<SupervisionPair> make_supervision(const LyapunovEval& lyap,
                                              const std::vector<dynamics::ClassifyResult::Pair>& pairs,
                                              double dt);

/// Loss values without tape (reporting / tests).
double lyapunov_loss_value(const LyapunovEval& lyap, const ControllerEval& ctrl,
                           const ResidualEval& res, const dynamics::SystemSpec& spec,
                           const std::vector<Vec>& batch, double lambda_roa, double lambda_lip,
                           double kappa, double epsilon);

double dynamics_fit_loss_value(const LyapunovEval& lyap, const ControllerEval& ctrl,
                               const ResidualEval& res, const dynamics::SystemSpec& spec,
                               const std::vector<SupervisionPair>& pairs);

}  // namespace roaforge::lyapnet
