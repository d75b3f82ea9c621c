#include "roaforge/lyapnet.hpp"

#include <cmath>
#include <random>

namespace roaforge::lyapnet {

using netcore::Activation;
using netcore::DenseNetSpec;
using netcore::ParamStore;
using netcore::Tape;

namespace {

std::string m_name() { return std::string(kLyapPrefix) + ".M"; }
std::string phi_prefix() { return std::string(kLyapPrefix) + ".phi"; }
std::string psi_prefix() { return std::string(kCtrlPrefix) + ".psi"; }
std::string slope_a_name() { return std::string(kCtrlPrefix) + ".m_a"; }
std::string slope_b_name() { return std::string(kCtrlPrefix) + ".m_b"; }
std::string g_scalar_name() { return std::string(kResGPrefix) + ".scalar"; }

/// Column-major flat indices of the packed lower triangle (row-major pack
/// order: (0,0), (1,0), (1,1), (2,0), ...).
std::vector<int> lower_triangle_flat_indices(int n) {
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(n * (n + 1) / 2));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) idx.push_back(j * n + i);
  return idx;
}

}  // namespace

// ---------------------------------------------------------------------------
// Bundles
// ---------------------------------------------------------------------------

LyapunovNet LyapunovNet::make(int n, double gamma, std::vector<int> phi_hidden) {
  require(n >= 1, "LyapunovNet needs n >= 1");
  require(gamma > 0.0, "LyapunovNet needs gamma > 0");
  LyapunovNet net;
  net.n = n;
  net.gamma = gamma;
  if (!phi_hidden.empty()) {
    std::vector<int> dims;
    dims.push_back(n);
    dims.insert(dims.end(), phi_hidden.begin(), phi_hidden.end());
    net.phi = DenseNetSpec::constrained_net(std::move(dims));
  }
  return net;
}

void LyapunovNet::init(ParamStore& store, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(n));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat packed(n * (n + 1) / 2, 1);
  for (Eigen::Index i = 0; i < packed.rows(); ++i) packed(i, 0) = dist(rng);
  store.add(m_name(), packed);
  if (phi) netcore::init_dense_params(*phi, split_seed(seed, 1), store, phi_prefix());
}

Mat LyapunovNet::unpack_m(const ParamStore& store) const {
  const Mat& packed = store.at(m_name());
  Mat m = Mat::Zero(n, n);
  int k = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) m(i, j) = packed(k++, 0);
  return m;
}

ControllerNet ControllerNet::make(int n, double a, double b, Mat k_gain,
                                  std::vector<int> psi_hidden) {
  require(a < b, "loose saturation needs a < b");
  ControllerNet net;
  net.n = n;
  net.m = static_cast<int>(k_gain.rows());
  net.a = a;
  net.b = b;
  net.k_gain = std::move(k_gain);
  std::vector<int> dims;
  dims.push_back(n);
  dims.insert(dims.end(), psi_hidden.begin(), psi_hidden.end());
  dims.push_back(net.m);
  net.psi = DenseNetSpec::mlp(std::move(dims), /*final_identity=*/true);
  return net;
}

void ControllerNet::init(ParamStore& store, std::uint64_t seed) const {
  netcore::init_dense_params(psi, seed, store, psi_prefix());
  store.add(slope_a_name(), Mat::Zero(1, 1));
  store.add(slope_b_name(), Mat::Zero(1, 1));
}

ResidualDynamics ResidualDynamics::make(const dynamics::SystemSpec& spec,
                                        std::vector<int> hidden) {
  ResidualDynamics res;
  res.n = spec.n;
  res.f_mask = spec.residual_f_mask;
  res.g_shape = spec.residual_g_shape;
  res.g_mask = spec.residual_g_mask;
  std::vector<int> fdims;
  fdims.push_back(spec.n);
  fdims.insert(fdims.end(), hidden.begin(), hidden.end());
  fdims.push_back(static_cast<int>(res.f_mask.size()));
  res.f_net = DenseNetSpec::mlp(std::move(fdims), /*final_identity=*/true);
  if (res.g_shape == dynamics::ResidualGShape::masked_net) {
    std::vector<int> gdims;
    gdims.push_back(spec.n);
    gdims.insert(gdims.end(), hidden.begin(), hidden.end());
    gdims.push_back(static_cast<int>(res.g_mask.size()));
    res.g_net = DenseNetSpec::mlp(std::move(gdims), /*final_identity=*/true);
  }
  return res;
}

void ResidualDynamics::init(ParamStore& store, std::uint64_t seed) const {
  netcore::init_dense_params(f_net, seed, store, kResFPrefix);
  if (g_shape == dynamics::ResidualGShape::scalar) {
    store.add(g_scalar_name(), Mat::Zero(1, 1));
  } else {
    netcore::init_dense_params(*g_net, split_seed(seed, 1), store, kResGPrefix);
  }
}

double loose_saturation(double y, double a, double b, double m_a, double m_b) {
  if (y < a) return a + m_a * (y - a);
  if (y > b) return b + m_b * (y - b);
  return y;
}

// ---------------------------------------------------------------------------
// Fast evaluators
// ---------------------------------------------------------------------------

LyapunovEval::LyapunovEval(const LyapunovNet& net, const ParamStore& store) {
  const Mat m = net.unpack_m(store);
  A_ = m * m.transpose() + net.gamma * Mat::Identity(net.n, net.n);
  if (net.phi) {
    has_phi_ = true;
    phi_ = netcore::DenseNetEval(*net.phi, store, phi_prefix());
  }
}

double LyapunovEval::value(const Vec& x) const {
  double v = x.dot(A_ * x);
  if (has_phi_) v += phi_(x).squaredNorm();
  return v;
}

Vec LyapunovEval::grad(const Vec& x) const {
  Vec g = 2.0 * (A_ * x);
  if (has_phi_) {
    const Vec out = phi_(x);
    g += phi_.vjp(x, 2.0 * out);
  }
  return g;
}

Eigen::RowVectorXd LyapunovEval::value_batch(const Mat& X) const {
  Eigen::RowVectorXd v = (X.cwiseProduct(A_ * X)).colwise().sum();
  if (has_phi_) {
    const Mat out = phi_.forward_batch(X);
    v += out.colwise().squaredNorm();
  }
  return v;
}

Mat LyapunovEval::grad_batch(const Mat& X) const {
  Mat g = 2.0 * (A_ * X);
  if (has_phi_) {
    const Mat out = phi_.forward_batch(X);
    g += phi_.vjp_batch(X, 2.0 * out);
  }
  return g;
}

ControllerEval::ControllerEval(const ControllerNet& net, const ParamStore& store)
    : k_gain_(net.k_gain),
      a_(net.a),
      b_(net.b),
      m_a_(store.at(slope_a_name())(0, 0)),
      m_b_(store.at(slope_b_name())(0, 0)),
      psi_(net.psi, store, psi_prefix()) {}

Vec ControllerEval::operator()(const Vec& x) const {
  Vec y = -(k_gain_ * x) + psi_(x);
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    y(i) = loose_saturation(y(i), a_, b_, m_a_, m_b_);
  }
  return y;
}

Eigen::RowVectorXd ControllerEval::eval_batch(const Mat& X) const {
  require(k_gain_.rows() == 1, "batched controller supports single-input plants");
  Eigen::RowVectorXd y = -(k_gain_ * X) + psi_.forward_batch(X);
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    y(i) = loose_saturation(y(i), a_, b_, m_a_, m_b_);
  }
  return y;
}

ResidualEval::ResidualEval(const ResidualDynamics& res, const ParamStore& store)
    : res_(&res), f_net_(res.f_net, store, kResFPrefix) {
  if (res.g_shape == dynamics::ResidualGShape::scalar) {
    g_is_scalar_ = true;
    g_scalar_ = store.at(g_scalar_name())(0, 0);
  } else {
    g_is_scalar_ = false;
    g_net_ = netcore::DenseNetEval(*res.g_net, store, kResGPrefix);
  }
}

Vec ResidualEval::f_hat(const dynamics::SystemSpec& spec, const Vec& x) const {
  Vec f = spec.nominal_f0(x);
  const Vec out = f_net_(x);
  for (std::size_t k = 0; k < res_->f_mask.size(); ++k) {
    f(res_->f_mask[k]) += out(static_cast<Eigen::Index>(k));
  }
  return f;
}

Vec ResidualEval::g_hat(const dynamics::SystemSpec& spec, const Vec& x) const {
  Vec g = spec.nominal_g0(x).col(0);
  if (g_is_scalar_) {
    for (int row : res_->g_mask) g(row) += g_scalar_;
  } else {
    const Vec out = g_net_(x);
    for (std::size_t k = 0; k < res_->g_mask.size(); ++k) {
      g(res_->g_mask[k]) += out(static_cast<Eigen::Index>(k));
    }
  }
  return g;
}

Mat ResidualEval::f_hat_batch(const dynamics::SystemSpec& spec, const Mat& X) const {
  Mat f(spec.n, X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) f.col(j) = spec.nominal_f0(X.col(j));
  const Mat out = f_net_.forward_batch(X);
  for (std::size_t k = 0; k < res_->f_mask.size(); ++k) {
    f.row(res_->f_mask[k]) += out.row(static_cast<Eigen::Index>(k));
  }
  return f;
}

Mat ResidualEval::g_hat_batch(const dynamics::SystemSpec& spec, const Mat& X) const {
  Mat g(spec.n, X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) g.col(j) = spec.nominal_g0(X.col(j)).col(0);
  if (g_is_scalar_) {
    for (int row : res_->g_mask) g.row(row).array() += g_scalar_;
  } else {
    const Mat out = g_net_.forward_batch(X);
    for (std::size_t k = 0; k < res_->g_mask.size(); ++k) {
      g.row(res_->g_mask[k]) += out.row(static_cast<Eigen::Index>(k));
    }
  }
  return g;
}

double vdot_hat(const LyapunovEval& lyap, const ControllerEval& ctrl, const ResidualEval& res,
                const dynamics::SystemSpec& spec, const Vec& x) {
  const Vec u = ctrl(x);
  const Vec field = res.f_hat(spec, x) + res.g_hat(spec, x) * u(0);
  return lyap.grad(x).dot(field);
}

Eigen::RowVectorXd vdot_hat_batch(const LyapunovEval& lyap, const ControllerEval& ctrl,
                                  const ResidualEval& res, const dynamics::SystemSpec& spec,
                                  const Mat& X) {
  const Mat g = lyap.grad_batch(X);
  const Eigen::RowVectorXd u = ctrl.eval_batch(X);
  Mat field = res.f_hat_batch(spec, X);
  const Mat ghat = res.g_hat_batch(spec, X);
  field.array() += ghat.array().rowwise() * u.array();
  return (g.cwiseProduct(field)).colwise().sum();
}

// ---------------------------------------------------------------------------
// Tape graph builders
// ---------------------------------------------------------------------------

GraphContext make_context(const ParamStore& store, const Mat& X, std::span<const int> trainable) {
  GraphContext ctx;
  ctx.x_node = ctx.tape.leaf(X, /*requires_grad=*/true);
  ctx.leaves = std::make_unique<netcore::ParamLeaves>(ctx.tape, store, trainable);
  return ctx;
}

int build_value_row(GraphContext& ctx, const LyapunovNet& net) {
  Tape& t = ctx.tape;
  const int n = net.n;
  const int packed = ctx.leaves->node(m_name());
  const int flat = t.scatter_rows(packed, lower_triangle_flat_indices(n), n * n);
  const int m_full = t.reshape(flat, n, n);
  const int mtx = t.matmul(t.transpose(m_full), ctx.x_node);  // M^T X
  const int quad_m = t.col_sum(t.cwise_mul(mtx, mtx));        // x^T M M^T x
  const int quad_g = t.scale(t.col_sum(t.cwise_mul(ctx.x_node, ctx.x_node)), net.gamma);
  int v = t.add(quad_m, quad_g);
  if (net.phi) {
    const int phi_out = netcore::dense_forward(t, *net.phi, *ctx.leaves, phi_prefix(), ctx.x_node);
    v = t.add(v, t.col_sum(t.cwise_mul(phi_out, phi_out)));
  }
  return v;
}

int build_grad_x(GraphContext& ctx, int value_row) {
  Tape& t = ctx.tape;
  const int total = t.sum(value_row);
  const int wrt[] = {ctx.x_node};
  const std::vector<int> adj = t.gradient(total, wrt);
  if (adj[0] != -1) return adj[0];
  const Mat& x = t.value(ctx.x_node);
  return t.constant(Mat::Zero(x.rows(), x.cols()));
}

int build_controller_row(GraphContext& ctx, const ControllerNet& net) {
  Tape& t = ctx.tape;
  require(net.m == 1, "graph controller supports single-input plants");
  const Mat& X = t.value(ctx.x_node);
  const int u0 = t.constant(-(net.k_gain * X));
  const int psi_out = netcore::dense_forward(t, net.psi, *ctx.leaves, psi_prefix(), ctx.x_node);
  const int y = t.add(u0, psi_out);

  // Region masks are fixed by the forward values (piecewise-linear filter).
  const Mat& yval = t.value(y);
  Mat below(1, yval.cols()), above(1, yval.cols()), mid(1, yval.cols());
  for (Eigen::Index j = 0; j < yval.cols(); ++j) {
    const bool lo = yval(0, j) < net.a;
    const bool hi = yval(0, j) > net.b;
    below(0, j) = lo ? 1.0 : 0.0;
    above(0, j) = hi ? 1.0 : 0.0;
    mid(0, j) = (!lo && !hi) ? 1.0 : 0.0;
  }
  const int m_a = ctx.leaves->node(slope_a_name());
  const int m_b = ctx.leaves->node(slope_b_name());
  const int lo_branch = t.add_const(t.scalar_mul(m_a, t.add_const(y, -net.a)), net.a);
  const int hi_branch = t.add_const(t.scalar_mul(m_b, t.add_const(y, -net.b)), net.b);
  return t.add(t.cwise_mul(t.constant(mid), y),
               t.add(t.cwise_mul(t.constant(below), lo_branch),
                     t.cwise_mul(t.constant(above), hi_branch)));
}

int build_f_hat(GraphContext& ctx, const ResidualDynamics& res, const Mat& f0_batch) {
  Tape& t = ctx.tape;
  const int f0 = t.constant(f0_batch);
  const int out = netcore::dense_forward(t, res.f_net, *ctx.leaves, kResFPrefix, ctx.x_node);
  return t.add(f0, t.scatter_rows(out, res.f_mask, res.n));
}

int build_g_hat(GraphContext& ctx, const ResidualDynamics& res, const Mat& g0_batch) {
  Tape& t = ctx.tape;
  const int g0 = t.constant(g0_batch);
  if (res.g_shape == dynamics::ResidualGShape::scalar) {
    const int s = ctx.leaves->node(g_scalar_name());
    const int ones = t.constant(Mat::Ones(static_cast<Eigen::Index>(res.g_mask.size()),
                                          g0_batch.cols()));
    return t.add(g0, t.scatter_rows(t.scalar_mul(s, ones), res.g_mask, res.n));
  }
  const int out = netcore::dense_forward(t, *res.g_net, *ctx.leaves, kResGPrefix, ctx.x_node);
  return t.add(g0, t.scatter_rows(out, res.g_mask, res.n));
}

int build_vdot_row(GraphContext& ctx, int grad_x, int f_hat, int g_hat, int u_row) {
  Tape& t = ctx.tape;
  const int n = static_cast<int>(t.value(grad_x).rows());
  const int field = t.add(f_hat, t.cwise_mul(g_hat, t.row_broadcast(u_row, n)));
  return t.col_sum(t.cwise_mul(grad_x, field));
}

LyapunovLossTerms build_lyapunov_loss(GraphContext& ctx, int vdot_row, int grad_x, const Mat& X,
                                      double lambda_roa, double lambda_lip, double kappa,
                                      double epsilon) {
  Tape& t = ctx.tape;
  const auto N = static_cast<double>(X.cols());
  Mat offset(1, X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    offset(0, j) = kappa * X.col(j).squaredNorm() + epsilon;
  }
  const int relu_arg = t.add(vdot_row, t.constant(offset));
  LyapunovLossTerms terms;
  terms.roa_term = t.scale(t.sum(t.relu(relu_arg)), lambda_roa / N);
  terms.lip_term = t.scale(t.sum(t.col_norm(grad_x)), lambda_lip / N);
  terms.loss = t.add(terms.roa_term, terms.lip_term);
  terms.loss_value = t.value(terms.loss)(0, 0);
  return terms;
}

int build_mse_row(GraphContext& ctx, int row, const Eigen::RowVectorXd& targets) {
  Tape& t = ctx.tape;
  require(t.value(row).cols() == targets.cols(), "MSE target length mismatch");
  const int diff = t.sub(row, t.constant(targets));
  return t.scale(t.sum(t.cwise_mul(diff, diff)), 1.0 / static_cast<double>(targets.cols()));
}

// ---------------------------------------------------------------------------
// Supervision and loss values
// ---------------------------------------------------------------------------

double vdot_tilde(const LyapunovEval& lyap, const dynamics::Trajectory& traj, int index) {
  require(index >= 0 && index + 1 < static_cast<int>(traj.states.size()),
          "vdot_tilde index out of range");
  return (lyap.value(traj.states[static_cast<std::size_t>(index) + 1]) -
          lyap.value(traj.states[static_cast<std::size_t>(index)])) /
         traj.dt;
}

std::vector<SupervisionPair> make_supervision(
    const LyapunovEval& lyap, const std::vector<dynamics::ClassifyResult::Pair>& pairs,
    double dt) {
  std::vector<SupervisionPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    out.push_back({p.x, (lyap.value(p.x_next) - lyap.value(p.x)) / dt});
  }
  return out;
}

double lyapunov_loss_value(const LyapunovEval& lyap, const ControllerEval& ctrl,
                           const ResidualEval& res, const dynamics::SystemSpec& spec,
                           const std::vector<Vec>& batch, double lambda_roa, double lambda_lip,
                           double kappa, double epsilon) {
  require(!batch.empty(), "lyapunov loss needs a non-empty batch");
  double roa = 0.0, lip = 0.0;
  for (const Vec& x : batch) {
    const double arg = vdot_hat(lyap, ctrl, res, spec, x) + kappa * x.squaredNorm() + epsilon;
    roa += std::max(0.0, arg);
    lip += lyap.grad(x).norm();
  }
  const auto N = static_cast<double>(batch.size());
  return lambda_roa / N * roa + lambda_lip / N * lip;
}

double dynamics_fit_loss_value(const LyapunovEval& lyap, const ControllerEval& ctrl,
                               const ResidualEval& res, const dynamics::SystemSpec& spec,
                               const std::vector<SupervisionPair>& pairs) {
  require(!pairs.empty(), "dynamics fit loss needs a non-empty pair set");
  double mse = 0.0;
  for (const auto& p : pairs) {
    const double d = vdot_hat(lyap, ctrl, res, spec, p.x) - p.target;
    mse += d * d;
  }
  return mse / static_cast<double>(pairs.size());
}

}  // namespace roaforge::lyapnet
