#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "roaforge/lyapnet.hpp"
#include "roaforge/lqr.hpp"

#include <cmath>
#include <random>

using namespace roaforge;
using namespace roaforge::lyapnet;
using netcore::ParamStore;

namespace {

Vec state2(double a, double b) {
  Vec x(2);
  x << a, b;
  return x;
}

/// Quadratic-only Lyapunov net V = q x^T x (phi absent, M = sqrt(q - gamma) I).
struct QuadraticFixture {
  LyapunovNet net;
  ParamStore params;
  QuadraticFixture(int n, double q, double gamma = 1e-6) {
    net = LyapunovNet::make(n, gamma, {});
    net.init(params, 0);
    Mat& packed = params.at("lyap.M");
    packed.setZero();
    const double d = std::sqrt(q - gamma);
    int k = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j <= i; ++j) {
        packed(k++, 0) = (i == j) ? d : 0.0;
      }
    }
  }
};

/// Zeroed controller: K = 0, psi = 0 -> u = LS(0) = 0.
ControllerNet zero_controller(int n, ParamStore& params, double a = -2.0, double b = 2.0) {
  ControllerNet ctrl = ControllerNet::make(n, a, b, Mat::Zero(1, n), {8, 8});
  ctrl.init(params, 7);
  for (int idx : params.group("ctrl.psi.")) params.value(idx).setZero();
  return ctrl;
}

ResidualDynamics zero_residual(const dynamics::SystemSpec& spec, ParamStore& params) {
  ResidualDynamics res = ResidualDynamics::make(spec, {8, 8});
  res.init(params, 9);
  for (int idx : params.group("res.")) params.value(idx).setZero();
  return res;
}

}  // namespace

TEST_CASE("Lyapunov value and gradient at the origin vanish") {
  const auto spec = dynamics::make_system("pendulum");
  LyapunovNet net = LyapunovNet::make(2, 1e-6, {16, 16});
  ParamStore params;
  net.init(params, 42);
  const LyapunovEval lyap(net, params);
  CHECK(lyap.value(Vec::Zero(2)) == 0.0);
  CHECK(lyap.grad(Vec::Zero(2)).norm() == 0.0);
  (void)spec;
}

TEST_CASE("zero M with gamma floor gives V = gamma |x|^2") {
  QuadraticFixture fx(2, 1e-6, 1e-6);  // d = 0, only the gamma term remains
  const LyapunovEval lyap(fx.net, fx.params);
  CHECK(lyap.value(state2(1, 1)) == doctest::Approx(2e-6).epsilon(1e-9));
}

TEST_CASE("V dominates gamma |x|^2 for random parameters") {
  LyapunovNet net = LyapunovNet::make(2, 1e-6, {16, 16});
  ParamStore params;
  net.init(params, 5);
  const LyapunovEval lyap(net, params);
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> dist(-M_PI, M_PI);
  for (int i = 0; i < 5000; ++i) {
    const Vec x = state2(dist(rng), dist(rng));
    if (x.norm() < 1e-12) continue;
    CHECK(lyap.value(x) >= net.gamma * x.squaredNorm());
  }
}

TEST_CASE("batched value/gradient agree with the scalar path") {
  LyapunovNet net = LyapunovNet::make(2, 1e-6, {8, 8});
  ParamStore params;
  net.init(params, 3);
  const LyapunovEval lyap(net, params);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  Mat X(2, 40);
  for (int j = 0; j < 40; ++j) X.col(j) = state2(dist(rng), dist(rng));
  const auto v = lyap.value_batch(X);
  const Mat g = lyap.grad_batch(X);
  for (int j = 0; j < 40; ++j) {
    CHECK(v(j) == doctest::Approx(lyap.value(X.col(j))).epsilon(1e-12));
    CHECK((g.col(j) - lyap.grad(X.col(j))).norm() <= 1e-12);
  }
}

TEST_CASE("loose saturation follows the piecewise formula") {
  CHECK(loose_saturation(3.0, -2.0, 2.0, 0.0, 0.0) == doctest::Approx(2.0));
  CHECK(loose_saturation(1.5, -2.0, 2.0, 0.7, -0.4) == doctest::Approx(1.5));
  CHECK(loose_saturation(3.0, -2.0, 2.0, 0.0, 0.5) == doctest::Approx(2.5));
  CHECK(loose_saturation(-3.0, -2.0, 2.0, 0.25, 0.0) == doctest::Approx(-2.25));
}

TEST_CASE("saturation is Lipschitz with constant max(1, |m_a|, |m_b|)") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> y_dist(-10.0, 10.0);
  std::uniform_real_distribution<double> m_dist(-2.0, 2.0);
  for (int t = 0; t < 2000; ++t) {
    const double ma = m_dist(rng), mb = m_dist(rng);
    const double y1 = y_dist(rng), y2 = y_dist(rng);
    const double lip = std::max({1.0, std::abs(ma), std::abs(mb)});
    const double lhs = std::abs(loose_saturation(y1, -1.0, 1.0, ma, mb) -
                                loose_saturation(y2, -1.0, 1.0, ma, mb));
    CHECK(lhs <= lip * std::abs(y1 - y2) + 1e-12);
  }
}

TEST_CASE("freshly constructed controller clamps hard to [a, b]") {
  ParamStore params;
  Mat k(1, 2);
  k << 5.0, 5.0;  // strong gain pushes u0 out of band
  ControllerNet ctrl = ControllerNet::make(2, -2.0, 2.0, k, {8, 8});
  ctrl.init(params, 11);
  const ControllerEval eval(ctrl, params);
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> dist(-3.0, 3.0);
  for (int t = 0; t < 500; ++t) {
    const Vec u = eval(state2(dist(rng), dist(rng)));
    CHECK(u(0) <= 2.0 + 1e-12);
    CHECK(u(0) >= -2.0 - 1e-12);
  }
}

TEST_CASE("vdot_hat vanishes at the origin and matches the symbolic pendulum") {
  const auto spec = dynamics::make_system("pendulum");
  QuadraticFixture fx(2, 0.1);
  ParamStore& params = fx.params;
  const ControllerNet ctrl = zero_controller(2, params);
  const ResidualDynamics res = zero_residual(spec, params);

  const LyapunovEval lyap(fx.net, params);
  const ControllerEval ctrl_eval(ctrl, params);
  const ResidualEval res_eval(res, params);

  CHECK(vdot_hat(lyap, ctrl_eval, res_eval, spec, Vec::Zero(2)) == doctest::Approx(0.0));

  // With V = 0.1 x^T x, zero controller, nominal pendulum (l' = 0.4):
  // vdot = 0.2 (theta omega + omega (g/l') sin theta).
  const double g_over_l = 9.81 / 0.4;
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  for (int t = 0; t < 50; ++t) {
    const double th = dist(rng), om = dist(rng);
    const double expected = 0.2 * (th * om + om * g_over_l * std::sin(th));
    const double got = vdot_hat(lyap, ctrl_eval, res_eval, spec, state2(th, om));
    CHECK(got == doctest::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("exact model: vdot_hat matches finite differences along a rollout") {
  const auto spec = dynamics::make_system(
      "pendulum", {{"m", 1.0}, {"l", 0.5}, {"m_nom", 1.0}, {"l_nom", 0.5}});
  LyapunovNet net = LyapunovNet::make(2, 1e-6, {16, 16});
  ParamStore params;
  net.init(params, 21);
  const auto lin = lqr::linearize(spec);
  const auto sol = lqr::solve_care(lin, Mat::Identity(2, 2), Mat::Identity(1, 1));
  ControllerNet ctrl = ControllerNet::make(2, -2.0, 2.0, sol.K, {8, 8});
  ctrl.init(params, 22);
  for (int idx : params.group("ctrl.psi.")) params.value(idx).setZero();
  const ResidualDynamics res = zero_residual(spec, params);

  const LyapunovEval lyap(net, params);
  const ControllerEval ctrl_eval(ctrl, params);
  const ResidualEval res_eval(res, params);

  const double dt = 1e-3;
  const auto traj = dynamics::rk4_rollout(
      spec, dynamics::Field::true_plant, [&](const Vec& x) { return ctrl_eval(x); },
      state2(0.2, 0.0), dt, 0.5);
  for (std::size_t k = 0; k + 1 < traj.states.size(); k += 25) {
    const double fd = vdot_tilde(lyap, traj, static_cast<int>(k));
    const double analytic = vdot_hat(lyap, ctrl_eval, res_eval, spec, traj.states[k]);
    CHECK(std::abs(fd - analytic) <= 50.0 * dt);
  }
}

TEST_CASE("vdot_tilde halving dt halves the first-order error") {
  const auto spec = dynamics::make_system("pendulum");
  QuadraticFixture fx(2, 1.0);  // V = |x|^2
  ParamStore& params = fx.params;
  const ControllerNet ctrl = zero_controller(2, params);
  const LyapunovEval lyap(fx.net, params);
  const ControllerEval ctrl_eval(ctrl, params);

  const Vec x0 = state2(0.4, 0.1);
  auto controller = [&](const Vec& x) { return ctrl_eval(x); };
  auto error_at = [&](double dt) {
    const auto traj =
        dynamics::rk4_rollout(spec, dynamics::Field::true_plant, controller, x0, dt, 10 * dt);
    // Analytic derivative of |x|^2 along the true field: 2 x . xdot.
    const Vec xd = dynamics::eval_field(spec, dynamics::Field::true_plant, traj.states[0],
                                        traj.inputs[0]);
    return std::abs(vdot_tilde(lyap, traj, 0) - 2.0 * traj.states[0].dot(xd));
  };
  const double e1 = error_at(2e-3);
  const double e2 = error_at(1e-3);
  CHECK(e1 / e2 == doctest::Approx(2.0).epsilon(0.25));
}

TEST_CASE("Lyapunov loss arithmetic and decomposition") {
  const auto spec = dynamics::make_system("pendulum");
  QuadraticFixture fx(2, 0.1);
  ParamStore& params = fx.params;
  const ControllerNet ctrl = zero_controller(2, params);
  const ResidualDynamics res = zero_residual(spec, params);
  const LyapunovEval lyap(fx.net, params);
  const ControllerEval ctrl_eval(ctrl, params);
  const ResidualEval res_eval(res, params);

  const double kappa = 0.1, eps = 0.01;

  // Origin-only batch: vdot and the gradient regularizer vanish, leaving only
  // the constant epsilon offset inside the ReLU.
  CHECK(lyapunov_loss_value(lyap, ctrl_eval, res_eval, spec, {Vec::Zero(2)}, 1000.0, 0.1,
                            kappa, eps) == doctest::Approx(1000.0 * eps));

  // Hand arithmetic: loss = lambda * ReLU(vdot + kappa |x|^2 + eps).
  const Vec x = state2(0.7, 0.4);
  const double vd = vdot_hat(lyap, ctrl_eval, res_eval, spec, x);
  const double expected_roa = 1000.0 * std::max(0.0, vd + kappa * x.squaredNorm() + eps);
  CHECK(lyapunov_loss_value(lyap, ctrl_eval, res_eval, spec, {x}, 1000.0, 0.0, kappa, eps) ==
        doctest::Approx(expected_roa).epsilon(1e-12));

  // Additivity: full loss = RoA-only + Lip-only.
  const std::vector<Vec> batch = {x, state2(-0.3, 0.9), state2(1.2, -0.5)};
  const double full =
      lyapunov_loss_value(lyap, ctrl_eval, res_eval, spec, batch, 1000.0, 0.1, kappa, eps);
  const double roa_only =
      lyapunov_loss_value(lyap, ctrl_eval, res_eval, spec, batch, 1000.0, 0.0, kappa, eps);
  const double lip_only =
      lyapunov_loss_value(lyap, ctrl_eval, res_eval, spec, batch, 1000.0, 0.1, kappa, eps) -
      roa_only;
  CHECK(full == doctest::Approx(roa_only + lip_only).epsilon(1e-12));
  // The Lip term itself is lambda_lip * mean |grad V|.
  double lip_direct = 0.0;
  for (const auto& xb : batch) lip_direct += lyap.grad(xb).norm();
  lip_direct *= 0.1 / static_cast<double>(batch.size());
  CHECK(lip_only == doctest::Approx(lip_direct).epsilon(1e-9));
}

TEST_CASE("tape loss equals the direct loss and pendulum fixture value 1110 shape") {
  // Constructed single-point check of Eq-13 arithmetic: with vdot = 1,
  // |x|^2 = 1, kappa = 0.1, eps = 0.01, lambda_roa = 1000, lambda_lip = 0 the
  // loss is 1000 * 1.11 = 1110 (verified through the same ReLU expression).
  const double arg = 1.0 + 0.1 * 1.0 + 0.01;
  CHECK(1000.0 * std::max(0.0, arg) == doctest::Approx(1110.0));

  const auto spec = dynamics::make_system("pendulum");
  LyapunovNet net = LyapunovNet::make(2, 1e-6, {8, 8});
  ParamStore params;
  net.init(params, 31);
  const auto lin = lqr::linearize(spec);
  const auto sol = lqr::solve_care(lin, Mat::Identity(2, 2), Mat::Identity(1, 1));
  ControllerNet ctrl = ControllerNet::make(2, -2.0, 2.0, sol.K, {8, 8});
  ctrl.init(params, 32);
  ResidualDynamics res = ResidualDynamics::make(spec, {8, 8});
  res.init(params, 33);

  const LyapunovEval lyap(net, params);
  const ControllerEval ctrl_eval(ctrl, params);
  const ResidualEval res_eval(res, params);

  std::mt19937_64 rng(34);
  std::uniform_real_distribution<double> dist(-2.5, 2.5);
  Mat X(2, 17);
  std::vector<Vec> batch;
  for (int j = 0; j < 17; ++j) {
    X.col(j) = state2(dist(rng), dist(rng));
    batch.push_back(X.col(j));
  }

  std::vector<int> trainable(static_cast<std::size_t>(params.size()));
  std::iota(trainable.begin(), trainable.end(), 0);
  auto ctx = make_context(params, X, trainable);
  const int v_row = build_value_row(ctx, net);
  const int grad_x = build_grad_x(ctx, v_row);
  const int u_row = build_controller_row(ctx, ctrl);
  Mat f0(2, X.cols()), g0(2, X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    f0.col(j) = spec.nominal_f0(X.col(j));
    g0.col(j) = spec.nominal_g0(X.col(j)).col(0);
  }
  const int fhat = build_f_hat(ctx, res, f0);
  const int ghat = build_g_hat(ctx, res, g0);
  const int vdot_row = build_vdot_row(ctx, grad_x, fhat, ghat, u_row);
  const auto terms = build_lyapunov_loss(ctx, vdot_row, grad_x, X, 500.0, 0.01, 0.1, 0.01);

  const double direct =
      lyapunov_loss_value(lyap, ctrl_eval, res_eval, spec, batch, 500.0, 0.01, 0.1, 0.01);
  CHECK(terms.loss_value == doctest::Approx(direct).epsilon(1e-9));

  // Tape vdot row agrees with the fast path pointwise.
  const auto vdot_direct = vdot_hat_batch(lyap, ctrl_eval, res_eval, spec, X);
  const Mat vdot_tape = ctx.tape.value(vdot_row);
  for (int j = 0; j < 17; ++j) {
    CHECK(vdot_tape(0, j) == doctest::Approx(vdot_direct(j)).epsilon(1e-9));
  }
}

TEST_CASE("vdot_hat parameter gradients match finite differences for every theta") {
  for (const char* name : {"pendulum", "strict_feedback", "cartpole"}) {
    const auto spec = dynamics::make_system(name);
    LyapunovNet net = LyapunovNet::make(spec.n, 1e-6, {6, 6});
    ParamStore params;
    net.init(params, 51);
    const auto lin = lqr::linearize(spec);
    const auto sol = lqr::solve_care(lin, Mat::Identity(spec.n, spec.n), Mat::Identity(1, 1));
    ControllerNet ctrl = ControllerNet::make(spec.n, -2.0, 2.0, sol.K, {6, 6});
    ctrl.init(params, 52);
    params.at("ctrl.m_a")(0, 0) = 0.3;  // exercise the slope branches
    params.at("ctrl.m_b")(0, 0) = -0.2;
    ResidualDynamics res = ResidualDynamics::make(spec, {6, 6});
    res.init(params, 53);
    if (res.g_shape == dynamics::ResidualGShape::scalar) {
      params.at("res.g.scalar")(0, 0) = 0.05;
    }

    std::mt19937_64 rng(54);
    std::uniform_real_distribution<double> dist(-0.8, 0.8);
    Mat X(spec.n, 3);
    for (int j = 0; j < 3; ++j) {
      for (int d = 0; d < spec.n; ++d) X(d, j) = dist(rng);
    }

    auto total_vdot = [&]() {
      const LyapunovEval lyap(net, params);
      const ControllerEval ctrl_eval(ctrl, params);
      const ResidualEval res_eval(res, params);
      return vdot_hat_batch(lyap, ctrl_eval, res_eval, spec, X).sum();
    };

    std::vector<int> trainable(static_cast<std::size_t>(params.size()));
    std::iota(trainable.begin(), trainable.end(), 0);
    auto ctx = make_context(params, X, trainable);
    const int v_row = build_value_row(ctx, net);
    const int grad_x = build_grad_x(ctx, v_row);
    const int u_row = build_controller_row(ctx, ctrl);
    Mat f0(spec.n, X.cols()), g0(spec.n, X.cols());
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
      f0.col(j) = spec.nominal_f0(X.col(j));
      g0.col(j) = spec.nominal_g0(X.col(j)).col(0);
    }
    const int fhat = build_f_hat(ctx, res, f0);
    const int ghat = build_g_hat(ctx, res, g0);
    const int vdot_row = build_vdot_row(ctx, grad_x, fhat, ghat, u_row);
    const int total = ctx.tape.sum(vdot_row);
    auto grads = netcore::collect_gradients(ctx.tape, total, *ctx.leaves);

    const double h = 1e-5;
    for (int pi = 0; pi < params.size(); ++pi) {
      Mat& p = params.value(pi);
      Mat fd(p.rows(), p.cols());
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        for (Eigen::Index cidx = 0; cidx < p.cols(); ++cidx) {
          const double orig = p(r, cidx);
          p(r, cidx) = orig + h;
          const double hi = total_vdot();
          p(r, cidx) = orig - h;
          const double lo = total_vdot();
          p(r, cidx) = orig;
          fd(r, cidx) = (hi - lo) / (2.0 * h);
        }
      }
      const Mat& an = grads.grads[static_cast<std::size_t>(pi)].size() > 0
                          ? grads.grads[static_cast<std::size_t>(pi)]
                          : Mat::Zero(fd.rows(), fd.cols()).eval();
      CHECK((an - fd).norm() / std::max(1e-6, fd.norm()) <= 1e-5);
    }
  }
}

TEST_CASE("dynamics fit loss is tiny for the exact model and zero residual") {
  const auto spec = dynamics::make_system(
      "pendulum", {{"m", 1.0}, {"l", 0.5}, {"m_nom", 1.0}, {"l_nom", 0.5}});
  QuadraticFixture fx(2, 0.1);
  ParamStore& params = fx.params;
  const auto lin = lqr::linearize(spec);
  const auto sol = lqr::solve_care(lin, Mat::Identity(2, 2), Mat::Identity(1, 1));
  ControllerNet ctrl = ControllerNet::make(2, -2.0, 2.0, sol.K, {8, 8});
  ctrl.init(params, 61);
  for (int idx : params.group("ctrl.psi.")) params.value(idx).setZero();
  const ResidualDynamics res = zero_residual(spec, params);

  const LyapunovEval lyap(fx.net, params);
  const ControllerEval ctrl_eval(ctrl, params);
  const ResidualEval res_eval(res, params);

  const auto traj = dynamics::rk4_rollout(
      spec, dynamics::Field::true_plant, [&](const Vec& x) { return ctrl_eval(x); },
      state2(0.3, 0.0), 0.01, 3.0);
  std::vector<dynamics::ClassifyResult::Pair> raw;
  for (std::size_t k = 0; k + 1 < traj.states.size(); k += 5) {
    raw.push_back({0, traj.states[k], traj.states[k + 1]});
  }
  const auto pairs = make_supervision(lyap, raw, 0.01);
  CHECK(dynamics_fit_loss_value(lyap, ctrl_eval, res_eval, spec, pairs) <= 1e-2);

  // Single matching pair has zero loss.
  std::vector<SupervisionPair> one = {{state2(0.2, 0.1), 0.0}};
  one[0].target = vdot_hat(lyap, ctrl_eval, res_eval, spec, one[0].x);
  CHECK(dynamics_fit_loss_value(lyap, ctrl_eval, res_eval, spec, one) ==
        doctest::Approx(0.0).epsilon(1e-15));
}
