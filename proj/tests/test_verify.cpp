#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "roaforge/lqr.hpp"
#include "roaforge/verify.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <random>

using namespace roaforge;
using namespace roaforge::verify;
using netcore::ParamStore;

namespace {

struct SmallModel {
  lyapnet::LyapunovNet lyap;
  lyapnet::ControllerNet ctrl;
  lyapnet::ResidualDynamics res;
  ParamStore params;
  dynamics::SystemSpec spec;

  explicit SmallModel(const std::string& system, std::uint64_t seed = 17) {
    spec = dynamics::make_system(system);
    lyap = lyapnet::LyapunovNet::make(spec.n, 1e-6, {4, 4});
    const auto lin = lqr::linearize(spec);
    const auto sol = lqr::solve_care(lin, Mat::Identity(spec.n, spec.n), Mat::Identity(1, 1));
    ctrl = lyapnet::ControllerNet::make(spec.n, -2.0, 2.0, sol.K, {4, 4});
    res = lyapnet::ResidualDynamics::make(spec, {4, 4});
    lyap.init(params, split_seed(seed, 1));
    ctrl.init(params, split_seed(seed, 2));
    res.init(params, split_seed(seed, 3));
    // Non-trivial slopes and scalar so every branch carries weight.
    params.at("ctrl.m_a")(0, 0) = 0.4;
    params.at("ctrl.m_b")(0, 0) = -0.1;
    if (res.g_shape == dynamics::ResidualGShape::scalar) {
      params.at("res.g.scalar")(0, 0) = 0.2;
    }
  }
};

Vec random_state(const dynamics::SystemSpec& spec, std::mt19937_64& rng) {
  Vec x(spec.n);
  for (int d = 0; d < spec.n; ++d) {
    std::uniform_real_distribution<double> dist(spec.state_box[static_cast<std::size_t>(d)].first,
                                                spec.state_box[static_cast<std::size_t>(d)].second);
    x(d) = dist(rng);
  }
  return x;
}

}  // namespace

TEST_CASE("smt literals are positional, exponent-free, and round-trip") {
  CHECK(smt_literal(0.001) == "0.001");
  CHECK(smt_literal(0.0) == "0.0");
  CHECK(smt_literal(100.0) == "100.0");
  CHECK(smt_literal(0.5) == "0.5");
  CHECK(smt_literal(-1.5) == "(- 1.5)");
  // 17 significant digits expose the binary rounding of 24.525 faithfully.
  CHECK(std::strtod(smt_literal(24.525).c_str(), nullptr) == 24.525);

  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> mag(-8.0, 6.0);
  std::uniform_real_distribution<double> frac(-1.0, 1.0);
  for (int t = 0; t < 500; ++t) {
    const double v = frac(rng) * std::pow(10.0, mag(rng));
    std::string lit = smt_literal(v);
    double sign = 1.0;
    if (lit.rfind("(- ", 0) == 0) {
      sign = -1.0;
      lit = lit.substr(3, lit.size() - 4);
    }
    CHECK(lit.find('e') == std::string::npos);
    CHECK(sign * std::strtod(lit.c_str(), nullptr) == v);
  }
}

TEST_CASE("symbolic derivative matches finite differences") {
  SymTable t;
  const int x0 = t.variable(0);
  const int x1 = t.variable(1);
  // f = sin(x0) * exp(x1) + tanh(x0 x1) + x0 / (1 + x1^2)
  const int f = t.add(
      t.add(t.mul(t.sin_fn(x0), t.exp_fn(x1)), t.tanh_via_exp(t.mul(x0, x1))),
      t.div(x0, t.add(t.constant(1.0), t.mul(x1, x1))));
  const int dfdx0 = t.derivative(f, 0);
  const int dfdx1 = t.derivative(f, 1);
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> dist(-1.5, 1.5);
  for (int trial = 0; trial < 50; ++trial) {
    Vec x(2);
    x << dist(rng), dist(rng);
    const double h = 1e-6;
    Vec xp = x, xm = x;
    xp(0) += h;
    xm(0) -= h;
    const double fd0 = (t.eval(f, xp) - t.eval(f, xm)) / (2 * h);
    xp = x;
    xm = x;
    xp(1) += h;
    xm(1) -= h;
    const double fd1 = (t.eval(f, xp) - t.eval(f, xm)) / (2 * h);
    CHECK(t.eval(dfdx0, x) == doctest::Approx(fd0).epsilon(1e-6));
    CHECK(t.eval(dfdx1, x) == doctest::Approx(fd1).epsilon(1e-6));
  }
}

TEST_CASE("symbolic model equals the direct evaluators on every plant") {
  for (const char* name : {"pendulum", "strict_feedback", "cartpole"}) {
    SmallModel m(name);
    const auto sym = build_symbolic_model(m.lyap, m.ctrl, m.res, m.params, m.spec);
    const lyapnet::LyapunovEval lyap(m.lyap, m.params);
    const lyapnet::ControllerEval ctrl(m.ctrl, m.params);
    const lyapnet::ResidualEval res(m.res, m.params);

    std::mt19937_64 rng(41);
    for (int trial = 0; trial < 60; ++trial) {
      const Vec x = random_state(m.spec, rng);
      CHECK(sym.table.eval(sym.v_expr, x) ==
            doctest::Approx(lyap.value(x)).epsilon(1e-9));
      CHECK(sym.table.eval(sym.u_expr, x) == doctest::Approx(ctrl(x)(0)).epsilon(1e-9));
      CHECK(sym.table.eval(sym.vdot_expr, x) ==
            doctest::Approx(lyapnet::vdot_hat(lyap, ctrl, res, m.spec, x)).epsilon(1e-8));
    }
  }
}

TEST_CASE("falsifier finds the uncontrolled pendulum violation and is sound") {
  SmallModel m("pendulum");
  // V = 0.1 |x|^2 exactly: zero the phi blocks and set M diag.
  for (int idx : m.params.group("lyap.phi.")) m.params.value(idx).setZero();
  Mat& packed = m.params.at("lyap.M");
  packed.setZero();
  const double d = std::sqrt(0.1 - 1e-6);
  packed(0, 0) = d;
  packed(2, 0) = d;
  // Zero controller: kill the gain and psi, keep the clamp.
  m.ctrl.k_gain.setZero();
  for (int idx : m.params.group("ctrl.psi.")) m.params.value(idx).setZero();
  m.params.at("ctrl.m_a")(0, 0) = 0.0;
  m.params.at("ctrl.m_b")(0, 0) = 0.0;
  for (int idx : m.params.group("res.")) m.params.value(idx).setZero();

  const lyapnet::LyapunovEval lyap(m.lyap, m.params);
  const lyapnet::ControllerEval ctrl(m.ctrl, m.params);
  const lyapnet::ResidualEval res(m.res, m.params);

  const double c = 0.3;  // covers x = (1, 1): V = 0.2
  const auto result = falsify_grid(lyap, ctrl, res, m.spec, c, 0.3, 0.1, 0.05);
  REQUIRE(result.counterexample.has_value());
  const Vec& cex = *result.counterexample;
  // Soundness: the conjunction re-evaluates true at the counterexample.
  CHECK(cex.norm() >= 0.3);
  CHECK(lyap.value(cex) <= c);
  CHECK(lyapnet::vdot_hat(lyap, ctrl, res, m.spec, cex) + 0.1 * cex.squaredNorm() >= 0.0);

  // c = 0 leaves nothing to check.
  const auto empty = falsify_grid(lyap, ctrl, res, m.spec, 0.0, 0.3, 0.1, 0.05);
  CHECK_FALSE(empty.counterexample.has_value());
  CHECK(empty.checked_points == 0);
}

TEST_CASE("falsifier reports a clean margin on a certified quadratic region") {
  // Exact-model pendulum under LQR with the LQR Lyapunov function: the
  // linear closed loop satisfies the decrease condition near the origin.
  const auto spec = dynamics::make_system(
      "pendulum", {{"m", 1.0}, {"l", 0.5}, {"m_nom", 1.0}, {"l_nom", 0.5}});
  SmallModel m("pendulum");
  m.spec = spec;
  const auto lin = lqr::linearize(spec);
  const auto sol = lqr::solve_care(lin, Mat::Identity(2, 2), Mat::Identity(1, 1));
  m.ctrl.k_gain = sol.K;
  for (int idx : m.params.group("ctrl.psi.")) m.params.value(idx).setZero();
  m.params.at("ctrl.m_a")(0, 0) = 0.0;
  m.params.at("ctrl.m_b")(0, 0) = 0.0;
  for (int idx : m.params.group("res.")) m.params.value(idx).setZero();
  for (int idx : m.params.group("lyap.phi.")) m.params.value(idx).setZero();
  Mat& packed = m.params.at("lyap.M");
  const Mat L = (sol.P - 1e-6 * Mat::Identity(2, 2)).llt().matrixL();
  int k = 0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j <= i; ++j) packed(k++, 0) = L(i, j);

  const lyapnet::LyapunovEval lyap(m.lyap, m.params);
  const lyapnet::ControllerEval ctrl(m.ctrl, m.params);
  const lyapnet::ResidualEval res(m.res, m.params);
  const auto result = falsify_grid(lyap, ctrl, res, m.spec, 0.05, 0.01, 0.1, 0.01);
  CHECK_FALSE(result.counterexample.has_value());
  CHECK(result.checked_points > 0);
  CHECK(result.margin_min > 0.0);
}

TEST_CASE("export refuses oversized phi networks") {
  SmallModel m("pendulum");
  lyapnet::LyapunovNet wide = lyapnet::LyapunovNet::make(2, 1e-6, {64, 64, 64});
  ParamStore params;
  wide.init(params, 3);
  // Borrow controller/residual params from the small model.
  for (int i = 0; i < m.params.size(); ++i) {
    if (m.params.name(i).rfind("lyap.", 0) != 0) params.add(m.params.name(i), m.params.value(i));
  }
  ExportOptions opts;
  CHECK_THROWS_AS(export_smt2(wide, m.ctrl, m.res, params, m.spec, 0.5, 0.1, opts,
                              "/tmp/roaforge_refuse.smt2"),
                  std::invalid_argument);
}

TEST_CASE("export writes a parseable file equivalent to direct evaluation") {
  SmallModel m("pendulum");
  const lyapnet::LyapunovEval lyap(m.lyap, m.params);
  const lyapnet::ControllerEval ctrl(m.ctrl, m.params);
  const lyapnet::ResidualEval res(m.res, m.params);

  const std::string path =
      (std::filesystem::temp_directory_path() / "roaforge_export.smt2").string();
  ExportOptions opts;
  opts.zeta = 0.3;
  opts.precision = 1e-3;
  const double c = 0.7, kappa = 0.1;
  export_smt2(m.lyap, m.ctrl, m.res, m.params, m.spec, c, kappa, opts, path);

  const SmtDocument doc = read_smt2(path);
  CHECK(doc.variables.size() == 2);  // exactly n state variables
  REQUIRE(doc.asserts.size() == 4);
  REQUIRE(doc.defined.count("V") == 1);
  REQUIRE(doc.defined.count("vdot") == 1);
  REQUIRE(doc.defined.count("u") == 1);
  CHECK(std::count(doc.all_commands.begin(), doc.all_commands.end(), "check-sat") == 1);

  std::mt19937_64 rng(53);
  for (int trial = 0; trial < 100; ++trial) {
    const Vec x = random_state(m.spec, rng);
    const double lhs = eval_defined_fun(doc, "vdot", x) +
                       kappa * eval_defined_fun(doc, "normsq", x);
    const double direct =
        lyapnet::vdot_hat(lyap, ctrl, res, m.spec, x) + kappa * x.squaredNorm();
    CHECK(lhs == doctest::Approx(direct).epsilon(1e-9));

    CHECK(eval_defined_fun(doc, "V", x) == doctest::Approx(lyap.value(x)).epsilon(1e-9));
    CHECK(eval_defined_fun(doc, "u", x) == doctest::Approx(ctrl(x)(0)).epsilon(1e-9));

    // Whole-conjunction equivalence with the Eq-15 predicate.
    const bool direct_pred = x.norm() >= opts.zeta && lyap.value(x) <= c &&
                             lyapnet::vdot_hat(lyap, ctrl, res, m.spec, x) +
                                     kappa * x.squaredNorm() >=
                                 0.0;
    CHECK(eval_conjunction(doc, x) == direct_pred);
  }
  std::filesystem::remove(path);
}

TEST_CASE("header comments carry zeta and precision") {
  SmallModel m("pendulum");
  const std::string path =
      (std::filesystem::temp_directory_path() / "roaforge_header.smt2").string();
  ExportOptions opts;
  opts.zeta = 0.3;
  opts.precision = 1e-3;
  export_smt2(m.lyap, m.ctrl, m.res, m.params, m.spec, 0.5, 0.1, opts, path);
  std::ifstream f(path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  CHECK(text.find("; zeta: 0.3") != std::string::npos);
  CHECK(text.find("; precision: 0.001") != std::string::npos);
  CHECK(text.find("(set-logic QF_NRA)") != std::string::npos);
  CHECK(text.find('\r') == std::string::npos);  // LF endings only
  std::filesystem::remove(path);
}
