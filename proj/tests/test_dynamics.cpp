#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "roaforge/dynamics.hpp"
#include "roaforge/lqr.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

using namespace roaforge;
using namespace roaforge::dynamics;

namespace {

Vec state2(double a, double b) {
  Vec x(2);
  x << a, b;
  return x;
}

Controller zero_controller(int m) {
  return [m](const Vec&) { return Vec::Zero(m); };
}

}  // namespace

TEST_CASE("make_system populates the published plant constants") {
  const SystemSpec p = make_system("pendulum");
  CHECK(p.n == 2);
  CHECK(p.m == 1);
  CHECK(p.state_box[0].first == doctest::Approx(-M_PI));
  CHECK(p.state_box[1].second == doctest::Approx(M_PI));
  // True vs nominal gain rows encode (m, l) = (1, 0.5) vs (0.8, 0.4).
  const Vec x0 = Vec::Zero(2);
  CHECK(p.true_g(x0)(1, 0) == doctest::Approx(1.0 / (1.0 * 0.25)));
  CHECK(p.nominal_g0(x0)(1, 0) == doctest::Approx(1.0 / (0.8 * 0.16)));

  const SystemSpec c = make_system("cartpole");
  CHECK(c.n == 4);
  CHECK(c.state_box[0].second == doctest::Approx(M_PI / 6.0));
  CHECK(c.state_box[1].second == doctest::Approx(1.0));
  CHECK(c.state_box[2].second == doctest::Approx(1.0));
  CHECK(c.state_box[3].second == doctest::Approx(1.5));

  CHECK_THROWS(make_system("rocket"));
  CHECK_THROWS(make_system("pendulum", {{"m", std::nan("")}}));
}

TEST_CASE("identical parameters make true and nominal fields agree pointwise") {
  const SystemSpec p =
      make_system("pendulum", {{"m", 1.0}, {"l", 0.5}, {"m_nom", 1.0}, {"l_nom", 0.5}});
  Vec u(1);
  u << 0.37;
  for (double th : {-2.0, -0.5, 0.0, 1.0, 3.0}) {
    for (double om : {-1.0, 0.0, 2.0}) {
      const Vec x = state2(th, om);
      CHECK((eval_field(p, Field::true_plant, x, u) - eval_field(p, Field::nominal, x, u))
                .norm() == doctest::Approx(0.0));
    }
  }
}

TEST_CASE("eval_field matches hand-evaluated plant formulas") {
  const SystemSpec p = make_system("pendulum");
  Vec u(1);
  u << 0.0;
  CHECK(eval_field(p, Field::true_plant, state2(0, 0), u).norm() == doctest::Approx(0.0));
  const Vec dx = eval_field(p, Field::true_plant, state2(M_PI / 2.0, 0.0), u);
  CHECK(dx(0) == doctest::Approx(0.0));
  CHECK(dx(1) == doctest::Approx(19.62));

  const SystemSpec s = make_system("strict_feedback");
  Vec x3(3);
  x3 << 0.5, 0.0, 0.0;
  const Vec ds = eval_field(s, Field::true_plant, x3, u);
  CHECK(ds(0) == doctest::Approx(0.0));
  CHECK(ds(1) == doctest::Approx(0.0));
  CHECK(ds(2) == doctest::Approx(0.25));
}

TEST_CASE("equilibrium preserved for every plant") {
  for (const char* name : {"pendulum", "strict_feedback", "cartpole"}) {
    const SystemSpec spec = make_system(name);
    const Vec dx = eval_field(spec, Field::true_plant, Vec::Zero(spec.n),
                              spec.equilibrium_input);
    CHECK(dx.norm() <= 1e-14);
    const Vec dn = eval_field(spec, Field::nominal, Vec::Zero(spec.n), spec.equilibrium_input);
    CHECK(dn.norm() <= 1e-14);
  }
}

TEST_CASE("rollout stays at the origin and converges trivially") {
  const SystemSpec p = make_system("pendulum");
  const Trajectory t = rk4_rollout(p, Field::true_plant, zero_controller(1), Vec::Zero(2), 0.01, 2.0);
  CHECK(t.converged);
  CHECK_FALSE(t.left_box);
  for (const Vec& x : t.states) CHECK(x.norm() <= 1e-12);
}

TEST_CASE("uncontrolled upright pendulum leaves the origin neighborhood") {
  const SystemSpec p = make_system("pendulum");
  const Trajectory t =
      rk4_rollout(p, Field::true_plant, zero_controller(1), state2(0.3, 0.0), 0.01, 5.0);
  CHECK_FALSE(t.converged);
  double max_norm = 0.0;
  for (const Vec& x : t.states) max_norm = std::max(max_norm, x.norm());
  CHECK(max_norm > 1.0);
}

TEST_CASE("LQR locally stabilizes the pendulum") {
  const SystemSpec p = make_system("pendulum");
  const auto lin = lqr::linearize(p);
  const auto sol = lqr::solve_care(lin, Mat::Identity(2, 2), Mat::Identity(1, 1));
  Controller ctrl = [K = sol.K](const Vec& x) { return Vec(-(K * x)); };
  const Trajectory t = rk4_rollout(p, Field::true_plant, ctrl, state2(0.1, 0.0), 0.01, 20.0);
  CHECK(t.converged);
  CHECK_FALSE(t.left_box);
}

TEST_CASE("trajectory shape invariant holds") {
  const SystemSpec p = make_system("pendulum");
  const Trajectory t =
      rk4_rollout(p, Field::true_plant, zero_controller(1), state2(0.2, 0.1), 0.01, 1.0);
  CHECK(t.states.size() == t.inputs.size() + 1);
}

TEST_CASE("RK4 is fourth order on the pendulum") {
  const SystemSpec p = make_system("pendulum");
  const Controller u0 = zero_controller(1);
  const Vec x0 = state2(0.5, 0.2);

  auto reference = [&](double dt) {
    Vec x = x0;
    for (int i = 0; i < 100; ++i) x = rk4_step(p, Field::true_plant, u0, x, dt / 100.0);
    return x;
  };
  const double dt = 0.05;
  const double e1 = (rk4_step(p, Field::true_plant, u0, x0, dt) - reference(dt)).norm();
  // Error over the same interval with two half steps.
  Vec xh = rk4_step(p, Field::true_plant, u0, x0, dt / 2.0);
  xh = rk4_step(p, Field::true_plant, u0, xh, dt / 2.0);
  const double e2 = (xh - reference(dt)).norm();
  CHECK(e1 / e2 >= 8.0);
}

TEST_CASE("cart-pole energy drifts less than 0.1% over one second") {
  const SystemSpec c = make_system("cartpole");
  const double M = 1.0, m = 0.3, l = 1.0, g = 9.81;
  auto energy = [&](const Vec& x) {
    const double th = x(0), w = x(1), v = x(3);
    return 0.5 * (M + m) * v * v - m * l * w * v * std::cos(th) + 0.5 * m * l * l * w * w +
           m * g * l * std::cos(th);
  };
  Vec x(4);
  x << 0.1, 0.0, 0.0, 0.2;
  const double e0 = energy(x);
  const Controller u0 = zero_controller(1);
  double max_drift = 0.0;
  for (int i = 0; i < 1000; ++i) {
    x = rk4_step(c, Field::true_plant, u0, x, 1e-3);
    max_drift = std::max(max_drift, std::abs(energy(x) - e0));
  }
  CHECK(max_drift / std::abs(e0) < 1e-3);
}

TEST_CASE("classification labels origin and diverging starts correctly") {
  const SystemSpec p = make_system("pendulum");
  std::vector<Vec> starts;
  starts.push_back(Vec::Zero(2));
  for (double th = -3.0; th <= 3.0; th += 1.0) {
    for (double om = -3.0; om <= 3.0; om += 1.5) {
      if (th == 0.0 && om == 0.0) continue;
      starts.push_back(state2(th, om));
    }
  }
  ClassifyOptions opts;
  opts.rollout.horizon = 10.0;
  const ClassifyResult r = classify_stable(p, zero_controller(1), starts, opts);
  CHECK(r.labels[0] == StabilityLabel::fi_stable);
  int stable = 0;
  for (std::size_t i = 1; i < r.labels.size(); ++i) {
    if (is_stable(r.labels[i])) ++stable;
  }
  CHECK(stable == 0);  // no torque, upright equilibrium: nothing else converges
}

TEST_CASE("classification is deterministic across runs and thread counts") {
  const SystemSpec p = make_system("pendulum");
  const auto lin = lqr::linearize(p);
  const auto sol = lqr::solve_care(lin, Mat::Identity(2, 2), Mat::Identity(1, 1));
  Controller ctrl = [K = sol.K](const Vec& x) { return Vec(-(K * x)); };

  std::vector<Vec> starts;
  for (double th = -3.0; th <= 3.0; th += 0.75) {
    for (double om = -3.0; om <= 3.0; om += 0.75) {
      starts.push_back(state2(th, om));
    }
  }
  ClassifyOptions a;
  a.rollout.horizon = 5.0;
  a.threads = 1;
  ClassifyOptions b = a;
  b.threads = 2;
  const auto ra = classify_stable(p, ctrl, starts, a);
  const auto rb = classify_stable(p, ctrl, starts, b);
  CHECK(ra.labels == rb.labels);
}

TEST_CASE("supervision pairs come from in-box consecutive states") {
  const SystemSpec p = make_system("pendulum");
  std::vector<Vec> starts = {state2(0.4, 0.0), state2(2.0, 2.0)};
  ClassifyOptions opts;
  opts.collect_pairs = true;
  opts.pair_stride = 5;
  opts.rollout.horizon = 3.0;
  const auto r = classify_stable(p, zero_controller(1), starts, opts);
  CHECK(r.pairs.size() > 0);
  for (const auto& pr : r.pairs) {
    CHECK(p.inside_box(pr.x));
    CHECK(p.inside_box(pr.x_next));
    CHECK((pr.origin_index == 0 || pr.origin_index == 1));
  }
}

TEST_CASE("trajectory CSV has the t,x,u header layout") {
  const SystemSpec p = make_system("pendulum");
  const Trajectory t =
      rk4_rollout(p, Field::true_plant, zero_controller(1), state2(0.2, 0.0), 0.01, 0.05);
  const std::string path = "/tmp/roaforge_traj_test.csv";
  write_trajectory_csv(path, t);
  std::ifstream f(path);
  std::string header;
  std::getline(f, header);
  CHECK(header == "t,x1,x2,u1");
  int rows = 0;
  std::string line;
  while (std::getline(f, line)) ++rows;
  CHECK(rows == static_cast<int>(t.states.size()));
  std::remove(path.c_str());
}
