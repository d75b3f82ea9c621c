#include "roaforge/dynamics.hpp"

#include "roaforge/parallel.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace roaforge::dynamics {

namespace {

constexpr double kGravity = 9.81;

double get(const std::map<std::string, double>& p, const std::string& key, double fallback) {
  auto it = p.find(key);
  if (it == p.end()) return fallback;
  require(std::isfinite(it->second), "non-finite plant parameter: " + key);
  return it->second;
}

SystemSpec make_pendulum(const std::map<std::string, double>& p) {
  SystemSpec s;
  s.name = "pendulum";
  s.n = 2;
  s.m = 1;
  const double m = get(p, "m", 1.0);
  const double l = get(p, "l", 0.5);
  const double mn = get(p, "m_nom", 0.8);
  const double ln = get(p, "l_nom", 0.4);
  const double g = get(p, "gravity", kGravity);
  s.params = {{"m", m}, {"l", l}, {"m_nom", mn}, {"l_nom", ln}, {"gravity", g}};

  auto field = [g](double len) {
    return [g, len](const Vec& x) {
      Vec dx(2);
      dx(0) = x(1);
      dx(1) = (g / len) * std::sin(x(0));
      return dx;
    };
  };
  auto gain = [](double mass, double len) {
    return [mass, len](const Vec&) {
      Mat gm(2, 1);
      gm << 0.0, 1.0 / (mass * len * len);
      return gm;
    };
  };
  s.true_f = field(l);
  s.true_g = gain(m, l);
  s.nominal_f0 = field(ln);
  s.nominal_g0 = gain(mn, ln);
  s.state_box = {{-M_PI, M_PI}, {-M_PI, M_PI}};
  s.residual_f_mask = {1};
  s.residual_g_shape = ResidualGShape::scalar;
  s.residual_g_mask = {1};
  s.equilibrium_input = Vec::Zero(1);
  return s;
}

SystemSpec make_strict_feedback(const std::map<std::string, double>& p) {
  SystemSpec s;
  s.name = "strict_feedback";
  s.n = 3;
  s.m = 1;
  const double e1 = get(p, "e1", 1.0);
  const double e2 = get(p, "e2", 1.0);
  const double e3 = get(p, "e3", 1.0);
  const double e4 = get(p, "e4", 1.0);
  const double e1n = get(p, "e1_nom", 0.9);
  const double e2n = get(p, "e2_nom", 0.8);
  const double e3n = get(p, "e3_nom", 0.9);
  const double e4n = get(p, "e4_nom", 0.8);
  s.params = {{"e1", e1}, {"e2", e2}, {"e3", e3}, {"e4", e4},
              {"e1_nom", e1n}, {"e2_nom", e2n}, {"e3_nom", e3n}, {"e4_nom", e4n}};

  auto field = [](double a1, double a2, double a3) {
    return [a1, a2, a3](const Vec& x) {
      Vec dx(3);
      dx(0) = a1 * x(1);
      dx(1) = a2 * x(2);
      dx(2) = a3 * x(0) * x(0);
      return dx;
    };
  };
  auto gain = [](double a4) {
    return [a4](const Vec&) {
      Mat gm(3, 1);
      gm << 0.0, 0.0, a4;
      return gm;
    };
  };
  s.true_f = field(e1, e2, e3);
  s.true_g = gain(e4);
  s.nominal_f0 = field(e1n, e2n, e3n);
  s.nominal_g0 = gain(e4n);
  s.state_box = {{-1.5, 1.5}, {-1.5, 1.5}, {-2.0, 2.0}};
  s.residual_f_mask = {0, 1, 2};
  s.residual_g_shape = ResidualGShape::scalar;
  s.residual_g_mask = {2};
  s.equilibrium_input = Vec::Zero(1);
  return s;
}

// Cart-pole accelerations from the coupled pair
//   (M+m) vdot - m l wdot cos t + m l w^2 sin t + b_c v = u
//   l wdot - g sin t = vdot cos t
// solved in closed form; the pair's 2x2 mass matrix has determinant
// m l^2 ((M+m) - m cos^2 t) which stays positive on the whole state box.
struct CartPoleParams {
  double M, m, l, bc, g;
};

Vec cartpole_field(const CartPoleParams& cp, const Vec& x, double u) {
  const double theta = x(0), omega = x(1), v = x(3);
  const double st = std::sin(theta), ct = std::cos(theta);
  const double den = cp.M + cp.m - cp.m * ct * ct;
  require(std::abs(den) > 1e-12, "cart-pole mass matrix singular");
  const double vdot =
      (u + cp.m * st * (cp.g * ct - cp.l * omega * omega) - cp.bc * v) / den;
  const double wdot = (cp.g * st + vdot * ct) / cp.l;
  Vec dx(4);
  dx << omega, wdot, v, vdot;
  return dx;
}

SystemSpec make_cartpole(const std::map<std::string, double>& p) {
  SystemSpec s;
  s.name = "cartpole";
  s.n = 4;
  s.m = 1;
  const double g = get(p, "gravity", kGravity);
  const CartPoleParams tru{get(p, "M", 1.0), get(p, "m", 0.3), get(p, "l", 1.0),
                           get(p, "b_c", 0.0), g};
  const CartPoleParams nom{get(p, "M_nom", 0.8), get(p, "m_nom", 0.27), get(p, "l_nom", 0.8),
                           get(p, "b_c_nom", 0.0), g};
  s.params = {{"M", tru.M},     {"m", tru.m},     {"l", tru.l},     {"b_c", tru.bc},
              {"M_nom", nom.M}, {"m_nom", nom.m}, {"l_nom", nom.l}, {"b_c_nom", nom.bc},
              {"gravity", g}};

  auto drift = [](CartPoleParams cp) {
    return [cp](const Vec& x) { return cartpole_field(cp, x, 0.0); };
  };
  auto gain = [](CartPoleParams cp) {
    return [cp](const Vec& x) {
      // Column of the input matrix: field is affine in u.
      Vec with = cartpole_field(cp, x, 1.0);
      Vec without = cartpole_field(cp, x, 0.0);
      Mat gm(4, 1);
      gm.col(0) = with - without;
      return gm;
    };
  };
  s.true_f = drift(tru);
  s.true_g = gain(tru);
  s.nominal_f0 = drift(nom);
  s.nominal_g0 = gain(nom);
  s.state_box = {{-M_PI / 6.0, M_PI / 6.0}, {-1.0, 1.0}, {-1.0, 1.0}, {-1.5, 1.5}};
  s.residual_f_mask = {1, 3};
  s.residual_g_shape = ResidualGShape::masked_net;
  s.residual_g_mask = {1, 3};
  s.equilibrium_input = Vec::Zero(1);
  return s;
}

}  // namespace

bool SystemSpec::inside_box(const Vec& x) const {
  for (int i = 0; i < n; ++i) {
    if (x(i) < state_box[static_cast<std::size_t>(i)].first ||
        x(i) > state_box[static_cast<std::size_t>(i)].second)
      return false;
  }
  return true;
}

Vec SystemSpec::box_center_halfwidth(int dim) const {
  const auto& [lo, hi] = state_box[static_cast<std::size_t>(dim)];
  Vec out(2);
  out << 0.5 * (lo + hi), 0.5 * (hi - lo);
  return out;
}

double SystemSpec::box_diagonal() const {
  double s = 0.0;
  for (const auto& [lo, hi] : state_box) s += (hi - lo) * (hi - lo);
  return std::sqrt(s);
}

SystemSpec make_system(const std::string& name, const std::map<std::string, double>& params) {
  if (name == "pendulum") return make_pendulum(params);
  if (name == "strict_feedback") return make_strict_feedback(params);
  if (name == "cartpole") return make_cartpole(params);
  throw std::invalid_argument("unknown system: " + name);
}

Vec eval_field(const SystemSpec& spec, Field which, const Vec& x, const Vec& u) {
  require(x.size() == spec.n, "state dimension mismatch");
  require(u.size() == spec.m, "input dimension mismatch");
  if (which == Field::true_plant) return spec.true_f(x) + spec.true_g(x) * u;
  return spec.nominal_f0(x) + spec.nominal_g0(x) * u;
}

Vec rk4_step(const SystemSpec& spec, Field which, const Controller& controller, const Vec& x,
             double dt) {
  const Vec k1 = eval_field(spec, which, x, controller(x));
  const Vec x2 = x + 0.5 * dt * k1;
  const Vec k2 = eval_field(spec, which, x2, controller(x2));
  const Vec x3 = x + 0.5 * dt * k2;
  const Vec k3 = eval_field(spec, which, x3, controller(x3));
  const Vec x4 = x + dt * k3;
  const Vec k4 = eval_field(spec, which, x4, controller(x4));
  return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

Trajectory rk4_rollout(const SystemSpec& spec, Field which, const Controller& controller,
                       const Vec& x0, const RolloutOptions& opts) {
  require(opts.dt > 0.0, "rollout needs dt > 0");
  require(opts.horizon >= opts.dt, "rollout needs horizon >= dt");

  Trajectory traj;
  traj.dt = opts.dt;
  traj.states.push_back(x0);

  const int max_steps = static_cast<int>(std::llround(opts.horizon / opts.dt));
  const double escape = opts.escape_factor * spec.box_diagonal();
  int settled = (x0.norm() <= opts.r_conv) ? 1 : 0;
  if (settled >= opts.settle_window) {
    traj.converged = true;
    return traj;
  }

  Vec x = x0;
  for (int k = 0; k < max_steps; ++k) {
    traj.inputs.push_back(controller(x));
    x = rk4_step(spec, which, controller, x, opts.dt);
    if (!x.allFinite()) {
      // Diverged: record the exit and stop.
      traj.left_box = true;
      traj.states.push_back(Vec::Constant(spec.n, std::numeric_limits<double>::quiet_NaN()));
      return traj;
    }
    traj.states.push_back(x);
    if (!spec.inside_box(x)) {
      traj.left_box = true;
      if (opts.stop_on_box_exit) return traj;
      if (x.norm() > escape) return traj;
    }
    if (x.norm() <= opts.r_conv) {
      if (++settled >= opts.settle_window) {
        traj.converged = true;
        return traj;
      }
    } else {
      settled = 0;
    }
  }
  return traj;
}

Trajectory rk4_rollout(const SystemSpec& spec, Field which, const Controller& controller,
                       const Vec& x0, double dt, double horizon) {
  RolloutOptions opts;
  opts.dt = dt;
  opts.horizon = horizon;
  return rk4_rollout(spec, which, controller, x0, opts);
}

ClassifyResult classify_stable(const SystemSpec& spec, const Controller& controller,
                               const std::vector<Vec>& starts, const ClassifyOptions& opts) {
  ClassifyResult result;
  result.labels.assign(starts.size(), StabilityLabel::unstable);

  RolloutOptions ropts = opts.rollout;
  ropts.stop_on_box_exit = false;  // convergence may happen after an excursion

  std::vector<std::vector<ClassifyResult::Pair>> pair_buckets(starts.size());

  parallel_for(
      starts.size(),
      [&](std::size_t i) {
        const Trajectory traj = rk4_rollout(spec, Field::true_plant, controller, starts[i], ropts);
        if (traj.converged) {
          result.labels[i] =
              traj.left_box ? StabilityLabel::stable : StabilityLabel::fi_stable;
        }
        if (opts.collect_pairs) {
          auto& bucket = pair_buckets[i];
          const int stride = std::max(1, opts.pair_stride);
          for (std::size_t k = 0; k + 1 < traj.states.size(); k += static_cast<std::size_t>(stride)) {
            if (static_cast<int>(bucket.size()) >= opts.max_pairs_per_traj) break;
            const Vec& a = traj.states[k];
            const Vec& b = traj.states[k + 1];
            if (!a.allFinite() || !b.allFinite()) break;
            if (!spec.inside_box(a) || !spec.inside_box(b)) continue;
            bucket.push_back({static_cast<int>(i), a, b});
          }
        }
      },
      opts.threads);

  if (opts.collect_pairs) {
    for (auto& bucket : pair_buckets) {
      for (auto& p : bucket) result.pairs.push_back(std::move(p));
    }
  }
  return result;
}

void write_trajectory_csv(const std::string& path, const Trajectory& traj) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot open trajectory CSV for writing: " + path);
  const int n = traj.states.empty() ? 0 : static_cast<int>(traj.states.front().size());
  const int m = traj.inputs.empty() ? 0 : static_cast<int>(traj.inputs.front().size());
  f << "t";
  for (int i = 1; i <= n; ++i) f << ",x" << i;
  for (int i = 1; i <= m; ++i) f << ",u" << i;
  f << "\n";
  char buf[64];
  for (std::size_t k = 0; k < traj.states.size(); ++k) {
    std::snprintf(buf, sizeof(buf), "%.17g", traj.t0 + static_cast<double>(k) * traj.dt);
    f << buf;
    for (int i = 0; i < n; ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", traj.states[k](i));
      f << "," << buf;
    }
    if (k < traj.inputs.size()) {
      for (int i = 0; i < m; ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", traj.inputs[k](i));
        f << "," << buf;
      }
    } else {
      for (int i = 0; i < m; ++i) f << ",";
    }
    f << "\n";
  }
}

}  // namespace roaforge::dynamics
