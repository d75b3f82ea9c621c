#include "roaforge/roa.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

namespace roaforge::roa {

namespace {
constexpr double kLevelShrink = 1.0 - 1e-9;
constexpr double kBisectTolV = 1e-6;
}  // namespace

Mat Mesh::points_matrix() const {
  require(!points.empty(), "empty mesh");
  Mat X(points.front().size(), static_cast<Eigen::Index>(points.size()));
  for (std::size_t j = 0; j < points.size(); ++j) X.col(static_cast<Eigen::Index>(j)) = points[j];
  return X;
}

Mesh build_mesh(const dynamics::SystemSpec& spec, const std::vector<int>& points_per_dim) {
  require(static_cast<int>(points_per_dim.size()) == spec.n,
          "mesh dims must match the state dimension");
  Mesh mesh;
  mesh.dims = points_per_dim;
  std::size_t total = 1;
  mesh.tau = 0.0;
  std::vector<double> spacing(static_cast<std::size_t>(spec.n));
  for (int d = 0; d < spec.n; ++d) {
    const int nd = points_per_dim[static_cast<std::size_t>(d)];
    require(nd >= 2, "mesh needs at least two points per dimension");
    const auto& [lo, hi] = spec.state_box[static_cast<std::size_t>(d)];
    require(hi > lo, "degenerate state box");
    spacing[static_cast<std::size_t>(d)] = (hi - lo) / static_cast<double>(nd - 1);
    mesh.tau = std::max(mesh.tau, spacing[static_cast<std::size_t>(d)]);
    total *= static_cast<std::size_t>(nd);
  }
  mesh.points.reserve(total);
  mesh.boundary_face.reserve(total);
  std::vector<int> idx(static_cast<std::size_t>(spec.n), 0);
  for (std::size_t k = 0; k < total; ++k) {
    Vec x(spec.n);
    bool on_face = false;
    for (int d = 0; d < spec.n; ++d) {
      const int i = idx[static_cast<std::size_t>(d)];
      const auto& [lo, hi] = spec.state_box[static_cast<std::size_t>(d)];
      (void)hi;
      x(d) = lo + spacing[static_cast<std::size_t>(d)] * static_cast<double>(i);
      if (i == 0 || i == mesh.dims[static_cast<std::size_t>(d)] - 1) on_face = true;
    }
    mesh.points.push_back(std::move(x));
    mesh.boundary_face.push_back(on_face);
    // Lexicographic increment, last dimension fastest.
    for (int d = spec.n - 1; d >= 0; --d) {
      if (++idx[static_cast<std::size_t>(d)] < mesh.dims[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
  mesh.labels.assign(total, dynamics::StabilityLabel::unstable);
  mesh.v_values.setZero(static_cast<Eigen::Index>(total));
  mesh.vdot_values.setZero(static_cast<Eigen::Index>(total));
  return mesh;
}

void populate_values(Mesh& mesh, const lyapnet::LyapunovEval& lyap,
                     const lyapnet::ControllerEval& ctrl, const lyapnet::ResidualEval& res,
                     const dynamics::SystemSpec& spec) {
  const Mat X = mesh.points_matrix();
  mesh.v_values = lyap.value_batch(X);
  mesh.vdot_values = lyapnet::vdot_hat_batch(lyap, ctrl, res, spec, X);
}

void populate_values_quadratic(Mesh& mesh, const Mat& P, const lyapnet::ControllerEval& ctrl,
                               const lyapnet::ResidualEval& res,
                               const dynamics::SystemSpec& spec) {
  const Mat X = mesh.points_matrix();
  mesh.v_values = (X.cwiseProduct(P * X)).colwise().sum();
  const Mat grads = 2.0 * (P * X);
  const Eigen::RowVectorXd u = ctrl.eval_batch(X);
  Mat field = res.f_hat_batch(spec, X);
  const Mat ghat = res.g_hat_batch(spec, X);
  field.array() += ghat.array().rowwise() * u.array();
  mesh.vdot_values = (grads.cwiseProduct(field)).colwise().sum();
}

RoaReport level_search(const Mesh& mesh, double kappa) {
  const std::size_t n = mesh.size();
  require(mesh.v_values.size() == static_cast<Eigen::Index>(n) &&
              mesh.labels.size() == n,
          "level_search needs populated values and labels");

  double cap = std::numeric_limits<double>::infinity();
  double best_good = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = mesh.v_values(static_cast<Eigen::Index>(i));
    const double decrease_rhs = -kappa * mesh.points[i].squaredNorm();
    const bool good = dynamics::is_stable(mesh.labels[i]) &&
                      mesh.vdot_values(static_cast<Eigen::Index>(i)) <= decrease_rhs;
    if (!good) cap = std::min(cap, v);
    if (mesh.boundary_face[i]) cap = std::min(cap, v);
    if (good) best_good = std::max(best_good, v);
  }

  double c = 0.0;
  if (std::isfinite(cap) && cap > 0.0 && best_good > -std::numeric_limits<double>::infinity()) {
    c = cap * kLevelShrink;
  } else if (!std::isfinite(cap)) {
    // No violations and no boundary faces cannot happen for a box mesh, but
    // guard anyway: fall back to the largest good value.
    c = std::max(0.0, best_good);
  }
  if (c < 0.0) c = 0.0;

  RoaReport report = roa_ratios(mesh, c);
  report.c = c;
  report.certified = c > 0.0;
  return report;
}

RoaReport roa_ratios(const Mesh& mesh, double c) {
  RoaReport r;
  const auto total = static_cast<double>(mesh.size());
  std::size_t stable = 0, fi = 0, inside = 0;
  for (std::size_t i = 0; i < mesh.size(); ++i) {
    if (dynamics::is_stable(mesh.labels[i])) ++stable;
    if (mesh.labels[i] == dynamics::StabilityLabel::fi_stable) ++fi;
    if (mesh.v_values(static_cast<Eigen::Index>(i)) <= c) ++inside;
  }
  r.c = c;
  r.ratio_true = 100.0 * static_cast<double>(stable) / total;
  r.ratio_fi = 100.0 * static_cast<double>(fi) / total;
  r.ratio_estimated = 100.0 * static_cast<double>(inside) / total;
  return r;
}

std::vector<Vec> sample_level_boundary(const lyapnet::LyapunovEval& lyap,
                                       const dynamics::SystemSpec& spec, double c, int count,
                                       std::uint64_t seed) {
  std::vector<Vec> out;
  if (c <= 0.0 || count <= 0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int max_attempts = count * 200;
  for (int attempt = 0; attempt < max_attempts && static_cast<int>(out.size()) < count;
       ++attempt) {
    Vec dir(spec.n);
    for (int i = 0; i < spec.n; ++i) dir(i) = gauss(rng);
    const double norm = dir.norm();
    if (norm < 1e-12) continue;
    dir /= norm;

    // March outward until V >= c or the ray exits the box.
    double t_hi = 0.0;
    const double step = 1e-2 * spec.box_diagonal();
    bool bracketed = false;
    for (double t = step; t <= spec.box_diagonal(); t += step) {
      const Vec x = t * dir;
      if (!spec.inside_box(x)) break;
      if (lyap.value(x) >= c) {
        t_hi = t;
        bracketed = true;
        break;
      }
    }
    if (!bracketed) continue;

    double t_lo = std::max(0.0, t_hi - step);
    for (int it = 0; it < 200; ++it) {
      const double t_mid = 0.5 * (t_lo + t_hi);
      const double v = lyap.value(t_mid * dir);
      if (std::abs(v - c) <= kBisectTolV) {
        t_lo = t_hi = t_mid;
        break;
      }
      (v < c ? t_lo : t_hi) = t_mid;
    }
    out.push_back(0.5 * (t_lo + t_hi) * dir);
  }
  return out;
}

IssCertificate iss_margin(const lyapnet::LyapunovEval& lyap, const lyapnet::ControllerEval& ctrl,
                          const lyapnet::ResidualEval& res, const dynamics::SystemSpec& spec,
                          double c, int samples, double kappa, std::uint64_t seed) {
  require(c > 0.0, "iss_margin needs a positive level");
  require(kappa > 0.0, "iss_margin needs kappa > 0");
  IssCertificate cert;
  cert.alpha_q_gain = 0.5 * kappa;
  cert.boundary_requested = samples / 10 + 1;

  std::mt19937_64 rng(split_seed(seed, 0xA11CE));
  std::vector<std::uniform_real_distribution<double>> dims;
  dims.reserve(static_cast<std::size_t>(spec.n));
  for (int d = 0; d < spec.n; ++d) {
    dims.emplace_back(spec.state_box[static_cast<std::size_t>(d)].first,
                      spec.state_box[static_cast<std::size_t>(d)].second);
  }

  auto disturbance = [&](const Vec& x) {
    const Vec u = ctrl(x);
    const Vec true_field = dynamics::eval_field(spec, dynamics::Field::true_plant, x, u);
    const Vec est_field = res.f_hat(spec, x) + res.g_hat(spec, x) * u(0);
    return (true_field - est_field).norm();
  };

  const int max_attempts = samples * 100;
  int found = 0;
  for (int attempt = 0; attempt < max_attempts && found < samples; ++attempt) {
    Vec x(spec.n);
    for (int d = 0; d < spec.n; ++d) x(d) = dims[static_cast<std::size_t>(d)](rng);
    if (lyap.value(x) > c) continue;
    ++found;
    cert.l_v = std::max(cert.l_v, lyap.grad(x).norm());
    cert.d_max = std::max(cert.d_max, disturbance(x));
  }
  cert.interior_samples = found;

  const auto boundary =
      sample_level_boundary(lyap, spec, c, cert.boundary_requested, split_seed(seed, 0xB0DE));
  cert.boundary_samples = static_cast<int>(boundary.size());
  cert.boundary_min_norm = std::numeric_limits<double>::infinity();
  for (const Vec& x : boundary) {
    cert.boundary_min_norm = std::min(cert.boundary_min_norm, x.norm());
    cert.l_v = std::max(cert.l_v, lyap.grad(x).norm());
    cert.d_max = std::max(cert.d_max, disturbance(x));
  }
  if (boundary.empty()) cert.boundary_min_norm = 0.0;

  cert.margin = cert.boundary_min_norm - std::sqrt(2.0 * cert.l_v * cert.d_max / kappa);
  cert.holds = cert.margin >= 0.0 && cert.boundary_samples > 0;
  return cert;
}

ViolationBound violation_bound(const Mesh& mesh, double c, double kappa,
                               const IssCertificate& cert) {
  require(c > 0.0, "violation_bound needs a positive level");
  ViolationBound vb;
  for (std::size_t i = 0; i < mesh.size(); ++i) {
    if (mesh.v_values(static_cast<Eigen::Index>(i)) > c) continue;
    const double violation = mesh.vdot_values(static_cast<Eigen::Index>(i)) +
                             kappa * mesh.points[i].squaredNorm();
    vb.delta_prime = std::max(vb.delta_prime, violation);
  }
  const double delta = cert.l_v * cert.d_max;
  vb.bounded =
      cert.boundary_min_norm >= std::sqrt(2.0 * (delta + vb.delta_prime) / kappa) &&
      cert.boundary_samples > 0;
  return vb;
}

BoundaryCheck boundary_rollouts(const lyapnet::LyapunovEval& lyap,
                                const dynamics::SystemSpec& rollout_spec,
                                const dynamics::Controller& ctrl, double c, int count,
                                double slack, const dynamics::RolloutOptions& opts,
                                std::uint64_t seed) {
  BoundaryCheck check;
  check.starts = sample_level_boundary(lyap, rollout_spec, c, count, seed);
  check.total = static_cast<int>(check.starts.size());
  dynamics::RolloutOptions ropts = opts;
  ropts.stop_on_box_exit = false;  // invariance is judged on V, not the box
  for (const Vec& x0 : check.starts) {
    dynamics::Trajectory traj =
        dynamics::rk4_rollout(rollout_spec, dynamics::Field::true_plant, ctrl, x0, ropts);
    bool stayed = true;
    for (const Vec& x : traj.states) {
      if (!x.allFinite() || lyap.value(x) > c + slack) {
        stayed = false;
        break;
      }
    }
    if (stayed) ++check.stayed;
    if (traj.converged) ++check.converged;
    check.trajectories.push_back(std::move(traj));
  }
  return check;
}

void write_mesh_csv(const std::string& path, const Mesh& mesh) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot open mesh CSV for writing: " + path);
  const int n = mesh.points.empty() ? 0 : static_cast<int>(mesh.points.front().size());
  for (int i = 1; i <= n; ++i) f << "x" << i << ",";
  f << "V,Vdot_hat,label\n";
  char buf[64];
  for (std::size_t k = 0; k < mesh.size(); ++k) {
    for (int i = 0; i < n; ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", mesh.points[k](i));
      f << buf << ",";
    }
    std::snprintf(buf, sizeof(buf), "%.17g", mesh.v_values(static_cast<Eigen::Index>(k)));
    f << buf << ",";
    std::snprintf(buf, sizeof(buf), "%.17g", mesh.vdot_values(static_cast<Eigen::Index>(k)));
    f << buf << ",";
    switch (mesh.labels[k]) {
      case dynamics::StabilityLabel::unstable: f << "unstable"; break;
      case dynamics::StabilityLabel::stable: f << "stable"; break;
      case dynamics::StabilityLabel::fi_stable: f << "fi_stable"; break;
    }
    f << "\n";
  }
}

}  // namespace roaforge::roa
