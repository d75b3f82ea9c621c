#include "roaforge/trainer.hpp"

#include "roaforge/log.hpp"
#include "roaforge/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

namespace roaforge::trainer {

using dynamics::ClassifyOptions;
using dynamics::ClassifyResult;
using dynamics::StabilityLabel;
using lyapnet::ControllerEval;
using lyapnet::LyapunovEval;
using lyapnet::ResidualEval;
using netcore::GradMap;
using netcore::ParamStore;

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Groups {
  std::vector<int> lyap;      // theta_3
  std::vector<int> ctrl;      // theta_4
  std::vector<int> residual;  // theta_1 and theta_2
  std::vector<int> lyap_ctrl;
};

Groups make_groups(const ParamStore& params) {
  Groups g;
  g.lyap = params.group("lyap.");
  g.ctrl = params.group("ctrl.");
  g.residual = params.group("res.");
  g.lyap_ctrl = g.lyap;
  g.lyap_ctrl.insert(g.lyap_ctrl.end(), g.ctrl.begin(), g.ctrl.end());
  return g;
}

void clip_gradients(GradMap& grads, double clip) {
  if (clip <= 0.0) return;
  const double norm = std::sqrt(grads.squared_norm());
  if (norm > clip) grads.scale_all(clip / norm);
}

Mat gather_columns(const std::vector<Vec>& points, const std::vector<int>& indices, int lo,
                   int hi) {
  const int n = static_cast<int>(points.front().size());
  Mat X(n, hi - lo);
  for (int k = lo; k < hi; ++k) {
    X.col(k - lo) = points[static_cast<std::size_t>(indices[static_cast<std::size_t>(k)])];
  }
  return X;
}

Mat f0_batch(const dynamics::SystemSpec& spec, const Mat& X) {
  Mat f(spec.n, X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) f.col(j) = spec.nominal_f0(X.col(j));
  return f;
}

Mat g0_batch(const dynamics::SystemSpec& spec, const Mat& X) {
  Mat g(spec.n, X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) g.col(j) = spec.nominal_g0(X.col(j)).col(0);
  return g;
}

/// Lyapunov loss over a point set, evaluated batched (reporting only).
double lyapunov_loss_batched(const LyapunovEval& lyap, const ControllerEval& ctrl,
                             const ResidualEval& res, const dynamics::SystemSpec& spec,
                             const Mat& X, double lambda_roa, double lambda_lip, double kappa,
                             double epsilon) {
  const Eigen::RowVectorXd vdot = lyapnet::vdot_hat_batch(lyap, ctrl, res, spec, X);
  const Mat grads = lyap.grad_batch(X);
  double roa_term = 0.0, lip_term = 0.0;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    roa_term += std::max(0.0, vdot(j) + kappa * X.col(j).squaredNorm() + epsilon);
    lip_term += grads.col(j).norm();
  }
  const auto N = static_cast<double>(X.cols());
  return lambda_roa / N * roa_term + lambda_lip / N * lip_term;
}

double dynamics_loss_batched(const LyapunovEval& lyap, const ControllerEval& ctrl,
                             const ResidualEval& res, const dynamics::SystemSpec& spec,
                             const std::vector<lyapnet::SupervisionPair>& pairs) {
  if (pairs.empty()) return 0.0;
  const int n = static_cast<int>(pairs.front().x.size());
  Mat X(n, static_cast<Eigen::Index>(pairs.size()));
  Eigen::RowVectorXd targets(static_cast<Eigen::Index>(pairs.size()));
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    X.col(static_cast<Eigen::Index>(k)) = pairs[k].x;
    targets(static_cast<Eigen::Index>(k)) = pairs[k].target;
  }
  const Eigen::RowVectorXd vdot = lyapnet::vdot_hat_batch(lyap, ctrl, res, spec, X);
  return (vdot - targets).squaredNorm() / static_cast<double>(pairs.size());
}

}  // namespace

void TrainConfig::validate() const {
  require(lambda_roa > 0.0 && lambda_lip >= 0.0, "loss weights must be positive");
  require(a < b, "saturation thresholds need a < b");
  require(gamma > 0.0 && kappa > 0.0 && epsilon > 0.0, "gamma, kappa, epsilon must be positive");
  require(eta0 > 0.0, "eta0 must be positive");
  if (k_eta) require(*k_eta >= 1, "k_eta must be >= 1 when present");
  require(iterations >= 0, "iterations must be non-negative");
  require(dt > 0.0 && horizon >= dt, "rollout timing invalid");
  require(batch_size >= 1, "batch size must be positive");
  require(lr_lyapunov > 0.0 && lr_controller > 0.0 && lr_dynamics > 0.0, "learning rates > 0");
  require(epochs_lyapunov >= 0 && epochs_dynamics >= 0, "epoch counts must be non-negative");
  require(!mesh_dims.empty(), "mesh dims required");
}

double eta_schedule(int i, double eta0, std::optional<int> k_eta) {
  require(i >= 1, "eta schedule starts at iteration 1");
  if (!k_eta) return 1.0 + eta0;
  return 1.0 + eta0 / (1.0 + static_cast<double>(i / *k_eta));
}

dynamics::Controller clamped_lqr_controller(const Mat& k_gain, double a, double b) {
  return [k_gain, a, b](const Vec& x) {
    Vec u = -(k_gain * x);
    for (Eigen::Index i = 0; i < u.size(); ++i) {
      u(i) = lyapnet::loose_saturation(u(i), a, b, 0.0, 0.0);
    }
    return u;
  };
}

TrainedModel make_model(const TrainConfig& cfg, const dynamics::SystemSpec& spec) {
  cfg.validate();
  TrainedModel model;
  const auto lin = lqr::linearize(spec);
  model.lqr_sol = lqr::solve_care(lin, Mat::Identity(spec.n, spec.n),
                                  Mat::Identity(spec.m, spec.m));
  model.lyap = lyapnet::LyapunovNet::make(spec.n, cfg.gamma, cfg.phi_hidden);
  model.ctrl = lyapnet::ControllerNet::make(spec.n, cfg.a, cfg.b, model.lqr_sol.K,
                                            cfg.psi_hidden);
  model.res = lyapnet::ResidualDynamics::make(spec, cfg.res_hidden);
  model.lyap.init(model.params, split_seed(cfg.seed, 1));
  model.ctrl.init(model.params, split_seed(cfg.seed, 2));
  model.res.init(model.params, split_seed(cfg.seed, 3));
  return model;
}

TrainedModel load_model(const TrainConfig& cfg, const dynamics::SystemSpec& spec,
                        const ParamStore& params) {
  TrainedModel model = make_model(cfg, spec);
  require(params.size() == model.params.size(),
          "checkpoint parameter count does not match the configured architecture");
  for (int i = 0; i < model.params.size(); ++i) {
    const std::string& name = model.params.name(i);
    require(params.has(name), "checkpoint is missing parameter: " + name);
    const Mat& v = params.at(name);
    require(v.rows() == model.params.value(i).rows() && v.cols() == model.params.value(i).cols(),
            "checkpoint shape mismatch for parameter: " + name);
    model.params.value(i) = v;
  }
  return model;
}

namespace {

/// One SGD pass of the quadratic-target value fit (pretraining phase 1).
void fit_value_epoch(TrainedModel& model, const TrainConfig& cfg, const std::vector<Vec>& points,
                     std::vector<int>& order, std::mt19937_64& rng, const Groups& groups) {
  std::shuffle(order.begin(), order.end(), rng);
  const int total = static_cast<int>(order.size());
  for (int lo = 0; lo < total; lo += cfg.batch_size) {
    const int hi = std::min(total, lo + cfg.batch_size);
    const Mat X = gather_columns(points, order, lo, hi);
    Eigen::RowVectorXd targets(X.cols());
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
      targets(j) = cfg.pretrain_v0_coeff * X.col(j).squaredNorm();
    }
    auto ctx = lyapnet::make_context(model.params, X, groups.lyap);
    const int v_row = lyapnet::build_value_row(ctx, model.lyap);
    const int mse = lyapnet::build_mse_row(ctx, v_row, targets);
    GradMap grads = netcore::collect_gradients(ctx.tape, mse, *ctx.leaves);
    clip_gradients(grads, cfg.grad_clip);
    if (!netcore::sgd_step(model.params, grads, cfg.pretrain_lr, groups.lyap)) {
      throw TrainAbort("non-finite gradient during value pretraining");
    }
  }
}

/// Dynamics residual fit: theta_1, theta_2 move; everything else is frozen.
void fit_dynamics(TrainedModel& model, const TrainConfig& cfg, const dynamics::SystemSpec& spec,
                  const std::vector<lyapnet::SupervisionPair>& pairs, int epochs,
                  std::mt19937_64& rng, const Groups& groups) {
  if (pairs.empty() || epochs == 0) return;
  const LyapunovEval lyap(model.lyap, model.params);
  const ControllerEval ctrl(model.ctrl, model.params);

  std::vector<int> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  const int total = static_cast<int>(pairs.size());

  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int lo = 0; lo < total; lo += cfg.batch_size) {
      const int hi = std::min(total, lo + cfg.batch_size);
      const int cols = hi - lo;
      Mat X(spec.n, cols);
      Eigen::RowVectorXd targets(cols);
      for (int k = lo; k < hi; ++k) {
        const auto& p = pairs[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
        X.col(k - lo) = p.x;
        targets(k - lo) = p.target;
      }
      auto ctx = lyapnet::make_context(model.params, X, groups.residual);
      const int grad_v = ctx.tape.constant(lyap.grad_batch(X));
      const int u_row = ctx.tape.constant(ctrl.eval_batch(X));
      const int fhat = lyapnet::build_f_hat(ctx, model.res, f0_batch(spec, X));
      const int ghat = lyapnet::build_g_hat(ctx, model.res, g0_batch(spec, X));
      const int vdot = lyapnet::build_vdot_row(ctx, grad_v, fhat, ghat, u_row);
      const int mse = lyapnet::build_mse_row(ctx, vdot, targets);
      GradMap grads = netcore::collect_gradients(ctx.tape, mse, *ctx.leaves);
      clip_gradients(grads, cfg.grad_clip);
      if (!netcore::sgd_step(model.params, grads, cfg.lr_dynamics, groups.residual)) {
        throw TrainAbort("non-finite gradient during dynamics fitting");
      }
    }
  }
}

/// Lyapunov/controller fit on the exploration set: theta_3, theta_4 move.
void fit_lyapunov(TrainedModel& model, const TrainConfig& cfg, const dynamics::SystemSpec& spec,
                  const std::vector<Vec>& mesh_points, const std::vector<int>& set_indices,
                  double lr3, double lr4, int epochs, std::mt19937_64& rng,
                  const Groups& groups) {
  if (set_indices.empty() || epochs == 0) return;
  const ResidualEval res(model.res, model.params);

  std::vector<int> order = set_indices;
  const int total = static_cast<int>(order.size());

  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int lo = 0; lo < total; lo += cfg.batch_size) {
      const int hi = std::min(total, lo + cfg.batch_size);
      const Mat X = gather_columns(mesh_points, order, lo, hi);
      auto ctx = lyapnet::make_context(model.params, X, groups.lyap_ctrl);
      const int v_row = lyapnet::build_value_row(ctx, model.lyap);
      const int grad_x = lyapnet::build_grad_x(ctx, v_row);
      const int u_row = lyapnet::build_controller_row(ctx, model.ctrl);
      const int fhat = ctx.tape.constant(res.f_hat_batch(spec, X));
      const int ghat = ctx.tape.constant(res.g_hat_batch(spec, X));
      const int vdot = lyapnet::build_vdot_row(ctx, grad_x, fhat, ghat, u_row);
      const auto loss = lyapnet::build_lyapunov_loss(ctx, vdot, grad_x, X, cfg.lambda_roa,
                                                     cfg.lambda_lip, cfg.kappa, cfg.epsilon);
      if (!std::isfinite(loss.loss_value)) {
        throw TrainAbort("non-finite Lyapunov loss");
      }
      GradMap grads = netcore::collect_gradients(ctx.tape, loss.loss, *ctx.leaves);
      clip_gradients(grads, cfg.grad_clip);
      const bool ok3 = netcore::sgd_step(model.params, grads, lr3, groups.lyap);
      const bool ok4 = ok3 && netcore::sgd_step(model.params, grads, lr4, groups.ctrl);
      if (!ok3 || !ok4) {
        throw TrainAbort("non-finite gradient during Lyapunov/controller update");
      }
    }
  }
}

ClassifyOptions classify_options(const TrainConfig& cfg, bool collect_pairs) {
  ClassifyOptions opts;
  opts.rollout.dt = cfg.dt;
  opts.rollout.horizon = cfg.horizon;
  opts.rollout.r_conv = cfg.r_conv;
  opts.rollout.settle_window = cfg.settle_window;
  opts.rollout.escape_factor = cfg.escape_factor;
  opts.pair_stride = cfg.pair_stride;
  opts.max_pairs_per_traj = cfg.max_pairs_per_traj;
  opts.collect_pairs = collect_pairs;
  opts.threads = cfg.threads;
  return opts;
}

double full_mesh_value_mse(const TrainedModel& model, const TrainConfig& cfg,
                           const roa::Mesh& mesh) {
  const LyapunovEval lyap(model.lyap, model.params);
  const Mat X = mesh.points_matrix();
  const Eigen::RowVectorXd v = lyap.value_batch(X);
  double mse = 0.0;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    const double d = v(j) - cfg.pretrain_v0_coeff * X.col(j).squaredNorm();
    mse += d * d;
  }
  return mse / static_cast<double>(X.cols());
}

}  // namespace

void pretrain(TrainedModel& model, const TrainConfig& cfg, const dynamics::SystemSpec& spec,
              roa::Mesh& mesh, const std::vector<int>& x0_indices,
              const std::vector<dynamics::ClassifyResult::Pair>& x0_pairs) {
  const Groups groups = make_groups(model.params);

  // Phase 1: value fit toward V0 = coeff x^T x over the whole mesh.
  std::mt19937_64 rng(split_seed(cfg.seed, 5));
  std::vector<int> order(mesh.size());
  std::iota(order.begin(), order.end(), 0);
  double mse = full_mesh_value_mse(model, cfg, mesh);
  int epoch = 0;
  for (; epoch < cfg.pretrain_epoch_cap && mse > cfg.pretrain_mse_target; ++epoch) {
    fit_value_epoch(model, cfg, mesh.points, order, rng, groups);
    mse = full_mesh_value_mse(model, cfg, mesh);
  }
  if (mse > cfg.pretrain_mse_target) {
    log::warn("pretraining value fit stopped at MSE ", mse, " after ", epoch,
              " epochs (target ", cfg.pretrain_mse_target, ")");
  } else {
    log::info("pretraining value fit reached MSE ", mse, " in ", epoch, " epochs");
  }

  // Phase 2: residual derivative fit on rollouts from the initial stable set.
  (void)x0_indices;
  const LyapunovEval lyap(model.lyap, model.params);
  const auto supervision = lyapnet::make_supervision(lyap, x0_pairs, cfg.dt);
  std::mt19937_64 rng2(split_seed(cfg.seed, 6));
  fit_dynamics(model, cfg, spec, supervision, cfg.epochs_dynamics, rng2, groups);
}

TrainResult train(const TrainConfig& cfg, const dynamics::SystemSpec& spec) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();

  TrainResult result;
  result.model = make_model(cfg, spec);
  TrainedModel& model = result.model;
  const Groups groups = make_groups(model.params);

  const bool write_files = !cfg.out_dir.empty();
  std::filesystem::path out_dir(cfg.out_dir);
  std::ofstream metrics;
  if (write_files) {
    std::filesystem::create_directories(out_dir);
    metrics.open(out_dir / "metrics.csv", std::ios::binary | std::ios::trunc);
    require(metrics.good(), "cannot open metrics.csv for writing");
    metrics << metrics_header() << "\n";
    metrics.flush();
  }
  auto save_ckpt = [&](const std::string& name) {
    if (!write_files) return;
    netcore::save_checkpoint((out_dir / name).string(), model.params,
                             {{"system", spec.name},
                              {"seed", std::to_string(cfg.seed)},
                              {"gamma", fmt(cfg.gamma)}});
  };

  roa::Mesh mesh = roa::build_mesh(spec, cfg.mesh_dims);

  // Initial stable set under the clamped LQR law.
  const auto x0_result = dynamics::classify_stable(
      spec, clamped_lqr_controller(model.lqr_sol.K, cfg.a, cfg.b), mesh.points,
      classify_options(cfg, /*collect_pairs=*/true));
  std::vector<int> x0_indices;
  for (std::size_t i = 0; i < x0_result.labels.size(); ++i) {
    if (dynamics::is_stable(x0_result.labels[i])) x0_indices.push_back(static_cast<int>(i));
  }
  require(!x0_indices.empty(), "initial LQR controller stabilizes no mesh point");
  log::info("initial stable set: ", x0_indices.size(), " of ", mesh.size(), " mesh points");

  pretrain(model, cfg, spec, mesh, x0_indices, x0_result.pairs);
  save_ckpt("checkpoint.json");

  for (int i = 1; i <= cfg.iterations; ++i) {
    const auto t_iter = std::chrono::steady_clock::now();
    const ParamStore params_backup = model.params;

    IterationLog log_row;
    log_row.iteration = i;
    try {
      // (1) stable set under the current controller; reuse rollouts for pairs.
      const ControllerEval ctrl_eval(model.ctrl, model.params);
      const auto classified = dynamics::classify_stable(
          spec, [&ctrl_eval](const Vec& x) { return ctrl_eval(x); }, mesh.points,
          classify_options(cfg, /*collect_pairs=*/true));
      mesh.labels = classified.labels;

      // (2) level search under the current networks.
      {
        const LyapunovEval lyap_eval(model.lyap, model.params);
        const ResidualEval res_eval(model.res, model.params);
        roa::populate_values(mesh, lyap_eval, ctrl_eval, res_eval, spec);
      }
      roa::RoaReport report = roa::level_search(mesh, cfg.kappa);
      report.iteration = i;

      // (3) exploration multiplier, (4) training set S_i.
      const double eta = eta_schedule(i, cfg.eta0, cfg.k_eta);
      std::vector<int> set_indices;
      std::vector<char> in_set(mesh.size(), 0);
      const double level = eta * report.c;
      for (std::size_t j = 0; j < mesh.size(); ++j) {
        if (mesh.v_values(static_cast<Eigen::Index>(j)) <= level) {
          set_indices.push_back(static_cast<int>(j));
          in_set[j] = 1;
        }
      }
      if (set_indices.empty()) {
        log::warn("iteration ", i, ": empty training set, falling back to the initial stable set");
        set_indices = x0_indices;
        for (int j : set_indices) in_set[static_cast<std::size_t>(j)] = 1;
      }

      // (5) residual update from pairs whose rollouts started inside S_i.
      std::vector<dynamics::ClassifyResult::Pair> pair_subset;
      for (const auto& p : classified.pairs) {
        if (in_set[static_cast<std::size_t>(p.origin_index)]) pair_subset.push_back(p);
      }
      if (pair_subset.empty()) {
        std::vector<char> in_x0(mesh.size(), 0);
        for (int j : x0_indices) in_x0[static_cast<std::size_t>(j)] = 1;
        for (const auto& p : classified.pairs) {
          if (in_x0[static_cast<std::size_t>(p.origin_index)]) pair_subset.push_back(p);
        }
      }
      std::mt19937_64 pair_rng(split_seed(cfg.seed, 20000 + static_cast<std::uint64_t>(i)));
      if (static_cast<int>(pair_subset.size()) > cfg.max_pairs_per_iteration) {
        std::shuffle(pair_subset.begin(), pair_subset.end(), pair_rng);
        pair_subset.resize(static_cast<std::size_t>(cfg.max_pairs_per_iteration));
      }
      std::vector<lyapnet::SupervisionPair> supervision;
      {
        const LyapunovEval lyap_eval(model.lyap, model.params);
        supervision = lyapnet::make_supervision(lyap_eval, pair_subset, cfg.dt);
      }
      const std::uint64_t h34 = model.params.hash(groups.lyap_ctrl);
      std::mt19937_64 dyn_rng(split_seed(cfg.seed, 10 + static_cast<std::uint64_t>(i)));
      fit_dynamics(model, cfg, spec, supervision, cfg.epochs_dynamics, dyn_rng, groups);
      require(model.params.hash(groups.lyap_ctrl) == h34,
              "theta_3/theta_4 moved during the dynamics phase");

      // (6) StepLR for theta_3 and theta_4.
      const double lr3 = netcore::step_lr(cfg.lr_lyapunov, i - 1, cfg.steplr_step,
                                          cfg.steplr_decay);
      const double lr4 = netcore::step_lr(cfg.lr_controller, i - 1, cfg.steplr_step,
                                          cfg.steplr_decay);

      // (7) Lyapunov and controller update on S_i.
      const std::uint64_t h12 = model.params.hash(groups.residual);
      std::mt19937_64 lyap_rng(split_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(i)));
      fit_lyapunov(model, cfg, spec, mesh.points, set_indices, lr3, lr4, cfg.epochs_lyapunov,
                   lyap_rng, groups);
      require(model.params.hash(groups.residual) == h12,
              "theta_1/theta_2 moved during the Lyapunov phase");

      // Post-update losses for the log.
      {
        const LyapunovEval lyap_eval(model.lyap, model.params);
        const ControllerEval ctrl_post(model.ctrl, model.params);
        const ResidualEval res_eval(model.res, model.params);
        Mat XS(spec.n, static_cast<Eigen::Index>(set_indices.size()));
        for (std::size_t k = 0; k < set_indices.size(); ++k) {
          XS.col(static_cast<Eigen::Index>(k)) =
              mesh.points[static_cast<std::size_t>(set_indices[k])];
        }
        log_row.loss_lyapunov =
            lyapunov_loss_batched(lyap_eval, ctrl_post, res_eval, spec, XS, cfg.lambda_roa,
                                  cfg.lambda_lip, cfg.kappa, cfg.epsilon);
        log_row.loss_dynamics =
            dynamics_loss_batched(lyap_eval, ctrl_post, res_eval, spec, supervision);
        if (!std::isfinite(log_row.loss_lyapunov) || !std::isfinite(log_row.loss_dynamics)) {
          throw TrainAbort("non-finite loss after iteration " + std::to_string(i));
        }
      }

      log_row.c = report.c;
      log_row.eta = eta;
      log_row.ratio_true = report.ratio_true;
      log_row.ratio_fi = report.ratio_fi;
      log_row.ratio_estimated = report.ratio_estimated;
      log_row.lr = lr3;
    } catch (const TrainAbort&) {
      model.params = params_backup;
      save_ckpt("checkpoint.json");
      throw;
    }

    log_row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_iter).count();
    result.logs.push_back(log_row);
    if (write_files) {
      metrics << metrics_row(log_row) << "\n";
      metrics.flush();
      if (cfg.dump_mesh_every > 0 && i % cfg.dump_mesh_every == 0) {
        char name[64];
        std::snprintf(name, sizeof(name), "mesh_iter_%04d.csv", i);
        roa::write_mesh_csv((out_dir / name).string(), mesh);
      }
      if (cfg.checkpoint_every > 0 && i % cfg.checkpoint_every == 0) {
        save_ckpt("checkpoint.json");
      }
    }
    log::info("iter ", i, "/", cfg.iterations, ": c=", log_row.c,
              " true%=", log_row.ratio_true, " est%=", log_row.ratio_estimated,
              " loss=", log_row.loss_lyapunov, " (", log_row.wall_seconds, "s)");
  }

  // Final measurement under the trained parameters.
  {
    const ControllerEval ctrl_eval(model.ctrl, model.params);
    const auto classified = dynamics::classify_stable(
        spec, [&ctrl_eval](const Vec& x) { return ctrl_eval(x); }, mesh.points,
        classify_options(cfg, /*collect_pairs=*/false));
    mesh.labels = classified.labels;
    const LyapunovEval lyap_eval(model.lyap, model.params);
    const ResidualEval res_eval(model.res, model.params);
    roa::populate_values(mesh, lyap_eval, ctrl_eval, res_eval, spec);
    result.final_report = roa::level_search(mesh, cfg.kappa);
    result.final_report.iteration = cfg.iterations;
  }
  result.final_mesh = std::move(mesh);
  save_ckpt("checkpoint.json");

  log::info("training finished in ",
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count(),
            "s: c=", result.final_report.c, " true%=", result.final_report.ratio_true,
            " est%=", result.final_report.ratio_estimated);
  return result;
}

std::string metrics_header() {
  return "iter,c,eta,ratio_true,ratio_fi,ratio_est,loss_lyap,loss_dyn,lr";
}

std::string metrics_row(const IterationLog& log) {
  std::string row = std::to_string(log.iteration);
  row += "," + fmt(log.c);
  row += "," + fmt(log.eta);
  row += "," + fmt(log.ratio_true);
  row += "," + fmt(log.ratio_fi);
  row += "," + fmt(log.ratio_estimated);
  row += "," + fmt(log.loss_lyapunov);
  row += "," + fmt(log.loss_dynamics);
  row += "," + fmt(log.lr);
  return row;
}

}  // namespace roaforge::trainer
