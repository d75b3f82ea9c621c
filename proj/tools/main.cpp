// roaforge: learns a state-feedback controller, a neural Lyapunov function
// and a residual dynamics correction for the benchmark plants, estimates and
// certifies the region of attraction, and exports SMT-LIB2 queries.
//
// Exit codes: 0 success (verify: no counterexample), 1 counterexample found,
// 2 configuration/usage error, 3 training aborted.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "roaforge/config.hpp"
#include "roaforge/log.hpp"
#include "roaforge/lqr.hpp"
#include "roaforge/roa.hpp"
#include "roaforge/trainer.hpp"
#include "roaforge/verify.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace {

using namespace roaforge;
using nlohmann::ordered_json;

struct CommonArgs {
  std::string config_path;
  std::string checkpoint_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations;
  std::optional<unsigned> threads;
};

config::RunConfig load_run_config(const CommonArgs& args) {
  config::RunConfig cfg = config::load_config(args.config_path);
  if (args.seed) cfg.train.seed = *args.seed;
  if (args.iterations) cfg.train.iterations = *args.iterations;
  if (args.threads) cfg.train.threads = *args.threads;
  if (!args.out.empty()) cfg.train.out_dir = args.out;
  return cfg;
}

dynamics::SystemSpec make_spec(const config::RunConfig& cfg, bool perturbed) {
  auto params = cfg.system_params;
  if (perturbed) {
    for (const auto& [k, v] : cfg.perturbation) params[k] = v;
  }
  return dynamics::make_system(cfg.system, params);
}

trainer::TrainedModel load_trained(const config::RunConfig& cfg,
                                   const dynamics::SystemSpec& spec,
                                   const std::string& checkpoint_path) {
  const auto ck = netcore::load_checkpoint(checkpoint_path);
  return trainer::load_model(cfg.train, spec, ck.params);
}

ordered_json report_json(const roa::RoaReport& report) {
  ordered_json j;
  j["c"] = report.c;
  j["ratio_true"] = report.ratio_true;
  j["ratio_fi"] = report.ratio_fi;
  j["ratio_estimated"] = report.ratio_estimated;
  j["iteration"] = report.iteration;
  j["certified"] = report.certified;
  return j;
}

void write_json(const std::filesystem::path& path, const ordered_json& j) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot open for writing: " + path.string());
  f << j.dump(2) << "\n";
}

dynamics::ClassifyOptions classify_options_from(const trainer::TrainConfig& t) {
  dynamics::ClassifyOptions opts;
  opts.rollout.dt = t.dt;
  opts.rollout.horizon = t.horizon;
  opts.rollout.r_conv = t.r_conv;
  opts.rollout.settle_window = t.settle_window;
  opts.rollout.escape_factor = t.escape_factor;
  opts.threads = t.threads;
  return opts;
}

/// Labels the mesh under `ctrl` and runs the level search with the trained V.
roa::RoaReport measure(const config::RunConfig& cfg, const dynamics::SystemSpec& spec,
                       const trainer::TrainedModel& model, roa::Mesh& mesh) {
  const lyapnet::ControllerEval ctrl(model.ctrl, model.params);
  const auto classified = dynamics::classify_stable(
      spec, [&ctrl](const Vec& x) { return ctrl(x); }, mesh.points,
      classify_options_from(cfg.train));
  mesh.labels = classified.labels;
  const lyapnet::LyapunovEval lyap(model.lyap, model.params);
  const lyapnet::ResidualEval res(model.res, model.params);
  roa::populate_values(mesh, lyap, ctrl, res, spec);
  return roa::level_search(mesh, cfg.train.kappa);
}

int cmd_train(const CommonArgs& args) {
  config::RunConfig cfg = load_run_config(args);
  if (cfg.train.out_dir.empty()) cfg.train.out_dir = "out";
  const auto spec = make_spec(cfg, /*perturbed=*/false);
  try {
    const auto result = trainer::train(cfg.train, spec);
    write_json(std::filesystem::path(cfg.train.out_dir) / "report.json",
               report_json(result.final_report));
    std::cout << report_json(result.final_report).dump(2) << "\n";
    return 0;
  } catch (const trainer::TrainAbort& e) {
    log::error("training aborted: ", e.what());
    return 3;
  }
}

int cmd_eval(const CommonArgs& args) {
  config::RunConfig cfg = load_run_config(args);
  const auto spec = make_spec(cfg, /*perturbed=*/false);
  const auto model = load_trained(cfg, spec, args.checkpoint_path);

  roa::Mesh mesh = roa::build_mesh(spec, cfg.train.mesh_dims);
  const roa::RoaReport report = measure(cfg, spec, model, mesh);

  const int samples = cfg.eval.boundary_samples > 0
                          ? cfg.eval.boundary_samples
                          : config::default_boundary_samples(cfg.system);
  const lyapnet::LyapunovEval lyap(model.lyap, model.params);
  const lyapnet::ControllerEval ctrl(model.ctrl, model.params);

  // The rollout plant may carry the perturbation block; the certificate and
  // its level stay those of the unperturbed training system.
  const auto rollout_spec = make_spec(cfg, /*perturbed=*/true);
  dynamics::RolloutOptions ropts;
  ropts.dt = cfg.train.dt;
  ropts.horizon = cfg.train.horizon;
  ropts.r_conv = cfg.train.r_conv;
  ropts.settle_window = cfg.train.settle_window;
  ropts.escape_factor = cfg.train.escape_factor;
  const auto check = roa::boundary_rollouts(
      lyap, rollout_spec, [&ctrl](const Vec& x) { return ctrl(x); }, report.c, samples,
      cfg.eval.stay_slack, ropts, split_seed(cfg.train.seed, 0xE7A1));

  const std::filesystem::path out_dir(cfg.train.out_dir.empty() ? "out" : cfg.train.out_dir);
  std::filesystem::create_directories(out_dir);
  for (std::size_t i = 0; i < check.trajectories.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "boundary_traj_%02zu.csv", i);
    dynamics::write_trajectory_csv((out_dir / name).string(), check.trajectories[i]);
  }

  ordered_json j = report_json(report);
  j["boundary"] = {{"requested", samples},
                   {"sampled", check.total},
                   {"stayed", check.stayed},
                   {"converged", check.converged}};
  if (!cfg.perturbation.empty()) {
    ordered_json p;
    for (const auto& [k, v] : cfg.perturbation) p[k] = v;
    j["perturbation"] = p;
  }
  write_json(out_dir / "eval_report.json", j);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_verify(const CommonArgs& args, double zeta_override, double resolution_override,
               double c_override) {
  config::RunConfig cfg = load_run_config(args);
  if (zeta_override > 0.0) cfg.verify.zeta = zeta_override;
  if (resolution_override > 0.0) cfg.verify.resolution = resolution_override;
  const auto spec = make_spec(cfg, /*perturbed=*/false);
  const auto model = load_trained(cfg, spec, args.checkpoint_path);

  double c = c_override;
  roa::Mesh mesh = roa::build_mesh(spec, cfg.train.mesh_dims);
  if (c <= 0.0) {
    c = measure(cfg, spec, model, mesh).c;
    log::info("verify: recomputed level c = ", c);
  }
  if (c <= 0.0) {
    log::error("verify: no positive level to check");
    return 2;
  }
  const double resolution =
      cfg.verify.resolution > 0.0 ? cfg.verify.resolution : mesh.tau / 2.0;

  const lyapnet::LyapunovEval lyap(model.lyap, model.params);
  const lyapnet::ControllerEval ctrl(model.ctrl, model.params);
  const lyapnet::ResidualEval res(model.res, model.params);
  const auto result =
      verify::falsify_grid(lyap, ctrl, res, spec, c, cfg.verify.zeta, cfg.train.kappa,
                           resolution);

  ordered_json j;
  j["level_c"] = result.level_c;
  j["zeta"] = result.zeta;
  j["resolution"] = result.resolution;
  j["checked_points"] = result.checked_points;
  j["margin_min"] = result.margin_min;
  if (result.counterexample) {
    std::vector<double> x(result.counterexample->data(),
                          result.counterexample->data() + result.counterexample->size());
    j["counterexample"] = x;
    std::cout << j.dump(2) << "\n";
    return 1;
  }
  j["counterexample"] = nullptr;
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_baseline(const CommonArgs& args) {
  config::RunConfig cfg = load_run_config(args);
  const auto spec = make_spec(cfg, /*perturbed=*/false);

  const auto lin = lqr::linearize(spec);
  const auto sol = lqr::solve_care(lin, Mat::Identity(spec.n, spec.n),
                                   Mat::Identity(spec.m, spec.m));

  // Baseline sweep: V = x^T P x under the evaluation controller (the trained
  // one when a checkpoint is given, the clamped LQR law otherwise).
  trainer::TrainedModel model;
  if (!args.checkpoint_path.empty()) {
    model = load_trained(cfg, spec, args.checkpoint_path);
  } else {
    model = trainer::make_model(cfg.train, spec);
    // Zero the trainable controller head so u is exactly the clamped LQR law.
    for (int idx : model.params.group("ctrl.psi.")) model.params.value(idx).setZero();
  }
  roa::Mesh mesh = roa::build_mesh(spec, cfg.train.mesh_dims);
  const lyapnet::ControllerEval ctrl(model.ctrl, model.params);
  const auto classified = dynamics::classify_stable(
      spec, [&ctrl](const Vec& x) { return ctrl(x); }, mesh.points,
      classify_options_from(cfg.train));
  mesh.labels = classified.labels;
  const lyapnet::ResidualEval res(model.res, model.params);
  roa::populate_values_quadratic(mesh, sol.P, ctrl, res, spec);
  const roa::RoaReport report = roa::level_search(mesh, cfg.train.kappa);

  ordered_json j;
  auto matrix_rows = [](const Mat& m) {
    std::vector<std::vector<double>> rows;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(m.cols()));
      for (Eigen::Index c2 = 0; c2 < m.cols(); ++c2) row[static_cast<std::size_t>(c2)] = m(r, c2);
      rows.push_back(std::move(row));
    }
    return rows;
  };
  j["P"] = matrix_rows(sol.P);
  j["K"] = matrix_rows(sol.K);
  j["riccati_residual"] = sol.riccati_residual;
  j["c_prime"] = report.c;
  j["ratios"] = report_json(report);
  std::cout << j.dump(2) << "\n";
  if (!args.out.empty()) {
    std::filesystem::create_directories(args.out);
    write_json(std::filesystem::path(args.out) / "baseline.json", j);
  }
  return 0;
}

int cmd_export_smt2(const CommonArgs& args, double zeta_override, double c_override,
                    const std::string& out_file) {
  config::RunConfig cfg = load_run_config(args);
  if (zeta_override > 0.0) cfg.verify.zeta = zeta_override;
  const auto spec = make_spec(cfg, /*perturbed=*/false);
  const auto model = load_trained(cfg, spec, args.checkpoint_path);

  double c = c_override;
  if (c <= 0.0) {
    roa::Mesh mesh = roa::build_mesh(spec, cfg.train.mesh_dims);
    c = measure(cfg, spec, model, mesh).c;
    log::info("export-smt2: recomputed level c = ", c);
  }

  verify::ExportOptions opts;
  opts.zeta = cfg.verify.zeta;
  opts.precision = cfg.verify.precision;
  opts.limits.max_phi_width = cfg.verify.max_phi_width;
  verify::export_smt2(model.lyap, model.ctrl, model.res, model.params, spec, c,
                      cfg.train.kappa, opts, out_file);
  std::cout << "wrote " << out_file << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neural Lyapunov RoA learning, certification, and export"};
  app.require_subcommand(1);

  CommonArgs args;
  double zeta = 0.0, resolution = 0.0, level_c = 0.0;
  std::string smt_out = "certificate.smt2";

  auto add_common = [&](CLI::App* cmd, bool needs_checkpoint) {
    cmd->add_option("--config", args.config_path, "run configuration JSON")->required();
    if (needs_checkpoint) {
      cmd->add_option("--checkpoint", args.checkpoint_path, "checkpoint JSON")->required();
    } else {
      cmd->add_option("--checkpoint", args.checkpoint_path, "checkpoint JSON");
    }
    cmd->add_option("--seed", args.seed, "override the config seed");
    cmd->add_option("--out", args.out, "output directory");
    cmd->add_option("--iterations", args.iterations, "override training iterations");
    cmd->add_option("--threads", args.threads, "worker thread cap");
  };

  auto* train = app.add_subcommand("train", "run the full learning loop");
  add_common(train, false);
  auto* eval = app.add_subcommand("eval", "recompute ratios and boundary rollouts");
  add_common(eval, true);
  auto* verify_cmd = app.add_subcommand("verify", "dense-grid falsification");
  add_common(verify_cmd, true);
  verify_cmd->add_option("--zeta", zeta, "origin exclusion radius");
  verify_cmd->add_option("--resolution", resolution, "grid resolution");
  verify_cmd->add_option("--c", level_c, "level value (default: recompute)");
  auto* baseline = app.add_subcommand("baseline", "LQR Riccati baseline report");
  add_common(baseline, false);
  auto* export_cmd = app.add_subcommand("export-smt2", "emit the SMT-LIB2 query");
  add_common(export_cmd, true);
  export_cmd->add_option("--zeta", zeta, "origin exclusion radius");
  export_cmd->add_option("--c", level_c, "level value (default: recompute)");
  export_cmd->add_option("--smt-out", smt_out, "output .smt2 path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) return cmd_train(args);
    if (eval->parsed()) return cmd_eval(args);
    if (verify_cmd->parsed()) return cmd_verify(args, zeta, resolution, level_c);
    if (baseline->parsed()) return cmd_baseline(args);
    if (export_cmd->parsed()) return cmd_export_smt2(args, zeta, level_c, smt_out);
  } catch (const roaforge::trainer::TrainAbort& e) {
    roaforge::log::error(e.what());
    return 3;
  } catch (const std::exception& e) {
    roaforge::log::error(e.what());
    return 2;
  }
  return 2;
}
