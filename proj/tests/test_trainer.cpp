#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "roaforge/trainer.hpp"

#include <cmath>

using namespace roaforge;
using namespace roaforge::trainer;

namespace {

TrainConfig small_pendulum_config() {
  TrainConfig cfg;
  cfg.mesh_dims = {9, 9};
  cfg.iterations = 1;
  cfg.epochs_lyapunov = 2;
  cfg.epochs_dynamics = 2;
  cfg.pretrain_epoch_cap = 150;
  cfg.horizon = 8.0;
  cfg.phi_hidden = {16, 16};
  cfg.psi_hidden = {8, 8};
  cfg.res_hidden = {8, 8};
  cfg.max_pairs_per_iteration = 2000;
  cfg.threads = 2;
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST_CASE("eta schedule follows the level-multiplier formula") {
  CHECK(eta_schedule(1, 5.0, 15) == doctest::Approx(6.0));
  CHECK(eta_schedule(14, 5.0, 15) == doctest::Approx(6.0));
  CHECK(eta_schedule(15, 5.0, 15) == doctest::Approx(3.5));
  CHECK(eta_schedule(30, 5.0, 15) == doctest::Approx(1.0 + 5.0 / 3.0));
  CHECK(eta_schedule(1, 2.0, std::nullopt) == doctest::Approx(3.0));
  CHECK(eta_schedule(123, 2.0, std::nullopt) == doctest::Approx(3.0));
}

TEST_CASE("clamped LQR controller saturates at the thresholds") {
  Mat k(1, 2);
  k << 10.0, 0.0;
  auto ctrl = clamped_lqr_controller(k, -2.0, 2.0);
  Vec x(2);
  x << 1.0, 0.0;  // u0 = -10 -> clamped to -2
  CHECK(ctrl(x)(0) == doctest::Approx(-2.0));
  x << -1.0, 0.0;
  CHECK(ctrl(x)(0) == doctest::Approx(2.0));
  x << 0.05, 0.0;
  CHECK(ctrl(x)(0) == doctest::Approx(-0.5));
}

TEST_CASE("zero iterations returns the pretrained model with an empty log") {
  const auto spec = dynamics::make_system("pendulum");
  TrainConfig cfg = small_pendulum_config();
  cfg.iterations = 0;
  const auto result = train(cfg, spec);
  CHECK(result.logs.empty());
  CHECK(result.model.params.size() > 0);
  // Pretraining quality (spec example): V close to 0.1 |x|^2 on most points.
  const lyapnet::LyapunovEval lyap(result.model.lyap, result.model.params);
  int close = 0, total = 0;
  for (const auto& x : result.final_mesh.points) {
    ++total;
    if (std::abs(lyap.value(x) - 0.1 * x.squaredNorm()) <= 0.01) ++close;
  }
  CHECK(static_cast<double>(close) / total >= 0.95);
  CHECK(lyap.value(Vec::Zero(2)) == 0.0);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto spec = dynamics::make_system("pendulum");
  const TrainConfig cfg = small_pendulum_config();
  const auto a = train(cfg, spec);
  const auto b = train(cfg, spec);
  REQUIRE(a.logs.size() == b.logs.size());
  for (std::size_t i = 0; i < a.logs.size(); ++i) {
    CHECK(a.logs[i].c == b.logs[i].c);
    CHECK(a.logs[i].ratio_true == b.logs[i].ratio_true);
    CHECK(a.logs[i].loss_lyapunov == b.logs[i].loss_lyapunov);
    CHECK(a.logs[i].loss_dynamics == b.logs[i].loss_dynamics);
  }
  CHECK(a.model.params.hash() == b.model.params.hash());

  TrainConfig other = cfg;
  other.seed = 8;
  const auto c = train(other, spec);
  CHECK(a.model.params.hash() != c.model.params.hash());
}

TEST_CASE("metrics rows carry the nine columns") {
  CHECK(metrics_header() == "iter,c,eta,ratio_true,ratio_fi,ratio_est,loss_lyap,loss_dyn,lr");
  IterationLog log;
  log.iteration = 3;
  log.c = 0.5;
  log.eta = 6.0;
  const std::string row = metrics_row(log);
  int commas = 0;
  for (char ch : row) {
    if (ch == ',') ++commas;
  }
  CHECK(commas == 8);
  CHECK(row.rfind("3,", 0) == 0);
}

TEST_CASE("checkpoint round-trips through load_model") {
  const auto spec = dynamics::make_system("pendulum");
  TrainConfig cfg = small_pendulum_config();
  cfg.iterations = 0;
  const auto result = train(cfg, spec);
  const auto reloaded = load_model(cfg, spec, result.model.params);
  CHECK(reloaded.params.hash() == result.model.params.hash());

  // Wrong architecture is rejected.
  TrainConfig other = cfg;
  other.phi_hidden = {8, 8};
  CHECK_THROWS(load_model(other, spec, result.model.params));
}
