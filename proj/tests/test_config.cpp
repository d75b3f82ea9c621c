#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "roaforge/config.hpp"

using namespace roaforge;
using namespace roaforge::config;

TEST_CASE("defaults carry the published hyperparameters per system") {
  const RunConfig p = default_config("pendulum");
  CHECK(p.train.lambda_roa == 1000.0);
  CHECK(p.train.lambda_lip == 0.1);
  CHECK(p.train.eta0 == 5.0);
  REQUIRE(p.train.k_eta.has_value());
  CHECK(*p.train.k_eta == 15);
  CHECK(p.train.a == -2.0);
  CHECK(p.train.b == 2.0);
  CHECK(p.train.gamma == 1e-6);
  CHECK(p.train.kappa == 0.1);
  CHECK(p.train.epsilon == 0.01);
  CHECK(p.train.mesh_dims == std::vector<int>{100, 100});
  CHECK(p.eval.boundary_samples == 20);

  const RunConfig s = default_config("strict_feedback");
  CHECK(s.train.lambda_roa == 500.0);
  CHECK(s.train.lambda_lip == 0.01);
  CHECK(s.train.eta0 == 2.0);
  CHECK_FALSE(s.train.k_eta.has_value());
  CHECK(s.train.a == -1.0);
  CHECK(s.train.b == 1.0);
  CHECK(s.eval.boundary_samples == 10);

  const RunConfig c = default_config("cartpole");
  CHECK(c.train.lambda_roa == 500.0);
  CHECK(c.train.eta0 == 9.0);
  CHECK(c.train.a == -5.0);
  CHECK(c.train.b == 5.0);
  CHECK(c.train.mesh_dims == std::vector<int>{10, 10, 10, 10});

  CHECK_THROWS(default_config("quadrotor"));
}

TEST_CASE("parse applies overrides and keeps defaults elsewhere") {
  const std::string text = R"({
    "schema": 1,
    "system": "pendulum",
    "seed": 42,
    "mesh": [64, 64],
    "out_dir": "runs/a",
    "train": {"iterations": 10, "lr_lyapunov": 0.0005, "k_eta": null},
    "perturbation": {"b_c": 9.1},
    "eval": {"boundary_samples": 12},
    "verify": {"zeta": 0.25}
  })";
  const RunConfig cfg = parse_config(text);
  CHECK(cfg.system == "pendulum");
  CHECK(cfg.train.seed == 42);
  CHECK(cfg.train.mesh_dims == std::vector<int>{64, 64});
  CHECK(cfg.train.out_dir == "runs/a");
  CHECK(cfg.train.iterations == 10);
  CHECK(cfg.train.lr_lyapunov == 0.0005);
  CHECK_FALSE(cfg.train.k_eta.has_value());  // null = fixed eta
  CHECK(cfg.train.lambda_roa == 1000.0);     // untouched default
  CHECK(cfg.perturbation.at("b_c") == 9.1);
  CHECK(cfg.eval.boundary_samples == 12);
  CHECK(cfg.verify.zeta == 0.25);
}

TEST_CASE("unknown keys are rejected everywhere") {
  CHECK_THROWS(parse_config(R"({"schema": 1, "system": "pendulum", "banana": 1})"));
  CHECK_THROWS(parse_config(R"({"schema": 1, "system": "pendulum", "train": {"lr": 1}})"));
  CHECK_THROWS(parse_config(R"({"schema": 1, "system": "pendulum", "eval": {"n": 2}})"));
  CHECK_THROWS(parse_config(R"({"schema": 1, "system": "pendulum", "verify": {"eps": 1}})"));
}

TEST_CASE("schema and system are mandatory and validated") {
  CHECK_THROWS(parse_config(R"({"system": "pendulum"})"));
  CHECK_THROWS(parse_config(R"({"schema": 2, "system": "pendulum"})"));
  CHECK_THROWS(parse_config(R"({"schema": 1})"));
  CHECK_THROWS(parse_config(R"({"schema": 1, "system": "warp_drive"})"));
}

TEST_CASE("config-level hyperparameter validation fires") {
  CHECK_THROWS(parse_config(
      R"({"schema": 1, "system": "pendulum", "train": {"a": 3, "b": -3}})"));
  CHECK_THROWS(parse_config(
      R"({"schema": 1, "system": "pendulum", "train": {"kappa": -1}})"));
}
