#include "roaforge/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace roaforge::config {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& allowed,
                    const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (allowed.find(key) == allowed.end()) {
      throw std::invalid_argument("unknown config key '" + key + "' in " + where);
    }
  }
}

std::map<std::string, double> read_number_map(const json& obj, const std::string& where) {
  std::map<std::string, double> out;
  for (const auto& [key, value] : obj.items()) {
    if (!value.is_number()) {
      throw std::invalid_argument("config value '" + key + "' in " + where +
                                  " must be a number");
    }
    out[key] = value.get<double>();
  }
  return out;
}

std::vector<int> read_int_list(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw std::invalid_argument(where + " must be an array");
  std::vector<int> out;
  for (const auto& v : arr) {
    if (!v.is_number_integer()) throw std::invalid_argument(where + " must hold integers");
    out.push_back(v.get<int>());
  }
  return out;
}

void parse_train_block(const json& obj, trainer::TrainConfig& t) {
  static const std::set<std::string> allowed = {
      "iterations", "lambda_roa", "lambda_lip", "eta0", "k_eta", "a", "b", "gamma", "kappa",
      "epsilon", "dt", "horizon", "r_conv", "settle_window", "escape_factor", "pair_stride",
      "max_pairs_per_traj", "max_pairs_per_iteration", "batch_size", "lr_lyapunov",
      "lr_controller", "lr_dynamics", "steplr_step", "steplr_decay", "epochs_lyapunov",
      "epochs_dynamics", "grad_clip", "pretrain_lr", "pretrain_epoch_cap",
      "pretrain_mse_target", "phi_hidden", "psi_hidden", "res_hidden", "dump_mesh_every",
      "checkpoint_every"};
  reject_unknown(obj, allowed, "train");
  if (obj.contains("iterations")) t.iterations = obj["iterations"].get<int>();
  if (obj.contains("lambda_roa")) t.lambda_roa = obj["lambda_roa"].get<double>();
  if (obj.contains("lambda_lip")) t.lambda_lip = obj["lambda_lip"].get<double>();
  if (obj.contains("eta0")) t.eta0 = obj["eta0"].get<double>();
  if (obj.contains("k_eta")) {
    if (obj["k_eta"].is_null()) {
      t.k_eta.reset();
    } else {
      t.k_eta = obj["k_eta"].get<int>();
    }
  }
  if (obj.contains("a")) t.a = obj["a"].get<double>();
  if (obj.contains("b")) t.b = obj["b"].get<double>();
  if (obj.contains("gamma")) t.gamma = obj["gamma"].get<double>();
  if (obj.contains("kappa")) t.kappa = obj["kappa"].get<double>();
  if (obj.contains("epsilon")) t.epsilon = obj["epsilon"].get<double>();
  if (obj.contains("dt")) t.dt = obj["dt"].get<double>();
  if (obj.contains("horizon")) t.horizon = obj["horizon"].get<double>();
  if (obj.contains("r_conv")) t.r_conv = obj["r_conv"].get<double>();
  if (obj.contains("settle_window")) t.settle_window = obj["settle_window"].get<int>();
  if (obj.contains("escape_factor")) t.escape_factor = obj["escape_factor"].get<double>();
  if (obj.contains("pair_stride")) t.pair_stride = obj["pair_stride"].get<int>();
  if (obj.contains("max_pairs_per_traj"))
    t.max_pairs_per_traj = obj["max_pairs_per_traj"].get<int>();
  if (obj.contains("max_pairs_per_iteration"))
    t.max_pairs_per_iteration = obj["max_pairs_per_iteration"].get<int>();
  if (obj.contains("batch_size")) t.batch_size = obj["batch_size"].get<int>();
  if (obj.contains("lr_lyapunov")) t.lr_lyapunov = obj["lr_lyapunov"].get<double>();
  if (obj.contains("lr_controller")) t.lr_controller = obj["lr_controller"].get<double>();
  if (obj.contains("lr_dynamics")) t.lr_dynamics = obj["lr_dynamics"].get<double>();
  if (obj.contains("steplr_step")) t.steplr_step = obj["steplr_step"].get<int>();
  if (obj.contains("steplr_decay")) t.steplr_decay = obj["steplr_decay"].get<double>();
  if (obj.contains("epochs_lyapunov")) t.epochs_lyapunov = obj["epochs_lyapunov"].get<int>();
  if (obj.contains("epochs_dynamics")) t.epochs_dynamics = obj["epochs_dynamics"].get<int>();
  if (obj.contains("grad_clip")) t.grad_clip = obj["grad_clip"].get<double>();
  if (obj.contains("pretrain_lr")) t.pretrain_lr = obj["pretrain_lr"].get<double>();
  if (obj.contains("pretrain_epoch_cap"))
    t.pretrain_epoch_cap = obj["pretrain_epoch_cap"].get<int>();
  if (obj.contains("pretrain_mse_target"))
    t.pretrain_mse_target = obj["pretrain_mse_target"].get<double>();
  if (obj.contains("phi_hidden")) t.phi_hidden = read_int_list(obj["phi_hidden"], "phi_hidden");
  if (obj.contains("psi_hidden")) t.psi_hidden = read_int_list(obj["psi_hidden"], "psi_hidden");
  if (obj.contains("res_hidden")) t.res_hidden = read_int_list(obj["res_hidden"], "res_hidden");
  if (obj.contains("dump_mesh_every")) t.dump_mesh_every = obj["dump_mesh_every"].get<int>();
  if (obj.contains("checkpoint_every")) t.checkpoint_every = obj["checkpoint_every"].get<int>();
}

}  // namespace

int default_boundary_samples(const std::string& system) {
  return system == "pendulum" ? 20 : 10;
}

RunConfig default_config(const std::string& system) {
  RunConfig cfg;
  cfg.system = system;
  trainer::TrainConfig& t = cfg.train;
  if (system == "pendulum") {
    t.lambda_roa = 1000.0;
    t.lambda_lip = 0.1;
    t.eta0 = 5.0;
    t.k_eta = 15;
    t.a = -2.0;
    t.b = 2.0;
    t.mesh_dims = {100, 100};
  } else if (system == "strict_feedback") {
    t.lambda_roa = 500.0;
    t.lambda_lip = 0.01;
    t.eta0 = 2.0;
    t.k_eta.reset();
    t.a = -1.0;
    t.b = 1.0;
    t.mesh_dims = {25, 25, 25};
  } else if (system == "cartpole") {
    t.lambda_roa = 500.0;
    t.lambda_lip = 0.01;
    t.eta0 = 9.0;
    t.k_eta.reset();
    t.a = -5.0;
    t.b = 5.0;
    t.mesh_dims = {10, 10, 10, 10};
  } else {
    throw std::invalid_argument("unknown system: " + system);
  }
  cfg.eval.boundary_samples = default_boundary_samples(system);
  return cfg;
}

RunConfig parse_config(const std::string& json_text) {
  json doc = json::parse(json_text);
  static const std::set<std::string> top_allowed = {
      "schema", "system", "system_params", "seed", "mesh", "out_dir", "threads", "train",
      "perturbation", "eval", "verify"};
  reject_unknown(doc, top_allowed, "top level");

  if (!doc.contains("schema") || !doc["schema"].is_number_integer() ||
      doc["schema"].get<int>() != 1) {
    throw std::invalid_argument("config requires \"schema\": 1");
  }
  if (!doc.contains("system") || !doc["system"].is_string()) {
    throw std::invalid_argument("config requires a \"system\" string");
  }

  RunConfig cfg = default_config(doc["system"].get<std::string>());
  if (doc.contains("system_params")) {
    cfg.system_params = read_number_map(doc["system_params"], "system_params");
  }
  if (doc.contains("perturbation")) {
    cfg.perturbation = read_number_map(doc["perturbation"], "perturbation");
  }
  if (doc.contains("seed")) cfg.train.seed = doc["seed"].get<std::uint64_t>();
  if (doc.contains("mesh")) cfg.train.mesh_dims = read_int_list(doc["mesh"], "mesh");
  if (doc.contains("out_dir")) cfg.train.out_dir = doc["out_dir"].get<std::string>();
  if (doc.contains("threads")) cfg.train.threads = doc["threads"].get<unsigned>();
  if (doc.contains("train")) parse_train_block(doc["train"], cfg.train);
  if (doc.contains("eval")) {
    static const std::set<std::string> allowed = {"boundary_samples", "stay_slack"};
    reject_unknown(doc["eval"], allowed, "eval");
    if (doc["eval"].contains("boundary_samples"))
      cfg.eval.boundary_samples = doc["eval"]["boundary_samples"].get<int>();
    if (doc["eval"].contains("stay_slack"))
      cfg.eval.stay_slack = doc["eval"]["stay_slack"].get<double>();
  }
  if (doc.contains("verify")) {
    static const std::set<std::string> allowed = {"zeta", "resolution", "precision",
                                                  "max_phi_width"};
    reject_unknown(doc["verify"], allowed, "verify");
    if (doc["verify"].contains("zeta")) cfg.verify.zeta = doc["verify"]["zeta"].get<double>();
    if (doc["verify"].contains("resolution"))
      cfg.verify.resolution = doc["verify"]["resolution"].get<double>();
    if (doc["verify"].contains("precision"))
      cfg.verify.precision = doc["verify"]["precision"].get<double>();
    if (doc["verify"].contains("max_phi_width"))
      cfg.verify.max_phi_width = doc["verify"]["max_phi_width"].get<int>();
  }
  cfg.train.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open config: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace roaforge::config
