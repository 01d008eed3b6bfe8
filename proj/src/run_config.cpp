// SPDX-License-Identifier: Apache-2.0
#include "dranet/run_config.hpp"

#include "dranet/optim.hpp"

#include <fstream>
#include <set>

namespace dranet {

using nlohmann::json;

namespace {

/// Reads declared keys from one JSON object and rejects the rest.
class StrictObject {
 public:
  StrictObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  template <typename T>
  void read(const char* key, T& field) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      field = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

const char* schedule_name(Schedule s) { return s == Schedule::StepHalving ? "step_halving" : "cosine"; }

Schedule parse_schedule(const std::string& s) {
  if (s == "step_halving") return Schedule::StepHalving;
  if (s == "cosine") return Schedule::Cosine;
  throw ConfigError("unknown schedule '" + s + "'");
}

}  // namespace

double OptimConfig::learning_rate(std::int64_t iteration) const {
  if (schedule == Schedule::StepHalving) return lr_step_halving(iteration, lr0, halving_period);
  const std::int64_t epoch = std::min(iteration / iters_per_epoch, total_epochs);
  return lr_cosine(static_cast<double>(epoch), static_cast<double>(total_epochs), lr0, lr_min);
}

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  if (!(optim.lr0 > 0)) throw ConfigError("optim.lr0 must be > 0");
  if (optim.halving_period < 1 || optim.iters_per_epoch < 1 || optim.total_epochs < 1) {
    throw ConfigError("optim periods must be >= 1");
  }
  if (optim.grad_clip < 0) throw ConfigError("optim.grad_clip must be >= 0");
  if (data.patch_size < 1 || data.batch_size < 1) throw ConfigError("data.patch_size and data.batch_size must be >= 1");
  if (data.patch_size % model.size_multiple() != 0) {
    throw ConfigError("data.patch_size must be a multiple of " + std::to_string(model.size_multiple()));
  }
  SigmaRange{data.sigma_min, data.sigma_max, data.sigma_per_batch}.validate();
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (log_interval < 1 || checkpoint_interval < 1) throw ConfigError("log/checkpoint intervals must be >= 1");
}

RunConfig RunConfig::tiny() {
  RunConfig c;
  c.model = ModelConfig::tiny();
  c.optim.lr0 = 1e-3;
  c.optim.halving_period = 1000;
  c.data.patch_size = 64;
  c.data.batch_size = 8;
  c.data.sigma_min = 25.0;
  c.data.sigma_max = 25.0;
  c.iterations = 1000;
  c.log_interval = 10;
  c.checkpoint_interval = 250;
  return c;
}

json to_json(const ModelConfig& c) {
  return json{{"in_channels", c.in_channels}, {"width", c.width},           {"n_rab", c.n_rab},
              {"n_hdrab", c.n_hdrab},         {"rab_pairs", c.rab_pairs},   {"hdrab_rates", c.hdrab_rates},
              {"cam_ratio", c.cam_ratio},     {"variant", variant_name(c.variant)}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  StrictObject o(j, "model");
  o.read("in_channels", c.in_channels);
  o.read("width", c.width);
  o.read("n_rab", c.n_rab);
  o.read("n_hdrab", c.n_hdrab);
  o.read("rab_pairs", c.rab_pairs);
  o.read("hdrab_rates", c.hdrab_rates);
  o.read("cam_ratio", c.cam_ratio);
  std::string variant = variant_name(c.variant);
  o.read("variant", variant);
  c.variant = parse_variant(variant);
  o.finish();
  c.validate();
  return c;
}

json to_json(const RunConfig& c) {
  return json{
      {"model", to_json(c.model)},
      {"loss",
       {{"mode", loss_mode_name(c.loss.mode)}, {"epsilon", c.loss.epsilon}, {"lambda_edge", c.loss.lambda_edge}}},
      {"optim",
       {{"lr0", c.optim.lr0},
        {"schedule", schedule_name(c.optim.schedule)},
        {"halving_period", c.optim.halving_period},
        {"lr_min", c.optim.lr_min},
        {"total_epochs", c.optim.total_epochs},
        {"iters_per_epoch", c.optim.iters_per_epoch},
        {"beta1", c.optim.beta1},
        {"beta2", c.optim.beta2},
        {"eps", c.optim.eps},
        {"grad_clip", c.optim.grad_clip}}},
      {"data",
       {{"train_dir", c.data.train_dir},
        {"patch_size", c.data.patch_size},
        {"batch_size", c.data.batch_size},
        {"sigma_min", c.data.sigma_min},
        {"sigma_max", c.data.sigma_max},
        {"sigma_per_batch", c.data.sigma_per_batch},
        {"augment", c.data.augment}}},
      {"seed", c.seed},
      {"iterations", c.iterations},
      {"log_interval", c.log_interval},
      {"checkpoint_interval", c.checkpoint_interval},
      {"log_path", c.log_path},
  };
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  StrictObject o(j, "config");
  if (const json* m = o.child("model")) c.model = model_config_from_json(*m);
  if (const json* l = o.child("loss")) {
    StrictObject lo(*l, "loss");
    std::string mode = loss_mode_name(c.loss.mode);
    lo.read("mode", mode);
    c.loss.mode = parse_loss_mode(mode);
    lo.read("epsilon", c.loss.epsilon);
    lo.read("lambda_edge", c.loss.lambda_edge);
    lo.finish();
  }
  if (const json* p = o.child("optim")) {
    StrictObject po(*p, "optim");
    po.read("lr0", c.optim.lr0);
    std::string schedule = schedule_name(c.optim.schedule);
    po.read("schedule", schedule);
    c.optim.schedule = parse_schedule(schedule);
    po.read("halving_period", c.optim.halving_period);
    po.read("lr_min", c.optim.lr_min);
    po.read("total_epochs", c.optim.total_epochs);
    po.read("iters_per_epoch", c.optim.iters_per_epoch);
    po.read("beta1", c.optim.beta1);
    po.read("beta2", c.optim.beta2);
    po.read("eps", c.optim.eps);
    po.read("grad_clip", c.optim.grad_clip);
    po.finish();
  }
  if (const json* d = o.child("data")) {
    StrictObject dobj(*d, "data");
    dobj.read("train_dir", c.data.train_dir);
    dobj.read("patch_size", c.data.patch_size);
    dobj.read("batch_size", c.data.batch_size);
    dobj.read("sigma_min", c.data.sigma_min);
    dobj.read("sigma_max", c.data.sigma_max);
    dobj.read("sigma_per_batch", c.data.sigma_per_batch);
    dobj.read("augment", c.data.augment);
    dobj.finish();
  }
  o.read("seed", c.seed);
  o.read("iterations", c.iterations);
  o.read("log_interval", c.log_interval);
  o.read("checkpoint_interval", c.checkpoint_interval);
  o.read("log_path", c.log_path);
  o.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  // relative data paths resolve against the config file's directory
  if (!c.data.train_dir.empty() && std::filesystem::path(c.data.train_dir).is_relative()) {
    c.data.train_dir = (path.parent_path() / c.data.train_dir).lexically_normal().string();
  }
  return c;
}

}  // namespace dranet
