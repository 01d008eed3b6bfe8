// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dranet/image.hpp"
#include "dranet/losses.hpp"
#include "dranet/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>

namespace dranet {

enum class Schedule { StepHalving, Cosine };

struct OptimConfig {
  double lr0 = 1e-4;
  Schedule schedule = Schedule::StepHalving;
  std::int64_t halving_period = 100000;
  double lr_min = 1e-6;
  std::int64_t total_epochs = 120;
  std::int64_t iters_per_epoch = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip; 0 disables clipping.
  double grad_clip = 0.0;

  bool operator==(const OptimConfig&) const = default;
  /// Learning rate for a 0-based iteration.
  double learning_rate(std::int64_t iteration) const;
};

struct DataConfig {
  std::string train_dir;
  Index patch_size = 128;
  Index batch_size = 8;
  double sigma_min = 0.0;
  double sigma_max = 50.0;
  bool sigma_per_batch = false;
  bool augment = true;

  bool operator==(const DataConfig&) const = default;
  SamplerConfig sampler() const { return {patch_size, batch_size, {sigma_min, sigma_max, sigma_per_batch}, augment}; }
};

/// Everything a training run needs. JSON keys mirror the field names;
/// unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  OptimConfig optim;
  DataConfig data;
  std::uint64_t seed = 0;
  std::int64_t iterations = 600000;
  std::int64_t log_interval = 100;
  std::int64_t checkpoint_interval = 10000;
  std::string log_path;

  bool operator==(const RunConfig&) const = default;
  void validate() const;

  /// Desk-scale preset: width 32, one RAB + one HDRAB, 64x64 patches, batch 8, sigma 25.
  static RunConfig tiny();
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace dranet
