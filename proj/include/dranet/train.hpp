// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dranet/checkpoint.hpp"
#include "dranet/image.hpp"
#include "dranet/run_config.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dranet {

struct StepRecord {
  std::int64_t iteration = 0;  // 1-based index of the completed step
  double lr = 0.0;
  double loss = 0.0;
};

/// The training loop state: parameters, Adam moments, sampler RNG and the
/// iteration counter. Everything needed to continue bit-exactly lives in
/// checkpoint().
class Trainer {
 public:
  Trainer(RunConfig config, std::vector<Image> dataset);
  /// Resumes from a checkpoint written by a run with the same config.
  Trainer(RunConfig config, std::vector<Image> dataset, const Checkpoint& resume);

  /// sample batch -> forward -> loss -> backward -> adam -> advance.
  /// Throws NumericError on a non-finite loss.
  StepRecord step();

  Checkpoint checkpoint() const;
  std::int64_t iteration() const { return iteration_; }
  const NamedTensors<float>& params() const { return params_; }
  const RunConfig& config() const { return config_; }

 private:
  RunConfig config_;
  PatchSampler sampler_;
  NamedTensors<float> params_;
  AdamState<float> adam_;
  Rng rng_;
  std::int64_t iteration_ = 0;
};

struct TrainOutcome {
  std::vector<StepRecord> log;
  Checkpoint final_checkpoint;
};

/// Runs until config.iterations total steps, logging every log_interval
/// steps to `on_log` and writing `out` every checkpoint_interval steps and at
/// the end. A JSON log is written to config.log_path when set.
TrainOutcome run_training(const RunConfig& config, const std::filesystem::path& out,
                          const std::optional<std::filesystem::path>& resume = std::nullopt,
                          const std::function<void(const StepRecord&)>& on_log = {});

/// Reflect-pads to the model's size multiple (at least 4), runs the network,
/// crops back. The result is unclamped.
Image denoise(const Checkpoint& ckpt, const Image& noisy);

struct EvalRow {
  std::string name;
  double psnr_noisy = 0.0;
  double ssim_noisy = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct EvalReport {
  double sigma = 0.0;
  std::uint64_t seed = 0;
  std::vector<EvalRow> rows;
  EvalRow mean;

  nlohmann::json to_json() const;
  std::string table() const;
};

/// Adds seeded AWGN at `sigma` to every image in `clean_dir`, denoises, and
/// scores both noisy input and output on the clamped, rounded 8-bit grid.
EvalReport evaluate(const Checkpoint& ckpt, const std::filesystem::path& clean_dir, double sigma,
                    std::uint64_t seed = 0);

}  // namespace dranet
