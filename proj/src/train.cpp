// SPDX-License-Identifier: Apache-2.0
#include "dranet/train.hpp"

#include "dranet/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dranet {

using nlohmann::json;

Trainer::Trainer(RunConfig config, std::vector<Image> dataset)
    : config_(std::move(config)),
      sampler_(std::move(dataset), config_.data.sampler()),
      params_(build<float>(config_.model, config_.seed)),
      adam_(AdamState<float>::for_params(params_, config_.optim.beta1, config_.optim.beta2, config_.optim.eps)),
      // distinct stream from the initializer
      rng_(config_.seed ^ 0x9e3779b97f4a7c15ULL) {
  config_.validate();
}

Trainer::Trainer(RunConfig config, std::vector<Image> dataset, const Checkpoint& resume)
    : Trainer(std::move(config), std::move(dataset)) {
  if (resume.config != config_.model) throw ConfigError("resume checkpoint was trained with a different model config");
  params_ = resume.params;
  if (resume.optimizer) adam_ = *resume.optimizer;
  rng_.restore(resume.rng_state);
  iteration_ = static_cast<std::int64_t>(resume.iteration);
}

StepRecord Trainer::step() {
  const PatchBatch batch = sampler_.next(rng_);
  Tape<float> tape;
  const auto vars = ParamVars<float>::bind(tape, params_);
  const Var<float> noisy(batch.noisy);
  const Var<float> clean(batch.clean);
  const Var<float> loss = training_loss(forward(vars, config_.model, noisy), clean, config_.loss);
  const double loss_value = loss.value()[0];
  if (!std::isfinite(loss_value)) {
    throw NumericError("non-finite loss at iteration " + std::to_string(iteration_ + 1));
  }
  const GradientMap<float> grads = tape.backward(loss);
  const double lr = config_.optim.learning_rate(iteration_);
  std::optional<double> clip;
  if (config_.optim.grad_clip > 0) clip = config_.optim.grad_clip;
  adam_step(params_, grads, adam_, lr, clip);
  ++iteration_;
  return {iteration_, lr, loss_value};
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ckpt;
  ckpt.config = config_.model;
  ckpt.params = params_;
  ckpt.optimizer = adam_;
  ckpt.iteration = static_cast<std::uint64_t>(iteration_);
  ckpt.seed = config_.seed;
  ckpt.rng_state = rng_.state();
  ckpt.run_config = to_json(config_);
  return ckpt;
}

TrainOutcome run_training(const RunConfig& config, const std::filesystem::path& out,
                          const std::optional<std::filesystem::path>& resume,
                          const std::function<void(const StepRecord&)>& on_log) {
  config.validate();
  if (config.data.train_dir.empty()) throw ConfigError("data.train_dir is not set");
  auto images = load_dataset(config.data.train_dir, config.model.in_channels);
  std::optional<Trainer> trainer;
  if (resume) {
    trainer.emplace(config, std::move(images), load_checkpoint(*resume));
  } else {
    trainer.emplace(config, std::move(images));
  }

  TrainOutcome outcome;
  json log_json = json::array();
  auto flush_log = [&] {
    if (config.log_path.empty()) return;
    std::ofstream f(config.log_path);
    f << json{{"config", to_json(config)}, {"log", log_json}}.dump(2) << '\n';
  };
  while (trainer->iteration() < config.iterations) {
    const StepRecord rec = trainer->step();
    outcome.log.push_back(rec);
    if (rec.iteration % config.log_interval == 0 || rec.iteration == 1 || rec.iteration == config.iterations) {
      log_json.push_back({{"iter", rec.iteration}, {"lr", rec.lr}, {"loss", rec.loss}});
      if (on_log) on_log(rec);
    }
    if (rec.iteration % config.checkpoint_interval == 0) {
      save_checkpoint(trainer->checkpoint(), out);
      flush_log();
    }
  }
  outcome.final_checkpoint = trainer->checkpoint();
  save_checkpoint(outcome.final_checkpoint, out);
  flush_log();
  return outcome;
}

Image denoise(const Checkpoint& ckpt, const Image& noisy) {
  if (noisy.channels() != ckpt.config.in_channels) {
    throw ConfigError("image has " + std::to_string(noisy.channels()) + " channels, checkpoint expects " +
                      std::to_string(ckpt.config.in_channels));
  }
  const Index multiple = std::max<Index>(4, ckpt.config.size_multiple());
  const Image padded = pad_reflect(noisy, multiple);
  const Tensor4f out = forward(ckpt.params, ckpt.config, padded.pixels.cast<float>());
  return crop(Image(out.cast<double>()), 0, 0, noisy.height(), noisy.width());
}

json EvalReport::to_json() const {
  auto number = [](double v) -> json { return std::isfinite(v) ? json(v) : json("inf"); };
  auto row = [&](const EvalRow& r) {
    return json{{"name", r.name},
                {"psnr_noisy", number(r.psnr_noisy)},
                {"ssim_noisy", number(r.ssim_noisy)},
                {"psnr", number(r.psnr)},
                {"ssim", number(r.ssim)}};
  };
  json images = json::array();
  for (const auto& r : rows) images.push_back(row(r));
  return json{{"sigma", sigma}, {"seed", seed}, {"images", images}, {"mean", row(mean)}};
}

std::string EvalReport::table() const {
  std::size_t width = 5;
  for (const auto& r : rows) width = std::max(width, r.name.size());
  std::ostringstream os;
  os << std::fixed;
  auto line = [&](const EvalRow& r) {
    os << std::left << std::setw(static_cast<int>(width)) << r.name << std::right << std::setprecision(2)
       << std::setw(12) << r.psnr_noisy << std::setprecision(4) << std::setw(12) << r.ssim_noisy
       << std::setprecision(2) << std::setw(12) << r.psnr << std::setprecision(4) << std::setw(12) << r.ssim << '\n';
  };
  os << std::left << std::setw(static_cast<int>(width)) << "image" << std::right << std::setw(12) << "noisy_psnr"
     << std::setw(12) << "noisy_ssim" << std::setw(12) << "psnr" << std::setw(12) << "ssim" << '\n';
  for (const auto& r : rows) line(r);
  line(mean);
  return os.str();
}

EvalReport evaluate(const Checkpoint& ckpt, const std::filesystem::path& clean_dir, double sigma, std::uint64_t seed) {
  std::vector<std::filesystem::path> paths;
  const auto images = load_dataset(clean_dir, ckpt.config.in_channels, &paths);
  Rng rng(seed);
  EvalReport report;
  report.sigma = sigma;
  report.seed = seed;
  report.mean.name = "mean";
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& clean = images[i];
    const Image noisy(add_awgn(clean.pixels, sigma, rng));
    const Image restored = denoise(ckpt, noisy);
    const Tensor4d ref = clean.quantized255();
    const Tensor4d q_noisy = noisy.quantized255();
    const Tensor4d q_out = restored.quantized255();
    EvalRow row{paths[i].filename().string(), psnr(ref, q_noisy), ssim(ref, q_noisy), psnr(ref, q_out),
                ssim(ref, q_out)};
    report.mean.psnr_noisy += row.psnr_noisy;
    report.mean.ssim_noisy += row.ssim_noisy;
    report.mean.psnr += row.psnr;
    report.mean.ssim += row.ssim;
    report.rows.push_back(std::move(row));
  }
  const auto count = static_cast<double>(report.rows.size());
  report.mean.psnr_noisy /= count;
  report.mean.ssim_noisy /= count;
  report.mean.psnr /= count;
  report.mean.ssim /= count;
  return report;
}

}  // namespace dranet
