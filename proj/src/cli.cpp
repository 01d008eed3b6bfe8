// SPDX-License-Identifier: Apache-2.0
#include "dranet/cli.hpp"

#include "dranet/gradcheck_suite.hpp"
#include "dranet/metrics.hpp"
#include "dranet/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <optional>

namespace dranet {

namespace {

using nlohmann::json;

struct TrainArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> iters;
  std::string resume;
  std::string train_dir;
  std::string log;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  RunConfig config = load_run_config(a.config);
  // flags override individual keys
  if (a.seed) config.seed = *a.seed;
  if (a.iters) config.iterations = *a.iters;
  if (!a.train_dir.empty()) config.data.train_dir = a.train_dir;
  if (!a.log.empty()) config.log_path = a.log;
  if (config.log_path.empty()) config.log_path = a.out + ".log.json";
  config.validate();

  out << "config " << to_json(config).dump() << '\n';
  std::optional<std::filesystem::path> resume;
  if (!a.resume.empty()) resume = a.resume;
  run_training(config, a.out, resume, [&](const StepRecord& r) {
    out << "iter " << r.iteration << " lr " << std::setprecision(6) << r.lr << " loss " << std::setprecision(8)
        << r.loss << '\n'
        << std::flush;
  });
  out << "wrote " << a.out << '\n';
  return kExitOk;
}

int cmd_denoise(const std::string& ckpt_path, const std::string& input, const std::string& output,
                std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Image noisy = read_pnm(input);
  const Image restored = denoise(ckpt, noisy);
  write_pnm(restored, output);
  out << "wrote " << output << " (" << restored.width() << "x" << restored.height() << ")\n";
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& clean_dir, double sigma, const std::string& report,
             std::uint64_t seed, std::ostream& out) {
  if (sigma != 15.0 && sigma != 25.0 && sigma != 50.0) throw ConfigError("--sigma must be one of 15, 25, 50");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const EvalReport r = evaluate(ckpt, clean_dir, sigma, seed);
  if (!report.empty()) {
    std::ofstream f(report);
    if (!f) throw DataError("cannot write report '" + report + "'");
    f << r.to_json().dump(2) << '\n';
  }
  out << r.table();
  return kExitOk;
}

int cmd_gradcheck(const std::string& op, const std::string& corrupt, std::ostream& out) {
  if (!corrupt.empty()) {
    int found = -1;
    for (int k = 0; k <= static_cast<int>(OpKind::Charbonnier); ++k) {
      if (corrupt == op_name(static_cast<OpKind>(k))) found = k;
    }
    if (found < 0) throw ConfigError("unknown op '" + corrupt + "' for --corrupt");
    corrupted_backward_op() = found;
  }
  const auto results = run_gradcheck(op);
  corrupted_backward_op() = -1;
  bool ok = true;
  for (const auto& r : results) {
    out << std::left << std::setw(28) << r.name << std::setw(10) << r.group << std::right << std::scientific
        << std::setprecision(3) << r.report.max_rel_error << std::defaultfloat << "  checked " << r.report.checked
        << " skipped " << r.report.skipped << "  " << (r.passed ? "ok" : "FAIL") << '\n';
    ok = ok && r.passed;
  }
  out << (ok ? "all items below " : "some items at or above ") << kGradcheckTolerance << '\n';
  return ok ? kExitOk : kExitNumeric;
}

void print_model(const ModelConfig& cfg, std::ostream& out) {
  out << "variant " << variant_name(cfg.variant) << '\n';
  out << "parameters " << param_count(cfg) << '\n';
  for (const auto& [block, count] : param_count_by_block(cfg)) {
    out << "  " << std::left << std::setw(20) << block << std::right << std::setw(12) << count << '\n';
  }
  const ReceptiveField rf = receptive_field(cfg);
  if (cfg.has_upper()) out << "receptive_field.upper " << rf.upper << '\n';
  if (cfg.has_lower()) {
    out << "receptive_field.lower " << rf.lower << '\n';
    out << "receptive_field.hdrab_chain " << dilated_chain_receptive_field(cfg.hdrab_rates) << '\n';
  }
  out << "input_multiple " << cfg.size_multiple() << '\n';
}

int cmd_inspect(const std::string& ckpt_path, const std::string& config_path, bool defaults, std::ostream& out) {
  if (defaults) {
    const RunConfig c;
    print_model(c.model, out);
    out << "config " << to_json(c).dump(2) << '\n';
    return kExitOk;
  }
  if (!ckpt_path.empty()) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    print_model(ckpt.config, out);
    out << "iteration " << ckpt.iteration << '\n';
    out << "config " << json{{"model", to_json(ckpt.config)}, {"run", ckpt.run_config}}.dump(2) << '\n';
    return kExitOk;
  }
  const RunConfig c = load_run_config(config_path);
  print_model(c.model, out);
  out << "config " << to_json(c).dump(2) << '\n';
  return kExitOk;
}

int cmd_add_noise(const std::string& input, double sigma, std::uint64_t seed, const std::string& output,
                  std::ostream& out) {
  const Image clean = read_pnm(input);
  Rng rng(seed);
  const Image noisy(add_awgn(clean.pixels, sigma, rng));
  write_pnm(noisy, output);
  const double p = psnr(clean.quantized255(), noisy.quantized255());
  out << "psnr " << std::fixed << std::setprecision(4) << p << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"dual-branch residual attention denoiser", "dranet"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "train a model from a JSON run config");
  c_train->add_option("--config", train.config, "run config JSON")->required();
  c_train->add_option("--out", train.out, "checkpoint path")->required();
  c_train->add_option("--seed", train.seed, "override the config seed");
  c_train->add_option("--iters", train.iters, "override the total iteration count");
  c_train->add_option("--resume", train.resume, "continue from this checkpoint");
  c_train->add_option("--train-dir", train.train_dir, "override data.train_dir");
  c_train->add_option("--log", train.log, "JSON log path (default <out>.log.json)");

  std::string ckpt, input, output, clean_dir, report, config_path, op = "all", corrupt;
  double sigma = 25.0;
  std::uint64_t seed = 0;
  bool defaults = false;

  auto* c_denoise = app.add_subcommand("denoise", "denoise one PNM image");
  c_denoise->add_option("--ckpt", ckpt)->required();
  c_denoise->add_option("--input", input)->required();
  c_denoise->add_option("--output", output)->required();

  auto* c_eval = app.add_subcommand("eval", "score a checkpoint on a directory of clean images");
  c_eval->add_option("--ckpt", ckpt)->required();
  c_eval->add_option("--clean-dir", clean_dir)->required();
  c_eval->add_option("--sigma", sigma, "15, 25 or 50")->required();
  c_eval->add_option("--report", report, "JSON report path");
  c_eval->add_option("--seed", seed, "noise seed");

  auto* c_grad = app.add_subcommand("gradcheck", "finite-difference check of every backward rule");
  c_grad->add_option("--op", op, "item name, group (primitive, block, loss, model) or all");
  c_grad->add_option("--corrupt", corrupt)->group("");
  c_grad->add_flag_callback(
      "--list",
      [&] {
        for (const auto& n : gradcheck_names()) out << n << '\n';
        throw CLI::Success();
      },
      "list item names");

  auto* c_inspect = app.add_subcommand("inspect", "parameter counts, receptive fields and config");
  auto* o_ckpt = c_inspect->add_option("--ckpt", ckpt);
  auto* o_cfg = c_inspect->add_option("--config", config_path);
  auto* o_def = c_inspect->add_flag("--defaults", defaults, "print the default run config");
  o_ckpt->excludes(o_cfg)->excludes(o_def);
  o_cfg->excludes(o_def);
  c_inspect->require_option(1);

  auto* c_noise = app.add_subcommand("add-noise", "add seeded Gaussian noise to a PNM image");
  c_noise->add_option("--input", input)->required();
  c_noise->add_option("--sigma", sigma)->required();
  c_noise->add_option("--seed", seed);
  c_noise->add_option("--output", output)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*c_train) return cmd_train(train, out);
    if (*c_denoise) return cmd_denoise(ckpt, input, output, out);
    if (*c_eval) return cmd_eval(ckpt, clean_dir, sigma, report, seed, out);
    if (*c_grad) return cmd_gradcheck(op, corrupt, out);
    if (*c_inspect) return cmd_inspect(ckpt, config_path, defaults, out);
    if (*c_noise) return cmd_add_noise(input, sigma, seed, output, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ShapeError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitConfig;
}

}  // namespace dranet
