// ditvq: quantize -> calibrate -> eval/report for the toy diffusion transformer.

#include <iostream>

#include <CLI11.hpp>

#include "ditvq/parallel.hpp"
#include "ditvq/pipeline.hpp"

using namespace ditvq;

namespace {

void add_model_config(CLI::App* cmd, DiTConfig& c) {
  cmd->add_option("--depth", c.depth, "number of DiT blocks (N)");
  cmd->add_option("--hidden", c.hidden, "hidden width (d_in)");
  cmd->add_option("--heads", c.heads, "attention heads (H)");
  cmd->add_option("--tokens", c.tokens, "tokens per latent (n_tok)");
  cmd->add_option("--classes", c.classes, "number of class labels");
  cmd->add_option("--timesteps", c.timesteps, "sampling steps (T)");
  cmd->add_option("--cfg_scale", c.cfg_scale, "classifier-free guidance scale used at sampling time");
}

void add_calib_config(CLI::App* cmd, CalibConfig& c, std::string& mode) {
  cmd->add_option("--lambda_d", c.lambda_d, "weight of the block-output loss");
  cmd->add_option("--lambda_r", c.lambda_r, "weight of the ratio loss");
  cmd->add_option("--lambda_freeze", c.lambda_freeze, "freeze a layer's ratios once its ratio loss drops below this");
  cmd->add_option("--lr_ratio", c.lr_ratio, "learning rate of candidate logits");
  cmd->add_option("--lr_codebook", c.lr_codebook, "learning rate of codebooks (and biases)");
  cmd->add_option("--batch", c.batch, "trajectories per step");
  cmd->add_option("--iters", c.iters, "update steps");
  cmd->add_option("--n", c.n, "candidate-set length");
  cmd->add_option("--mode", mode, "full | codebook_only | none");
  cmd->add_option("--seed", c.seed, "calibration seed");
  cmd->add_flag("--tune_biases", c.tune_biases, "also tune the biases of quantized layers");
  cmd->add_flag("--freeze_codebook", c.freeze_codebook, "hold codebooks fixed and calibrate only the ratios");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vector quantization of diffusion transformer weights"};
  app.set_config("--config", "", "TOML config file; keys are flag names, [subcommand] sections allowed");
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "worker thread cap (0 = all cores)");

  MakeToyOptions toy;
  auto* make = app.add_subcommand("make-toy-model", "write a seeded random floating-point toy model");
  add_model_config(make, toy.config);
  make->add_option("--seed", toy.seed, "weight seed");
  make->add_option("--out", toy.out, "output model file")->required();

  QuantizeOptions quant;
  auto* quantize = app.add_subcommand("quantize", "K-Means codebooks and candidate sets for every block weight");
  quantize->add_option("--model", quant.model, "floating-point model file")->required();
  quantize->add_option("--out", quant.out, "quantized model file")->required();
  quantize->add_option("--sidecar", quant.sidecar, "candidate-state file (default <out>.candidates)");
  quantize->add_option("--preset", quant.plan.preset, "2bit (k=256, d=4) or 3bit (k=64, d=2)");
  quantize->add_option("--d", quant.plan.dim, "sub-vector length");
  quantize->add_option("--bits", quant.plan.bits, "effective bits per weight; k = 2^(bits*d)");
  quantize->add_option("--layer", quant.plan.overrides, "per-layer override <layer>=<k>x<d>");
  quantize->add_option("--n", quant.n, "candidate-set length");
  quantize->add_option("--seed", quant.seed, "K-Means seed");

  CalibrateOptions cal;
  std::string cal_mode = "full";
  auto* calibrate_cmd = app.add_subcommand("calibrate", "zero-data block-wise calibration and finalization");
  calibrate_cmd->add_option("--model", cal.model, "floating-point model file")->required();
  calibrate_cmd->add_option("--quantized", cal.quantized, "quantized model from `quantize`")->required();
  calibrate_cmd->add_option("--sidecar", cal.sidecar, "candidate state (default <quantized>.candidates)");
  calibrate_cmd->add_option("--out", cal.out, "calibrated quantized model")->required();
  calibrate_cmd->add_option("--sidecar_out", cal.sidecar_out, "calibrated candidate state (default <out>.candidates)");
  calibrate_cmd->add_option("--log", cal.log, "JSON-lines log (default <out>.log.jsonl)");
  calibrate_cmd->add_option("--grad_report", cal.grad_report, "write the same-assignment gradient cosine report");
  calibrate_cmd->add_option("--grad_samples", cal.grad_samples, "cache samples used by the gradient report");
  calibrate_cmd->add_option("--cache_size", cal.cache_size, "floating-point trajectories to cache");
  calibrate_cmd->add_option("--calib_cfg_scale", cal.calib_cfg_scale, "guidance scale for calibration trajectories");
  calibrate_cmd->add_option("--cache_dir", cal.cache_dir, "trajectory cache directory (else $DITVQ_CACHE_DIR)");
  add_calib_config(calibrate_cmd, cal.calib, cal_mode);

  EvalOptions ev;
  std::vector<std::string> ev_entries;
  auto* eval = app.add_subcommand("eval", "compare models against the floating-point reference");
  eval->add_option("--model", ev.model, "floating-point reference model")->required();
  eval->add_option("--quantized", ev_entries, "<label>=<path> of a quantized or dense model (repeatable)");
  eval->add_option("--uq_bits", ev.uq_bits, "add a uniform-quantization row at this bit-width (repeatable)");
  eval->add_option("--eval_trajectories", ev.eval_trajectories, "evaluation trajectories");
  eval->add_option("--latent_samples", ev.latent_samples, "end-to-end samples for final-latent MSE");
  eval->add_option("--eval_seed", ev.eval_seed, "evaluation seed");
  eval->add_option("--out", ev.out, "JSON report");
  eval->add_option("--cache_dir", ev.cache_dir, "trajectory cache directory (else $DITVQ_CACHE_DIR)");

  ReportOptions rep;
  auto* report = app.add_subcommand("report", "loss curve, candidate positions and gradient-cosine tables");
  report->add_option("--log", rep.log, "calibration log")->required();
  report->add_option("--quantized", rep.quantized, "calibrated quantized model");
  report->add_option("--sidecar", rep.sidecar, "its candidate state (default <quantized>.candidates)");
  report->add_option("--grad_report", rep.grad_report, "gradient cosine report from calibrate");
  report->add_option("--out_dir", rep.out_dir, "directory for CSV outputs")->required();

  BenchOptions bo;
  auto* bench_cmd = app.add_subcommand("bench", "fused lookup matmul vs dequantize-then-matmul");
  bench_cmd->add_option("--size", bo.sizes, "<o>x<i>:<k>x<d>:<q> (repeatable)");
  bench_cmd->add_option("--repetitions", bo.repetitions, "timed calls per path");
  bench_cmd->add_option("--seed", bo.seed, "layer seed");
  bench_cmd->add_option("--out", bo.out, "JSON-lines report");

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "describe a model, quantized or candidate file");
  inspect->add_option("path", inspect_path, "file to describe")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    set_max_threads(threads);
    if (*make) return cmd_make_toy_model(toy, std::cout);
    if (*quantize) return cmd_quantize(quant, std::cout);
    if (*calibrate_cmd) {
      cal.calib.mode = parse_calib_mode(cal_mode);
      return cmd_calibrate(cal, std::cout);
    }
    if (*eval) {
      for (const auto& s : ev_entries) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) {
          ev.entries.push_back({s, s});
        } else {
          ev.entries.push_back({s.substr(0, eq), s.substr(eq + 1)});
        }
      }
      return cmd_eval(ev, std::cout);
    }
    if (*report) return cmd_report(rep, std::cout);
    if (*bench_cmd) return cmd_bench(bo, std::cout);
    if (*inspect) return cmd_inspect(inspect_path, std::cout);
  } catch (const CalibrationDiverged& e) {
    const auto& s = e.snapshot();
    std::cerr << "error: " << e.what() << "\nsnapshot: iter=" << s.iter << " t=" << s.t << " L_d=" << s.ld
              << " L_r=" << s.lr << " L=" << s.loss << " frozen_layers=" << s.frozen_layers << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
