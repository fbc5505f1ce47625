#pragma once

// Command implementations behind the `ditvq` executable, callable in-process.
//
// Commands signal failures with exceptions from common.hpp. `exit_code_for`
// maps them to process exit codes: 2 for configuration or input problems,
// 3 for numerical failure.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ditvq/calib.hpp"
#include "ditvq/dit.hpp"
#include "ditvq/kernel.hpp"
#include "ditvq/modelio.hpp"

namespace ditvq {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& e);

// Model <-> file conversion.

TensorContainer model_to_container(const DiTModel& model);
DiTModel model_from_container(const TensorContainer& container);
DiTModel load_model(const fs::path& path);
void save_model(const DiTModel& model, const fs::path& path);

/// Quantized file for `layers` (using each layer's `assignments`); every other
/// parameter of `fp` is stored as passthrough, with `biases` substituted.
QuantizedModelFile make_quantized_file(const DiTModel& fp, const std::vector<QuantLayerState>& layers,
                                       const std::map<std::string, Tensor>& biases = {});
std::vector<QuantLayerState> layers_from_file(const QuantizedModelFile& file);
DiTModel model_from_quantized(const QuantizedModelFile& file);
bool is_quantized_file(std::span<const std::uint8_t> bytes);

/// Candidate sets and logits of every layer, as a tensor container.
TensorContainer candidates_to_container(const std::vector<QuantLayerState>& layers);
void apply_candidates(std::vector<QuantLayerState>& layers, const TensorContainer& sidecar);

// Layer plans.

struct PlanSpec {
  std::string preset;  // "2bit" (k=256, d=4), "3bit" (k=64, d=2) or empty
  std::size_t dim = 0;
  double bits = 0.0;  // effective bits per weight; k = 2^(bits·d)
  /// "<layer>=<k>x<d>"; <layer> is a full name or a per-block local name such as fc1.
  std::vector<std::string> overrides;
};

LayerPlan resolve_plan(const PlanSpec& spec);
/// One message per layer the plan cannot quantize; empty when valid.
std::vector<std::string> plan_diagnostics(const DiTModel& model, const LayerPlan& plan);

// Trajectory cache persistence.

TensorContainer cache_to_container(const TrajectoryCache& cache);
TrajectoryCache cache_from_container(const TensorContainer& container);

/// build_trajectory_cache, memoised in `dir` when given. Entries are keyed by
/// the model bytes and the generation parameters.
TrajectoryCache cached_trajectories(const DiTModel& model, std::size_t count, std::uint64_t seed, double cfg_scale,
                                    const std::optional<fs::path>& dir);

/// `flag` when set, else $DITVQ_CACHE_DIR when set, else no disk cache.
std::optional<fs::path> resolve_cache_dir(const std::string& flag);

// Commands.

struct MakeToyOptions {
  DiTConfig config;
  std::uint64_t seed = 0;
  fs::path out;
};
int cmd_make_toy_model(const MakeToyOptions& opt, std::ostream& out);

struct QuantizeOptions {
  fs::path model;
  fs::path out;
  fs::path sidecar;  // default: <out>.candidates
  PlanSpec plan;
  std::size_t n = 2;
  std::uint64_t seed = 0;
};
int cmd_quantize(const QuantizeOptions& opt, std::ostream& out);

struct CalibrateOptions {
  fs::path model;
  fs::path quantized;
  fs::path sidecar;      // default: <quantized>.candidates
  fs::path out;
  fs::path sidecar_out;  // default: <out>.candidates
  fs::path log;          // default: <out>.log.jsonl
  fs::path grad_report;  // optional
  std::size_t grad_samples = 8;
  CalibConfig calib;
  std::size_t cache_size = 256;
  double calib_cfg_scale = 1.0;
  std::string cache_dir;
};
int cmd_calibrate(const CalibrateOptions& opt, std::ostream& out);

struct EvalEntry {
  std::string label;
  fs::path path;
};

struct EvalOptions {
  fs::path model;
  std::vector<EvalEntry> entries;
  std::vector<unsigned> uq_bits;
  std::size_t eval_trajectories = 16;
  std::size_t latent_samples = 4;
  std::uint64_t eval_seed = 1000;
  fs::path out;  // optional JSON report
  std::string cache_dir;
};
int cmd_eval(const EvalOptions& opt, std::ostream& out);

struct ReportOptions {
  fs::path log;
  fs::path quantized;
  fs::path sidecar;  // default: <quantized>.candidates
  fs::path grad_report;
  fs::path out_dir;
};
int cmd_report(const ReportOptions& opt, std::ostream& out);

struct BenchOptions {
  std::vector<std::string> sizes;  // "<o>x<i>:<k>x<d>:<q>"
  std::size_t repetitions = 3;
  std::uint64_t seed = 0;
  fs::path out;  // optional JSON-lines report
};
int cmd_bench(const BenchOptions& opt, std::ostream& out);

int cmd_inspect(const fs::path& path, std::ostream& out);

}  // namespace ditvq
