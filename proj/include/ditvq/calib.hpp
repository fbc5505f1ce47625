#pragma once

// Zero-data, block-wise calibration of codebooks and candidate ratios.
//
// The floating-point model is sampled from Gaussian noise to build a cache of
// per-timestep block inputs and outputs. Each quantized block is then run on
// the cached floating-point input and matched to the cached output, so
// quantization error never accumulates across blocks or timesteps.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ditvq/dit.hpp"
#include "ditvq/tensor.hpp"
#include "ditvq/vq.hpp"

namespace ditvq {

enum class CalibMode { Full, CodebookOnly, None };

std::string to_string(CalibMode mode);
CalibMode parse_calib_mode(const std::string& text);

struct CalibConfig {
  double lambda_d = 1.0;
  double lambda_r = 1.0;
  double lambda_freeze = 1e-4;
  double lr_ratio = 5e-2;
  double lr_codebook = 1e-4;
  std::size_t batch = 16;
  std::size_t iters = 500;
  std::size_t n = 2;
  CalibMode mode = CalibMode::Full;
  std::uint64_t seed = 0;
  /// Also tune the biases of quantized layers (codebook learning rate).
  bool tune_biases = false;
  /// Hold codebooks fixed and calibrate only the ratios.
  bool freeze_codebook = false;

  void validate() const;
};

struct QuantLayerState {
  std::string name;
  LayerShape shape;
  Codebook<float> codebook;
  CandidateSet candidates;
  Assignments assignments;
  bool frozen = false;
  std::optional<std::size_t> frozen_at;  // iteration at which ratios froze
  Assignments frozen_assignments;        // assignments chosen at freeze time
};

/// K-Means + candidate sets for every block weight of `model`.
/// `plan` maps a layer name and its (o, i) to (k, d).
using LayerPlan = std::function<std::pair<std::size_t, std::size_t>(const std::string&, std::size_t, std::size_t)>;
std::vector<QuantLayerState> init_quant_layers(const DiTModel& model, const LayerPlan& plan, std::size_t n,
                                               std::uint64_t seed);

struct TrajectoryRecord {
  std::size_t y = 1;
  std::uint64_t seed = 0;
  std::vector<TrajectoryStep> steps;  // t = T..1
};

struct TrajectoryCache {
  std::size_t timesteps = 0;
  std::size_t depth = 0;
  std::vector<TrajectoryRecord> trajectories;

  const TrajectoryStep& step(std::size_t trajectory, std::size_t t) const;
  std::size_t size() const { return trajectories.size(); }
};

/// `count` floating-point trajectories with random labels y ∈ [1, classes].
TrajectoryCache build_trajectory_cache(const DiTModel& model, std::size_t count, std::uint64_t seed,
                                       double cfg_scale = 1.0);

/// Σ over blocks of the per-element mean squared error.
Tensor loss_ld(const std::vector<Tensor>& fp_outputs, const std::vector<Tensor>& q_outputs);

/// Σ (1 − |2r − 1|) over all ratios, divided by the total sub-vector count.
/// Each tensor holds the ratios of one layer, shape [count × n].
Tensor loss_lr(const std::vector<Tensor>& ratios);

/// Same quantity evaluated directly on a candidate set's logits.
double ratio_penalty(const CandidateSet& set);

/// Differentiable soft reconstruction: codebook [k × d], logits [count × n].
Tensor soft_weight(const Tensor& codebook, const Tensor& logits, const CandidateSet& set, const LayerShape& shape);
/// Differentiable hard reconstruction w.r.t. the codebook.
Tensor hard_weight(const Tensor& codebook, const Assignments& assignments, const LayerShape& shape);

/// Optimiser state for one parameter: running mean of squared gradients.
class RmsProp {
 public:
  explicit RmsProp(double lr, double decay = 0.99, double eps = 1e-8) : lr_(lr), decay_(decay), eps_(eps) {}
  void step(Tensor& param);
  const std::vector<double>& mean_square() const { return mean_sq_; }

 private:
  double lr_;
  double decay_;
  double eps_;
  std::vector<double> mean_sq_;
};

/// Trainable view of one layer during calibration.
struct LayerParams {
  const QuantLayerState* state = nullptr;
  Tensor codebook;  // [k × d]
  Tensor logits;    // [count × n]
  bool soft = true;
  Assignments hard;  // used when !soft
};

struct CalibBatch {
  std::size_t t = 1;
  std::vector<std::size_t> trajectories;
};

struct CalibLoss {
  Tensor ld;
  Tensor lr;
  Tensor total;
};

/// λ_d·L_d + λ_r·L_r on one batch. `biases` optionally overrides block biases by name.
CalibLoss calibration_loss(const DiTModel& fp, const std::vector<LayerParams>& layers, const CalibConfig& cfg,
                           const TrajectoryCache& cache, const CalibBatch& batch,
                           const std::map<std::string, Tensor>& biases = {});

struct CalibLogRecord {
  std::size_t iter = 0;
  std::size_t t = 0;
  double ld = 0.0;
  double lr = 0.0;
  double loss = 0.0;
  std::size_t frozen_layers = 0;
};

struct CalibResult {
  std::vector<QuantLayerState> layers;
  std::vector<CalibLogRecord> log;
  std::map<std::string, Tensor> biases;  // tuned biases, when enabled
};

class CalibrationDiverged : public NumericalError {
 public:
  CalibrationDiverged(const std::string& what, CalibLogRecord snapshot)
      : NumericalError(what), snapshot_(snapshot) {}
  const CalibLogRecord& snapshot() const { return snapshot_; }

 private:
  CalibLogRecord snapshot_;
};

CalibResult calibrate(const DiTModel& fp, std::vector<QuantLayerState> layers, const CalibConfig& cfg,
                      const TrajectoryCache& cache,
                      const std::function<void(const CalibLogRecord&)>& on_record = {});

/// Copy of `fp` with the named block weights replaced.
DiTModel with_block_weights(const DiTModel& fp, const std::map<std::string, MatrixF>& weights,
                            const std::map<std::string, Tensor>& biases = {});
/// Hard-reconstructed weights of every layer.
std::map<std::string, MatrixF> hard_weights(const std::vector<QuantLayerState>& layers);

/// Mean over (trajectory, t, block) of the block-output MSE when the
/// quantized block is fed the floating-point block input.
double block_output_mse(const DiTModel& fp, const DiTModel& quantized, const TrajectoryCache& cache);
std::vector<double> per_block_output_mse(const DiTModel& fp, const DiTModel& quantized, const TrajectoryCache& cache);

struct GradCosineReport {
  std::vector<double> similarities;  // one per reported codeword, all layers
  double mean = 0.0;
  std::vector<double> histogram;  // proportions over [-1, 1], 20 equal bins
  std::size_t excluded = 0;       // codewords with fewer than 2 members
};

double cosine_similarity(std::span<const float> a, std::span<const float> b);

/// Mean pairwise cosine similarity of ∂L_d/∂ŵ among sub-vectors sharing a
/// codeword, with Ŵ = C[assignments] and codebooks held fixed.
GradCosineReport grad_cosine_report(const DiTModel& fp, const std::vector<QuantLayerState>& layers,
                                    const std::vector<Assignments>& assignments, const TrajectoryCache& cache,
                                    std::size_t sample_size, std::uint64_t seed, std::size_t member_cap = 64);

/// Proportion of finalized assignments at candidate positions 1..n.
std::vector<double> candidate_position_report(const Assignments& finalized, const CandidateSet& set);

}  // namespace ditvq
