#pragma once

// Configurable toy diffusion transformer: condition embedding, N blocks of
// adaLN + MHSA + adaLN + PF with residuals, and a DDPM ancestral sampler.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ditvq/tensor.hpp"

namespace ditvq {

struct DiTConfig {
  std::size_t depth = 2;     // N
  std::size_t hidden = 64;   // d_in
  std::size_t heads = 4;     // H
  std::size_t tokens = 16;   // n_tok
  std::size_t classes = 10;  // labels 1..classes; 0 is the null class
  std::size_t timesteps = 10;
  double cfg_scale = 1.0;

  void validate() const;
  std::map<std::string, std::string> to_metadata() const;
  static DiTConfig from_metadata(const std::map<std::string, std::string>& meta);
  friend bool operator==(const DiTConfig&, const DiTConfig&) = default;
};

/// Weight [out × in] and bias [out]; y = x W^T + b.
struct Linear {
  Tensor weight;
  Tensor bias;
};

struct BlockParams {
  Linear adaln1;  // c -> (gamma, beta), width 2·d_in
  Linear query;
  Linear key;
  Linear value;
  Linear attn_out;
  Linear adaln2;
  Linear fc1;  // d_in -> 4·d_in
  Linear fc2;  // 4·d_in -> d_in

  /// (local name, member) pairs in a fixed order.
  std::vector<std::pair<std::string, Linear*>> linears();
  std::vector<std::pair<std::string, const Linear*>> linears() const;
};

struct DiTModel {
  DiTConfig config;
  Tensor pos_embed;    // tokens × d_in
  Linear input_proj;   // d_in -> d_in
  Linear time_mlp1;    // d_in -> d_in
  Linear time_mlp2;    // d_in -> d_in
  Tensor class_embed;  // (classes + 1) × d_in, row 0 = null class
  std::vector<BlockParams> blocks;
  Linear output_proj;  // d_in -> d_in (noise prediction)

  /// Every parameter with its container name, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  static DiTModel from_tensors(const DiTConfig& config, const std::map<std::string, Tensor>& tensors);
};

/// True for the 2-D weights inside DiT blocks (the quantized layers).
bool is_block_weight(const std::string& name);
std::string block_layer_name(std::size_t block, const std::string& local);

/// Seeded random toy model. Weights ~ N(0, 1/fan_in).
DiTModel make_toy_model(const DiTConfig& config, std::uint64_t seed);

/// Sinusoidal embedding of a (possibly respaced) timestep value.
std::vector<float> timestep_embedding(double timestep, std::size_t width);

/// c = MLP(sinusoidal(t)) + class_embed[y]; y = 0 selects the null class.
Tensor condition_embed(const DiTModel& model, std::size_t t, std::size_t y);

/// LN(z) ⊙ (1 + γ) + β with (γ, β) = regressor(c).
Tensor adaln(const Tensor& z, const Tensor& c, const Linear& regressor);

/// Multi-head scaled dot-product self-attention over tokens.
Tensor mhsa(const Tensor& x, const BlockParams& p, std::size_t heads, std::vector<Tensor>* attention = nullptr);

/// z + MHSA(adaLN1(z)), then + PF(adaLN2(·)).
Tensor dit_block(const Tensor& z, const Tensor& c, const BlockParams& p, std::size_t heads,
                 std::vector<Tensor>* attention = nullptr);

struct BlockTrace {
  std::vector<Tensor> inputs;
  std::vector<Tensor> outputs;
};

/// Noise prediction for latent z_t at sampling step t (1..T).
Tensor predict_noise(const DiTModel& model, const Tensor& z_t, std::size_t t, std::size_t y,
                     BlockTrace* trace = nullptr);

/// Linear β schedule over 1000 training steps, respaced to T sampling steps.
struct NoiseSchedule {
  std::vector<double> timestep_values;  // index t-1 → training timestep
  std::vector<double> betas;
  std::vector<double> alphas_cumprod;

  static NoiseSchedule respaced(std::size_t sampling_steps, std::size_t train_steps = 1000,
                                double beta_start = 1e-4, double beta_end = 2e-2);
};

struct TrajectoryStep {
  std::size_t t = 0;
  Tensor z_t;
  Tensor condition;
  BlockTrace blocks;
};

struct SampleResult {
  Tensor final_latent;
  std::vector<TrajectoryStep> trajectory;  // ordered t = T..1
  std::size_t model_calls = 0;
};

struct SampleOptions {
  std::size_t y = 1;
  std::uint64_t seed = 0;
  double cfg_scale = 1.0;
  bool record_blocks = true;
  /// Clamp of the x0 estimate at each step; 0 disables.
  double clip_x0 = 1.0;
};

SampleResult ddpm_sample(const DiTModel& model, const SampleOptions& options);

}  // namespace ditvq
