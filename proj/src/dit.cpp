#include "ditvq/dit.hpp"

#include <algorithm>
#include <cmath>
#include <regex>
#include <sstream>

namespace ditvq {

namespace {

Tensor random_tensor(Rng& rng, const Shape& shape, double stddev) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(stddev * rng.normal());
  return Tensor::from(shape, std::move(v));
}

Linear random_linear(Rng& rng, std::size_t out, std::size_t in, double bias_std = 0.02) {
  return {random_tensor(rng, {out, in}, 1.0 / std::sqrt(static_cast<double>(in))),
          random_tensor(rng, {out}, bias_std)};
}

std::size_t parse_size(const std::map<std::string, std::string>& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw InputError("model config: missing '" + key + "'");
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw InputError("model config: bad value for '" + key + "'");
  }
}

}  // namespace

void DiTConfig::validate() const {
  if (depth < 1) throw ConfigError("depth must be >= 1");
  if (heads < 1 || hidden % heads != 0) throw ConfigError("hidden must be divisible by heads");
  if (hidden < 2 || hidden % 2 != 0) throw ConfigError("hidden must be even and >= 2");
  if (timesteps < 2) throw ConfigError("timesteps must be >= 2");
  if (tokens < 1) throw ConfigError("tokens must be >= 1");
  if (classes < 1) throw ConfigError("classes must be >= 1");
}

std::map<std::string, std::string> DiTConfig::to_metadata() const {
  std::ostringstream cfg;
  cfg.precision(17);
  cfg << cfg_scale;
  return {{"depth", std::to_string(depth)},         {"hidden", std::to_string(hidden)},
          {"heads", std::to_string(heads)},         {"tokens", std::to_string(tokens)},
          {"classes", std::to_string(classes)},     {"timesteps", std::to_string(timesteps)},
          {"cfg_scale", cfg.str()}};
}

DiTConfig DiTConfig::from_metadata(const std::map<std::string, std::string>& meta) {
  DiTConfig c;
  c.depth = parse_size(meta, "depth");
  c.hidden = parse_size(meta, "hidden");
  c.heads = parse_size(meta, "heads");
  c.tokens = parse_size(meta, "tokens");
  c.classes = parse_size(meta, "classes");
  c.timesteps = parse_size(meta, "timesteps");
  auto it = meta.find("cfg_scale");
  if (it != meta.end()) c.cfg_scale = std::stod(it->second);
  c.validate();
  return c;
}

std::vector<std::pair<std::string, Linear*>> BlockParams::linears() {
  return {{"adaln1", &adaln1}, {"query", &query}, {"key", &key},   {"value", &value},
          {"attn_out", &attn_out}, {"adaln2", &adaln2}, {"fc1", &fc1}, {"fc2", &fc2}};
}

std::vector<std::pair<std::string, const Linear*>> BlockParams::linears() const {
  return {{"adaln1", &adaln1}, {"query", &query}, {"key", &key},   {"value", &value},
          {"attn_out", &attn_out}, {"adaln2", &adaln2}, {"fc1", &fc1}, {"fc2", &fc2}};
}

std::string block_layer_name(std::size_t block, const std::string& local) {
  return "blocks." + std::to_string(block) + "." + local + ".weight";
}

bool is_block_weight(const std::string& name) {
  static const std::regex re(R"(blocks\.\d+\.[a-z0-9_]+\.weight)");
  return std::regex_match(name, re);
}

std::vector<std::pair<std::string, Tensor>> DiTModel::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto push_linear = [&out](const std::string& prefix, const Linear& l) {
    out.emplace_back(prefix + ".weight", l.weight);
    out.emplace_back(prefix + ".bias", l.bias);
  };
  out.emplace_back("pos_embed", pos_embed);
  push_linear("input_proj", input_proj);
  push_linear("time_mlp1", time_mlp1);
  push_linear("time_mlp2", time_mlp2);
  out.emplace_back("class_embed", class_embed);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (const auto& [local, lin] : blocks[b].linears()) {
      push_linear("blocks." + std::to_string(b) + "." + local, *lin);
    }
  }
  push_linear("output_proj", output_proj);
  return out;
}

DiTModel DiTModel::from_tensors(const DiTConfig& config, const std::map<std::string, Tensor>& tensors) {
  config.validate();
  const std::size_t d = config.hidden;
  auto get = [&tensors](const std::string& name, const Shape& shape) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw InputError("model: missing tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw InputError("model: tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                       shape_str(shape));
    }
    return it->second;
  };
  auto get_linear = [&get](const std::string& prefix, std::size_t out, std::size_t in) {
    return Linear{get(prefix + ".weight", {out, in}), get(prefix + ".bias", {out})};
  };
  DiTModel m;
  m.config = config;
  m.pos_embed = get("pos_embed", {config.tokens, d});
  m.input_proj = get_linear("input_proj", d, d);
  m.time_mlp1 = get_linear("time_mlp1", d, d);
  m.time_mlp2 = get_linear("time_mlp2", d, d);
  m.class_embed = get("class_embed", {config.classes + 1, d});
  m.blocks.resize(config.depth);
  for (std::size_t b = 0; b < config.depth; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    auto& blk = m.blocks[b];
    blk.adaln1 = get_linear(p + "adaln1", 2 * d, d);
    blk.query = get_linear(p + "query", d, d);
    blk.key = get_linear(p + "key", d, d);
    blk.value = get_linear(p + "value", d, d);
    blk.attn_out = get_linear(p + "attn_out", d, d);
    blk.adaln2 = get_linear(p + "adaln2", 2 * d, d);
    blk.fc1 = get_linear(p + "fc1", 4 * d, d);
    blk.fc2 = get_linear(p + "fc2", d, 4 * d);
  }
  m.output_proj = get_linear("output_proj", d, d);
  return m;
}

DiTModel make_toy_model(const DiTConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t d = config.hidden;
  DiTModel m;
  m.config = config;
  m.pos_embed = random_tensor(rng, {config.tokens, d}, 0.1);
  m.input_proj = random_linear(rng, d, d);
  m.time_mlp1 = random_linear(rng, d, d);
  m.time_mlp2 = random_linear(rng, d, d);
  m.class_embed = random_tensor(rng, {config.classes + 1, d}, 1.0);
  m.blocks.resize(config.depth);
  for (auto& blk : m.blocks) {
    blk.adaln1 = random_linear(rng, 2 * d, d);
    blk.query = random_linear(rng, d, d);
    blk.key = random_linear(rng, d, d);
    blk.value = random_linear(rng, d, d);
    blk.attn_out = random_linear(rng, d, d);
    blk.adaln2 = random_linear(rng, 2 * d, d);
    blk.fc1 = random_linear(rng, 4 * d, d);
    blk.fc2 = random_linear(rng, d, 4 * d);
  }
  m.output_proj = random_linear(rng, d, d);
  return m;
}

std::vector<float> timestep_embedding(double timestep, std::size_t width) {
  const std::size_t half = width / 2;
  std::vector<float> emb(width, 0.0F);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    emb[i] = static_cast<float>(std::cos(timestep * freq));
    emb[half + i] = static_cast<float>(std::sin(timestep * freq));
  }
  return emb;
}

Tensor condition_embed(const DiTModel& model, std::size_t t, std::size_t y) {
  const auto& cfg = model.config;
  if (t < 1 || t > cfg.timesteps) throw InputError("condition_embed: t=" + std::to_string(t) + " outside [1, T]");
  if (y > cfg.classes) throw InputError("condition_embed: class " + std::to_string(y) + " out of range");
  const auto schedule = NoiseSchedule::respaced(cfg.timesteps);
  const Tensor freq = Tensor::from({cfg.hidden}, timestep_embedding(schedule.timestep_values[t - 1], cfg.hidden));
  Tensor h = linear(freq, model.time_mlp1.weight, model.time_mlp1.bias);
  h = linear(activation_gelu(h), model.time_mlp2.weight, model.time_mlp2.bias);
  return add(h, row(model.class_embed, y));
}

Tensor adaln(const Tensor& z, const Tensor& c, const Linear& regressor) {
  const std::size_t d = z.shape().back();
  if (c.rank() != 1 || c.dim(0) != regressor.weight.dim(1) || regressor.weight.dim(0) != 2 * d) {
    throw DimensionError("adaln: condition " + shape_str(c.shape()) + " / regressor " +
                         shape_str(regressor.weight.shape()) + " incompatible with latent " + shape_str(z.shape()));
  }
  const Tensor mod = linear(c, regressor.weight, regressor.bias);
  const Tensor gamma = slice_last(mod, 0, d);
  const Tensor beta = slice_last(mod, d, 2 * d);
  return add_row(mul_row(layer_norm(z), add_scalar(gamma, 1.0F)), beta);
}

Tensor mhsa(const Tensor& x, const BlockParams& p, std::size_t heads, std::vector<Tensor>* attention) {
  const std::size_t d = x.shape().back();
  if (heads == 0 || d % heads != 0) throw DimensionError("mhsa: width not divisible by heads");
  const std::size_t dh = d / heads;
  const Tensor q = linear(x, p.query.weight, p.query.bias);
  const Tensor k = linear(x, p.key.weight, p.key.bias);
  const Tensor v = linear(x, p.value.weight, p.value.bias);
  const float inv_sqrt = 1.0F / std::sqrt(static_cast<float>(dh));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice_last(q, h * dh, (h + 1) * dh);
    const Tensor kh = slice_last(k, h * dh, (h + 1) * dh);
    const Tensor vh = slice_last(v, h * dh, (h + 1) * dh);
    const Tensor attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
    if (attention) attention->push_back(attn);
    outs.push_back(matmul(attn, vh));
  }
  return linear(concat_last(outs), p.attn_out.weight, p.attn_out.bias);
}

Tensor dit_block(const Tensor& z, const Tensor& c, const BlockParams& p, std::size_t heads,
                 std::vector<Tensor>* attention) {
  if (z.rank() != 2) throw DimensionError("dit_block: latent must be tokens × width");
  Tensor x = add(z, mhsa(adaln(z, c, p.adaln1), p, heads, attention));
  const Tensor h = activation_gelu(linear(adaln(x, c, p.adaln2), p.fc1.weight, p.fc1.bias));
  return add(x, linear(h, p.fc2.weight, p.fc2.bias));
}

Tensor predict_noise(const DiTModel& model, const Tensor& z_t, std::size_t t, std::size_t y, BlockTrace* trace) {
  const auto& cfg = model.config;
  if (z_t.shape() != Shape{cfg.tokens, cfg.hidden}) {
    throw DimensionError("predict_noise: latent " + shape_str(z_t.shape()) + " does not match the model");
  }
  const Tensor c = condition_embed(model, t, y);
  Tensor x = add(linear(z_t, model.input_proj.weight, model.input_proj.bias), model.pos_embed);
  for (const auto& blk : model.blocks) {
    if (trace) trace->inputs.push_back(x);
    x = dit_block(x, c, blk, cfg.heads);
    if (trace) trace->outputs.push_back(x);
  }
  return linear(layer_norm(x), model.output_proj.weight, model.output_proj.bias);
}

NoiseSchedule NoiseSchedule::respaced(std::size_t sampling_steps, std::size_t train_steps, double beta_start,
                                      double beta_end) {
  if (sampling_steps < 2 || sampling_steps > train_steps) throw ConfigError("schedule: bad step count");
  std::vector<double> base_cumprod(train_steps);
  double acc = 1.0;
  for (std::size_t i = 0; i < train_steps; ++i) {
    const double beta = beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(train_steps - 1);
    acc *= 1.0 - beta;
    base_cumprod[i] = acc;
  }
  NoiseSchedule s;
  double prev = 1.0;
  for (std::size_t j = 0; j < sampling_steps; ++j) {
    // Evenly spaced over [0, train_steps - 1], rounded to the nearest step.
    const auto ts = static_cast<std::size_t>(std::llround(static_cast<double>(j) * static_cast<double>(train_steps - 1) /
                                                          static_cast<double>(sampling_steps - 1)));
    s.timestep_values.push_back(static_cast<double>(ts));
    s.alphas_cumprod.push_back(base_cumprod[ts]);
    s.betas.push_back(1.0 - base_cumprod[ts] / prev);
    prev = base_cumprod[ts];
  }
  return s;
}

SampleResult ddpm_sample(const DiTModel& model, const SampleOptions& options) {
  const auto& cfg = model.config;
  if (options.y < 1 || options.y > cfg.classes) {
    throw InputError("ddpm_sample: class " + std::to_string(options.y) + " outside [1, classes]");
  }
  const auto schedule = NoiseSchedule::respaced(cfg.timesteps);
  Rng rng(options.seed);
  const Shape shape{cfg.tokens, cfg.hidden};
  std::vector<float> noise(shape_numel(shape));
  for (auto& v : noise) v = static_cast<float>(rng.normal());
  Tensor z = Tensor::from(shape, std::move(noise));

  SampleResult result;
  for (std::size_t t = cfg.timesteps; t >= 1; --t) {
    TrajectoryStep step;
    step.t = t;
    step.z_t = z;
    step.condition = condition_embed(model, t, options.y);
    Tensor eps = predict_noise(model, z, t, options.y, options.record_blocks ? &step.blocks : nullptr);
    ++result.model_calls;
    if (options.cfg_scale != 1.0) {
      const Tensor eps_uncond = predict_noise(model, z, t, 0);
      ++result.model_calls;
      eps = add(eps_uncond, scale(sub(eps, eps_uncond), static_cast<float>(options.cfg_scale)));
    }
    result.trajectory.push_back(std::move(step));

    const double abar = schedule.alphas_cumprod[t - 1];
    const double abar_prev = t > 1 ? schedule.alphas_cumprod[t - 2] : 1.0;
    const double beta = schedule.betas[t - 1];
    const double alpha = 1.0 - beta;
    // Posterior q(z_{t-1} | z_t, x0) with x0 recovered from the noise estimate.
    const double x0_coef = beta * std::sqrt(abar_prev) / (1.0 - abar);
    const double z_coef = (1.0 - abar_prev) * std::sqrt(alpha) / (1.0 - abar);
    const double var = beta * (1.0 - abar_prev) / (1.0 - abar);
    const double sigma = t > 1 ? std::sqrt(var) : 0.0;
    std::vector<float> next(z.numel());
    for (std::size_t i = 0; i < next.size(); ++i) {
      const double zi = z.data()[i];
      double x0 = (zi - std::sqrt(1.0 - abar) * eps.data()[i]) / std::sqrt(abar);
      if (options.clip_x0 > 0.0) x0 = std::clamp(x0, -options.clip_x0, options.clip_x0);
      const double mean_i = x0_coef * x0 + z_coef * zi;
      const double n = t > 1 ? rng.normal() : 0.0;
      next[i] = static_cast<float>(mean_i + sigma * n);
    }
    z = Tensor::from(shape, std::move(next));
    if (t == 1) break;
  }
  result.final_latent = z;
  return result;
}

}  // namespace ditvq
