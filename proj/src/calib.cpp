#include "ditvq/calib.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ditvq {

std::string to_string(CalibMode mode) {
  switch (mode) {
    case CalibMode::Full: return "full";
    case CalibMode::CodebookOnly: return "codebook_only";
    case CalibMode::None: return "none";
  }
  return "full";
}

CalibMode parse_calib_mode(const std::string& text) {
  if (text == "full") return CalibMode::Full;
  if (text == "codebook_only") return CalibMode::CodebookOnly;
  if (text == "none") return CalibMode::None;
  throw ConfigError("unknown calibration mode '" + text + "' (expected full, codebook_only or none)");
}

void CalibConfig::validate() const {
  if (lambda_d < 0 || lambda_r < 0) throw ConfigError("lambda_d and lambda_r must be non-negative");
  if (!(lr_ratio > 0) || !(lr_codebook > 0)) throw ConfigError("learning rates must be positive");
  if (n < 1) throw ConfigError("candidate-set length n must be >= 1");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (lambda_freeze < 0) throw ConfigError("lambda_freeze must be non-negative");
}

std::vector<QuantLayerState> init_quant_layers(const DiTModel& model, const LayerPlan& plan, std::size_t n,
                                               std::uint64_t seed) {
  std::vector<QuantLayerState> layers;
  std::uint64_t index = 0;
  for (const auto& [name, tensor] : model.named_tensors()) {
    if (!is_block_weight(name)) continue;
    const std::size_t o = tensor.dim(0);
    const std::size_t i = tensor.dim(1);
    const auto [k, d] = plan(name, o, i);
    QuantLayerState s;
    s.name = name;
    s.shape = {o, i, d, k};
    auto init = quantize_layer(tensor.to_matrix(), s.shape, n, mix_seed(seed, index++));
    s.codebook = std::move(init.codebook);
    s.candidates = std::move(init.candidates);
    s.assignments = std::move(init.assignments);
    layers.push_back(std::move(s));
  }
  return layers;
}

const TrajectoryStep& TrajectoryCache::step(std::size_t trajectory, std::size_t t) const {
  if (trajectory >= trajectories.size()) throw InputError("trajectory index out of range");
  if (t < 1 || t > timesteps) throw InputError("timestep out of range");
  return trajectories[trajectory].steps[timesteps - t];
}

TrajectoryCache build_trajectory_cache(const DiTModel& model, std::size_t count, std::uint64_t seed,
                                       double cfg_scale) {
  TrajectoryCache cache;
  cache.timesteps = model.config.timesteps;
  cache.depth = model.config.depth;
  Rng rng(seed);
  for (std::size_t j = 0; j < count; ++j) {
    TrajectoryRecord rec;
    rec.y = 1 + rng.index(model.config.classes);
    rec.seed = rng.next();
    SampleOptions opt;
    opt.y = rec.y;
    opt.seed = rec.seed;
    opt.cfg_scale = cfg_scale;
    rec.steps = ddpm_sample(model, opt).trajectory;
    cache.trajectories.push_back(std::move(rec));
  }
  return cache;
}

Tensor loss_ld(const std::vector<Tensor>& fp_outputs, const std::vector<Tensor>& q_outputs) {
  if (fp_outputs.size() != q_outputs.size() || fp_outputs.empty()) {
    throw DimensionError("loss_ld: block lists differ in length");
  }
  Tensor total = mse(q_outputs[0], fp_outputs[0]);
  for (std::size_t l = 1; l < fp_outputs.size(); ++l) total = add(total, mse(q_outputs[l], fp_outputs[l]));
  return total;
}

Tensor loss_lr(const std::vector<Tensor>& ratios) {
  if (ratios.empty()) return Tensor::scalar(0.0F);
  double elements = 0.0;
  double rows = 0.0;
  Tensor penalty;
  for (const auto& r : ratios) {
    elements += static_cast<double>(r.numel());
    rows += static_cast<double>(r.matrix().rows());
    const Tensor term = sum(abs(add_scalar(scale(r, 2.0F), -1.0F)));
    penalty = penalty.defined() ? add(penalty, term) : term;
  }
  return add_scalar(scale(penalty, static_cast<float>(-1.0 / rows)), static_cast<float>(elements / rows));
}

double ratio_penalty(const CandidateSet& set) {
  if (set.count() == 0) return 0.0;
  std::vector<float> r(set.n);
  double total = 0.0;
  for (std::size_t s = 0; s < set.count(); ++s) {
    softmax_row(set.logits_of(s), r);
    for (float v : r) total += 1.0 - std::abs(2.0 * v - 1.0);
  }
  return total / static_cast<double>(set.count());
}

Tensor soft_weight(const Tensor& codebook, const Tensor& logits, const CandidateSet& set, const LayerShape& shape) {
  const std::size_t k = shape.codebook_size;
  const std::size_t d = shape.dim;
  if (codebook.shape() != Shape{k, d} || logits.shape() != Shape{set.count(), set.n} || set.count() != shape.count()) {
    throw DimensionError("soft_weight: inconsistent codebook/logits/candidates for " + shape.str());
  }
  CandidateSet view{set.n, set.candidates, logits.values(), set.frozen};
  const Codebook<float> cb{codebook.to_matrix()};
  const MatrixF w = reconstruct_soft(cb, view, shape);
  return Tensor::make_result(
      "soft_weight", {shape.out, shape.in}, std::vector<float>(w.data(), w.data() + w.size()), {codebook, logits},
      [cand_ids = set.candidates, n = set.n, d, k](const Tensor& out) {
        const Tensor& cb = out.parents()[0];
        const Tensor& lg = out.parents()[1];
        const auto g = out.grad();
        const auto words = cb.data();
        const auto z = lg.data();
        const std::size_t count = cand_ids.size() / n;
        std::vector<double> dcb(cb.requires_grad() ? k * d : 0, 0.0);
        std::vector<float> r(n);
        std::vector<double> dr(n);
        auto dz = lg.requires_grad() ? lg.grad_buffer() : std::span<float>{};
        for (std::size_t s = 0; s < count; ++s) {
          softmax_row(z.subspan(s * n, n), r);
          const std::uint32_t* cand = cand_ids.data() + s * n;
          const float* gs = g.data() + s * d;
          for (std::size_t j = 0; j < n; ++j) {
            const float* c = words.data() + static_cast<std::size_t>(cand[j]) * d;
            double dot = 0.0;
            for (std::size_t t = 0; t < d; ++t) {
              dot += static_cast<double>(gs[t]) * c[t];
              if (!dcb.empty()) dcb[cand[j] * d + t] += static_cast<double>(r[j]) * gs[t];
            }
            dr[j] = dot;
          }
          if (!dz.empty()) {
            double rdr = 0.0;
            for (std::size_t j = 0; j < n; ++j) rdr += r[j] * dr[j];
            for (std::size_t j = 0; j < n; ++j) dz[s * n + j] += static_cast<float>(r[j] * (dr[j] - rdr));
          }
        }
        if (!dcb.empty()) {
          auto buf = cb.grad_buffer();
          for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += static_cast<float>(dcb[i]);
        }
      });
}

Tensor hard_weight(const Tensor& codebook, const Assignments& assignments, const LayerShape& shape) {
  const std::size_t k = shape.codebook_size;
  const std::size_t d = shape.dim;
  if (codebook.shape() != Shape{k, d} || assignments.size() != shape.count()) {
    throw DimensionError("hard_weight: inconsistent codebook/assignments for " + shape.str());
  }
  const Codebook<float> cb{codebook.to_matrix()};
  const MatrixF w = reconstruct_hard(cb, assignments, shape);
  return Tensor::make_result("hard_weight", {shape.out, shape.in}, std::vector<float>(w.data(), w.data() + w.size()),
                             {codebook}, [assignments, d, k](const Tensor& out) {
                               const Tensor& cb = out.parents()[0];
                               if (!cb.requires_grad()) return;
                               const auto g = out.grad();
                               std::vector<double> dcb(k * d, 0.0);
                               for (std::size_t s = 0; s < assignments.size(); ++s) {
                                 for (std::size_t t = 0; t < d; ++t) dcb[assignments[s] * d + t] += g[s * d + t];
                               }
                               auto buf = cb.grad_buffer();
                               for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += static_cast<float>(dcb[i]);
                             });
}

void RmsProp::step(Tensor& param) {
  if (!param.has_grad()) return;
  auto values = param.mutable_data();
  const auto grad = param.grad();
  if (mean_sq_.empty()) mean_sq_.assign(values.size(), 0.0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double g = grad[i];
    mean_sq_[i] = decay_ * mean_sq_[i] + (1.0 - decay_) * g * g;
    values[i] = static_cast<float>(values[i] - lr_ * g / (std::sqrt(mean_sq_[i]) + eps_));
  }
}

namespace {

std::vector<BlockParams> substitute_blocks(const DiTModel& fp, const std::map<std::string, Tensor>& weights,
                                           const std::map<std::string, Tensor>& biases) {
  std::vector<BlockParams> blocks = fp.blocks;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (auto& [local, lin] : blocks[b].linears()) {
      const std::string prefix = "blocks." + std::to_string(b) + "." + local;
      if (auto it = weights.find(prefix + ".weight"); it != weights.end()) lin->weight = it->second;
      if (auto it = biases.find(prefix + ".bias"); it != biases.end()) lin->bias = it->second;
    }
  }
  return blocks;
}

std::string bias_name(const std::string& weight_name) {
  return weight_name.substr(0, weight_name.size() - std::string("weight").size()) + "bias";
}

}  // namespace

CalibLoss calibration_loss(const DiTModel& fp, const std::vector<LayerParams>& layers, const CalibConfig& cfg,
                           const TrajectoryCache& cache, const CalibBatch& batch,
                           const std::map<std::string, Tensor>& biases) {
  if (batch.trajectories.empty()) throw ConfigError("calibration batch is empty");
  std::map<std::string, Tensor> weights;
  std::vector<Tensor> ratios;
  for (const auto& lp : layers) {
    const auto& st = *lp.state;
    if (lp.soft) {
      weights[st.name] = soft_weight(lp.codebook, lp.logits, st.candidates, st.shape);
      if (st.candidates.n > 1) ratios.push_back(softmax(lp.logits));
    } else {
      weights[st.name] = hard_weight(lp.codebook, lp.hard, st.shape);
    }
  }
  const auto blocks = substitute_blocks(fp, weights, biases);
  Tensor ld;
  for (std::size_t traj : batch.trajectories) {
    const auto& step = cache.step(traj, batch.t);
    std::vector<Tensor> q_out;
    q_out.reserve(blocks.size());
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      q_out.push_back(dit_block(step.blocks.inputs[l], step.condition, blocks[l], fp.config.heads));
    }
    const Tensor term = loss_ld(step.blocks.outputs, q_out);
    ld = ld.defined() ? add(ld, term) : term;
  }
  CalibLoss loss;
  loss.ld = scale(ld, 1.0F / static_cast<float>(batch.trajectories.size()));
  loss.lr = loss_lr(ratios);
  loss.total = add(scale(loss.ld, static_cast<float>(cfg.lambda_d)), scale(loss.lr, static_cast<float>(cfg.lambda_r)));
  return loss;
}

CalibResult calibrate(const DiTModel& fp, std::vector<QuantLayerState> layers, const CalibConfig& cfg,
                      const TrajectoryCache& cache, const std::function<void(const CalibLogRecord&)>& on_record) {
  cfg.validate();
  if (cache.size() == 0) throw ConfigError("calibrate: trajectory cache is empty");
  if (cache.timesteps != fp.config.timesteps || cache.depth != fp.config.depth) {
    throw ConfigError("calibrate: trajectory cache does not match the model");
  }
  CalibResult result;

  if (cfg.mode == CalibMode::None || cfg.iters == 0) {
    for (auto& st : layers) {
      if (cfg.mode == CalibMode::CodebookOnly) {
        st.assignments.resize(st.candidates.count());
        for (std::size_t s = 0; s < st.assignments.size(); ++s) st.assignments[s] = st.candidates.of(s)[0];
      } else {
        st.assignments = finalize(st.candidates);
      }
    }
    result.layers = std::move(layers);
    return result;
  }

  const bool full = cfg.mode == CalibMode::Full;
  const bool train_codebook = !cfg.freeze_codebook;
  std::vector<LayerParams> params(layers.size());
  std::vector<RmsProp> cb_opt;
  std::vector<RmsProp> logit_opt;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& st = layers[l];
    if (st.candidates.count() != st.shape.count()) throw ConfigError("calibrate: candidate set does not match " + st.name);
    auto& p = params[l];
    p.state = &st;
    p.codebook = Tensor::from_matrix(st.codebook.words, train_codebook);
    p.logits = Tensor::from({st.candidates.count(), st.candidates.n}, st.candidates.logits, full && !st.frozen);
    p.soft = full && !st.frozen;
    if (!full) {
      p.hard.resize(st.candidates.count());
      for (std::size_t s = 0; s < p.hard.size(); ++s) p.hard[s] = st.candidates.of(s)[0];
    } else if (st.frozen) {
      p.hard = st.assignments;
    }
    cb_opt.emplace_back(cfg.lr_codebook);
    logit_opt.emplace_back(cfg.lr_ratio);
  }

  std::map<std::string, Tensor> biases;
  std::vector<std::pair<std::string, RmsProp>> bias_opt;
  if (cfg.tune_biases) {
    const auto named = fp.named_tensors();
    for (const auto& st : layers) {
      const std::string bname = bias_name(st.name);
      for (const auto& [name, t] : named) {
        if (name == bname) {
          biases[bname] = t.clone(true);
          bias_opt.emplace_back(bname, RmsProp(cfg.lr_codebook));
        }
      }
    }
  }

  Rng rng(mix_seed(cfg.seed, 0xCA11B));
  std::vector<std::size_t> pool(cache.size());
  for (std::size_t iter = 1; iter <= cfg.iters; ++iter) {
    CalibBatch batch;
    batch.t = 1 + rng.index(cache.timesteps);
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      if (cfg.batch <= pool.size()) {
        const std::size_t j = b + rng.index(pool.size() - b);
        std::swap(pool[b], pool[j]);
        batch.trajectories.push_back(pool[b]);
      } else {
        batch.trajectories.push_back(rng.index(pool.size()));
      }
    }

    CalibLogRecord rec;
    rec.iter = iter;
    rec.t = batch.t;
    try {
      for (auto& p : params) {
        p.codebook.zero_grad();
        p.logits.zero_grad();
      }
      for (auto& [name, b] : biases) b.zero_grad();
      const CalibLoss loss = calibration_loss(fp, params, cfg, cache, batch, biases);
      rec.ld = loss.ld.item();
      rec.lr = loss.lr.item();
      rec.loss = loss.total.item();
      if (loss.total.requires_grad()) backward(loss.total);
    } catch (const NumericalError& e) {
      throw CalibrationDiverged(std::string("calibration diverged at iteration ") + std::to_string(iter) + ": " +
                                    e.what(),
                                rec);
    }

    for (std::size_t l = 0; l < params.size(); ++l) {
      auto& p = params[l];
      if (train_codebook) cb_opt[l].step(p.codebook);
      if (p.soft) {
        logit_opt[l].step(p.logits);
        auto& st = layers[l];
        st.candidates.logits = p.logits.values();
        if (ratio_penalty(st.candidates) < cfg.lambda_freeze) {
          st.frozen = true;
          st.candidates.frozen = true;
          st.frozen_at = iter;
          st.assignments = finalize(st.candidates);
          st.frozen_assignments = st.assignments;
          p.soft = false;
          p.hard = st.assignments;
          p.logits = p.logits.detach();
        }
      }
    }
    for (auto& [name, opt] : bias_opt) opt.step(biases[name]);

    for (const auto& st : layers) rec.frozen_layers += st.frozen ? 1 : 0;
    result.log.push_back(rec);
    if (on_record) on_record(rec);
  }

  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& st = layers[l];
    st.codebook.words = params[l].codebook.to_matrix();
    if (!full) {
      st.assignments = params[l].hard;
    } else if (!st.frozen) {
      st.assignments = finalize(st.candidates);
    }
  }
  result.layers = std::move(layers);
  for (auto& [name, b] : biases) result.biases[name] = b.detach();
  return result;
}

DiTModel with_block_weights(const DiTModel& fp, const std::map<std::string, MatrixF>& weights,
                            const std::map<std::string, Tensor>& biases) {
  std::map<std::string, Tensor> w;
  for (const auto& [name, m] : weights) w[name] = Tensor::from_matrix(m);
  DiTModel out = fp;
  out.blocks = substitute_blocks(fp, w, biases);
  return out;
}

std::map<std::string, MatrixF> hard_weights(const std::vector<QuantLayerState>& layers) {
  std::map<std::string, MatrixF> out;
  for (const auto& st : layers) out[st.name] = reconstruct_hard(st.codebook, st.assignments, st.shape);
  return out;
}

std::vector<double> per_block_output_mse(const DiTModel& fp, const DiTModel& quantized, const TrajectoryCache& cache) {
  std::vector<double> totals(fp.blocks.size(), 0.0);
  std::size_t samples = 0;
  for (std::size_t j = 0; j < cache.size(); ++j) {
    for (std::size_t t = 1; t <= cache.timesteps; ++t) {
      const auto& step = cache.step(j, t);
      for (std::size_t l = 0; l < fp.blocks.size(); ++l) {
        const Tensor q = dit_block(step.blocks.inputs[l], step.condition, quantized.blocks[l], fp.config.heads);
        totals[l] += mse(q, step.blocks.outputs[l]).item();
      }
      ++samples;
    }
  }
  for (auto& v : totals) v /= static_cast<double>(std::max<std::size_t>(1, samples));
  return totals;
}

double block_output_mse(const DiTModel& fp, const DiTModel& quantized, const TrajectoryCache& cache) {
  const auto per = per_block_output_mse(fp, quantized, cache);
  return std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

GradCosineReport grad_cosine_report(const DiTModel& fp, const std::vector<QuantLayerState>& layers,
                                    const std::vector<Assignments>& assignments, const TrajectoryCache& cache,
                                    std::size_t sample_size, std::uint64_t seed, std::size_t member_cap) {
  if (assignments.size() != layers.size()) throw DimensionError("grad_cosine_report: one assignment list per layer");
  std::map<std::string, Tensor> weights;
  std::vector<Tensor> leaves;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const MatrixF w = reconstruct_hard(layers[l].codebook, assignments[l], layers[l].shape);
    leaves.push_back(Tensor::from_matrix(w, true));
    weights[layers[l].name] = leaves.back();
  }
  const auto blocks = substitute_blocks(fp, weights, {});
  Rng rng(seed);
  Tensor ld;
  const std::size_t samples = std::max<std::size_t>(1, sample_size);
  for (std::size_t s = 0; s < samples; ++s) {
    const auto& step = cache.step(rng.index(cache.size()), 1 + rng.index(cache.timesteps));
    std::vector<Tensor> q_out;
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      q_out.push_back(dit_block(step.blocks.inputs[l], step.condition, blocks[l], fp.config.heads));
    }
    const Tensor term = loss_ld(step.blocks.outputs, q_out);
    ld = ld.defined() ? add(ld, term) : term;
  }
  backward(scale(ld, 1.0F / static_cast<float>(samples)));

  GradCosineReport report;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& st = layers[l];
    const std::size_t d = st.shape.dim;
    const auto g = leaves[l].grad();
    std::vector<std::vector<std::size_t>> members(st.shape.codebook_size);
    for (std::size_t s = 0; s < assignments[l].size(); ++s) {
      auto& m = members[assignments[l][s]];
      if (m.size() < member_cap) m.push_back(s);
    }
    for (const auto& m : members) {
      if (m.size() < 2) {
        ++report.excluded;
        continue;
      }
      double total = 0.0;
      std::size_t pairs = 0;
      for (std::size_t a = 0; a < m.size(); ++a) {
        for (std::size_t b = a + 1; b < m.size(); ++b) {
          total += cosine_similarity(g.subspan(m[a] * d, d), g.subspan(m[b] * d, d));
          ++pairs;
        }
      }
      report.similarities.push_back(total / static_cast<double>(pairs));
    }
  }
  report.histogram.assign(20, 0.0);
  for (double v : report.similarities) {
    const auto bin = std::min<std::size_t>(19, static_cast<std::size_t>(std::max(0.0, (v + 1.0) / 2.0 * 20.0)));
    report.histogram[bin] += 1.0;
  }
  if (!report.similarities.empty()) {
    report.mean = std::accumulate(report.similarities.begin(), report.similarities.end(), 0.0) /
                  static_cast<double>(report.similarities.size());
    for (auto& h : report.histogram) h /= static_cast<double>(report.similarities.size());
  }
  return report;
}

std::vector<double> candidate_position_report(const Assignments& finalized, const CandidateSet& set) {
  if (finalized.size() != set.count()) throw DimensionError("candidate_position_report: length mismatch");
  std::vector<double> hist(set.n, 0.0);
  for (std::size_t s = 0; s < finalized.size(); ++s) {
    const auto cand = set.of(s);
    const auto it = std::find(cand.begin(), cand.end(), finalized[s]);
    if (it == cand.end()) throw InputError("candidate_position_report: assignment is not a candidate");
    hist[static_cast<std::size_t>(it - cand.begin())] += 1.0;
  }
  for (auto& h : hist) h /= static_cast<double>(std::max<std::size_t>(1, finalized.size()));
  return hist;
}

}  // namespace ditvq
