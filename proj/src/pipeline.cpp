#include "ditvq/pipeline.hpp"

#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace ditvq {

using json = nlohmann::ordered_json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericalError*>(&e) != nullptr) return 3;
  return 2;
}

// ---------------------------------------------------------------------------
// Model files

TensorContainer model_to_container(const DiTModel& model) {
  TensorContainer c;
  for (const auto& [name, t] : model.named_tensors()) {
    c.tensors[name] = TensorEntry::from_f32(t.shape(), t.data());
  }
  c.metadata = model.config.to_metadata();
  c.metadata["format"] = "ditvq.fp";
  return c;
}

namespace {

std::map<std::string, Tensor> tensors_of(const std::map<std::string, TensorEntry>& entries) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, e] : entries) out[name] = Tensor::from(e.shape, e.to_f32());
  return out;
}

std::string local_layer_name(const std::string& weight_name) {
  // blocks.<b>.<local>.weight -> <local>
  const auto first = weight_name.find('.');
  const auto second = weight_name.find('.', first + 1);
  const auto last = weight_name.rfind('.');
  return weight_name.substr(second + 1, last - second - 1);
}

std::string strip_weight(const std::string& weight_name) {
  return weight_name.substr(0, weight_name.rfind('.'));
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string fixed(double v, int precision) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

std::string sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(4) << v;
  return s.str();
}

fs::path with_suffix(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

void require_file(const fs::path& p, const std::string& role) {
  if (p.empty()) throw InputError("missing " + role + " path");
  if (!fs::is_regular_file(p)) throw InputError(role + " '" + p.string() + "' does not exist");
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

DiTModel model_from_container(const TensorContainer& container) {
  const DiTConfig config = DiTConfig::from_metadata(container.metadata);
  return DiTModel::from_tensors(config, tensors_of(container.tensors));
}

DiTModel load_model(const fs::path& path) {
  require_file(path, "model");
  return model_from_container(parse_container(read_file(path)));
}

void save_model(const DiTModel& model, const fs::path& path) { write_file(path, write_container(model_to_container(model))); }

QuantizedModelFile make_quantized_file(const DiTModel& fp, const std::vector<QuantLayerState>& layers,
                                       const std::map<std::string, Tensor>& biases) {
  QuantizedModelFile f;
  f.config = fp.config.to_metadata();
  std::set<std::string> quantized;
  for (const auto& st : layers) {
    f.layers.push_back(make_layer_record(st.name, st.shape, st.codebook, st.assignments));
    quantized.insert(st.name);
  }
  for (const auto& [name, t] : fp.named_tensors()) {
    if (quantized.count(name) != 0) continue;
    const auto it = biases.find(name);
    const Tensor& src = it != biases.end() ? it->second : t;
    f.passthrough[name] = TensorEntry::from_f32(src.shape(), src.data());
  }
  return f;
}

std::vector<QuantLayerState> layers_from_file(const QuantizedModelFile& file) {
  std::vector<QuantLayerState> layers;
  for (const auto& rec : file.layers) {
    QuantLayerState st;
    st.name = rec.name;
    st.shape = rec.shape;
    st.codebook = record_codebook(rec);
    st.assignments = record_assignments(rec);
    layers.push_back(std::move(st));
  }
  return layers;
}

DiTModel model_from_quantized(const QuantizedModelFile& file) {
  const DiTConfig config = DiTConfig::from_metadata(file.config);
  auto tensors = tensors_of(file.passthrough);
  for (const auto& rec : file.layers) {
    tensors[rec.name] = Tensor::from_matrix(reconstruct_hard(record_codebook(rec), record_assignments(rec), rec.shape));
  }
  return DiTModel::from_tensors(config, tensors);
}

bool is_quantized_file(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) return false;
  std::uint32_t magic = 0;
  std::memcpy(&magic, bytes.data(), 4);
  return magic == QuantizedModelFile::kMagic;
}

TensorContainer candidates_to_container(const std::vector<QuantLayerState>& layers) {
  TensorContainer c;
  std::size_t n = 0;
  for (const auto& st : layers) {
    const auto& set = st.candidates;
    n = set.n;
    std::vector<float> ids(set.candidates.begin(), set.candidates.end());
    c.tensors[st.name + ".candidates"] = TensorEntry::from_f32({set.count(), set.n}, ids);
    c.tensors[st.name + ".logits"] = TensorEntry::from_f32({set.count(), set.n}, set.logits);
  }
  c.metadata["n"] = std::to_string(n);
  c.metadata["format"] = "ditvq.candidates";
  return c;
}

void apply_candidates(std::vector<QuantLayerState>& layers, const TensorContainer& sidecar) {
  for (auto& st : layers) {
    const auto& ids = sidecar.at(st.name + ".candidates");
    const auto& logits = sidecar.at(st.name + ".logits");
    if (ids.shape.size() != 2 || ids.shape[0] != st.shape.count() || logits.shape != ids.shape) {
      throw InputError("candidate sidecar: layer '" + st.name + "' does not match " + st.shape.str());
    }
    CandidateSet set;
    set.n = ids.shape[1];
    for (float v : ids.to_f32()) {
      if (!(v >= 0.0F) || v != std::floor(v) || static_cast<std::size_t>(v) >= st.shape.codebook_size) {
        throw InputError("candidate sidecar: layer '" + st.name + "' holds an invalid codeword index");
      }
      set.candidates.push_back(static_cast<std::uint32_t>(v));
    }
    set.logits = logits.to_f32();
    st.candidates = std::move(set);
  }
}

// ---------------------------------------------------------------------------
// Plans

LayerPlan resolve_plan(const PlanSpec& spec) {
  std::pair<std::size_t, std::size_t> base{0, 0};
  const bool by_bits = spec.dim > 0 || spec.bits > 0.0;
  if (!spec.preset.empty() && by_bits) throw ConfigError("give either a preset or --d with --bits, not both");
  if (spec.preset == "2bit") {
    base = {256, 4};
  } else if (spec.preset == "3bit") {
    base = {64, 2};
  } else if (!spec.preset.empty()) {
    throw ConfigError("unknown preset '" + spec.preset + "' (expected 2bit or 3bit)");
  } else if (by_bits) {
    if (spec.dim == 0 || !(spec.bits > 0.0)) throw ConfigError("--d and --bits must both be positive");
    const double e = spec.bits * static_cast<double>(spec.dim);
    const double r = std::round(e);
    if (std::abs(e - r) > 1e-9 || r < 1.0 || r > 16.0) {
      throw ConfigError("bits=" + std::to_string(spec.bits) + " with d=" + std::to_string(spec.dim) +
                        " does not give a power-of-two k in [2, 65536]");
    }
    base = {std::size_t{1} << static_cast<unsigned>(r), spec.dim};
  }

  std::map<std::string, std::pair<std::size_t, std::size_t>> overrides;
  for (const auto& o : spec.overrides) {
    const auto eq = o.find('=');
    const auto x = o.find('x', eq == std::string::npos ? 0 : eq);
    if (eq == std::string::npos || x == std::string::npos) throw ConfigError("override '" + o + "' is not <layer>=<k>x<d>");
    try {
      std::size_t used_k = 0;
      std::size_t used_d = 0;
      const std::string ks = o.substr(eq + 1, x - eq - 1);
      const std::string ds = o.substr(x + 1);
      const auto k = std::stoul(ks, &used_k);
      const auto d = std::stoul(ds, &used_d);
      if (used_k != ks.size() || used_d != ds.size()) throw std::invalid_argument(o);
      overrides[o.substr(0, eq)] = {k, d};
    } catch (const std::logic_error&) {
      throw ConfigError("override '" + o + "' is not <layer>=<k>x<d>");
    }
  }
  if (base.first == 0 && overrides.empty()) throw ConfigError("no quantization plan: give --preset, or --d with --bits");

  return [base, overrides](const std::string& name, std::size_t, std::size_t) {
    for (const auto& key : {name, strip_weight(name), local_layer_name(name)}) {
      if (auto it = overrides.find(key); it != overrides.end()) return it->second;
    }
    if (base.first == 0) throw ConfigError("layer '" + name + "' has no (k, d) in the plan");
    return base;
  };
}

std::vector<std::string> plan_diagnostics(const DiTModel& model, const LayerPlan& plan) {
  std::vector<std::string> issues;
  for (const auto& [name, t] : model.named_tensors()) {
    if (!is_block_weight(name)) continue;
    try {
      const auto [k, d] = plan(name, t.dim(0), t.dim(1));
      const LayerShape shape{t.dim(0), t.dim(1), d, k};
      shape.validate();
      if (shape.count() < k) {
        issues.push_back(name + ": " + std::to_string(shape.count()) + " sub-vectors cannot fill k=" + std::to_string(k));
      }
    } catch (const ConfigError& e) {
      issues.push_back(name + ": " + e.what());
    }
  }
  return issues;
}

// ---------------------------------------------------------------------------
// Trajectory cache persistence

TensorContainer cache_to_container(const TrajectoryCache& cache) {
  TensorContainer c;
  c.metadata["timesteps"] = std::to_string(cache.timesteps);
  c.metadata["depth"] = std::to_string(cache.depth);
  c.metadata["count"] = std::to_string(cache.size());
  auto put = [&c](const std::string& name, const Tensor& t) { c.tensors[name] = TensorEntry::from_f32(t.shape(), t.data()); };
  for (std::size_t j = 0; j < cache.size(); ++j) {
    const auto& rec = cache.trajectories[j];
    const std::string p = "traj." + std::to_string(j);
    c.metadata[p + ".y"] = std::to_string(rec.y);
    c.metadata[p + ".seed"] = std::to_string(rec.seed);
    for (const auto& step : rec.steps) {
      const std::string q = p + ".t" + std::to_string(step.t);
      put(q + ".z", step.z_t);
      put(q + ".c", step.condition);
      for (std::size_t l = 0; l < step.blocks.inputs.size(); ++l) {
        put(q + ".in" + std::to_string(l), step.blocks.inputs[l]);
        put(q + ".out" + std::to_string(l), step.blocks.outputs[l]);
      }
    }
  }
  return c;
}

TrajectoryCache cache_from_container(const TensorContainer& c) {
  auto meta = [&c](const std::string& key) -> std::uint64_t {
    auto it = c.metadata.find(key);
    if (it == c.metadata.end()) throw InputError("trajectory cache: missing metadata '" + key + "'");
    return std::stoull(it->second);
  };
  auto get = [&c](const std::string& name) {
    const auto& e = c.at(name);
    return Tensor::from(e.shape, e.to_f32());
  };
  TrajectoryCache cache;
  cache.timesteps = meta("timesteps");
  cache.depth = meta("depth");
  const std::size_t count = meta("count");
  for (std::size_t j = 0; j < count; ++j) {
    const std::string p = "traj." + std::to_string(j);
    TrajectoryRecord rec;
    rec.y = meta(p + ".y");
    rec.seed = meta(p + ".seed");
    for (std::size_t t = cache.timesteps; t >= 1; --t) {
      const std::string q = p + ".t" + std::to_string(t);
      TrajectoryStep step;
      step.t = t;
      step.z_t = get(q + ".z");
      step.condition = get(q + ".c");
      for (std::size_t l = 0; l < cache.depth; ++l) {
        step.blocks.inputs.push_back(get(q + ".in" + std::to_string(l)));
        step.blocks.outputs.push_back(get(q + ".out" + std::to_string(l)));
      }
      rec.steps.push_back(std::move(step));
    }
    cache.trajectories.push_back(std::move(rec));
  }
  return cache;
}

TrajectoryCache cached_trajectories(const DiTModel& model, std::size_t count, std::uint64_t seed, double cfg_scale,
                                    const std::optional<fs::path>& dir) {
  if (!dir) return build_trajectory_cache(model, count, seed, cfg_scale);
  const auto model_bytes = write_container(model_to_container(model));
  std::ostringstream params;
  params << std::setprecision(17) << "v1|" << count << "|" << seed << "|" << cfg_scale;
  const std::string p = params.str();
  const std::uint64_t key =
      fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(p.data()), p.size()), fnv1a(model_bytes));
  std::ostringstream file;
  file << "trajectories-" << std::hex << std::setw(16) << std::setfill('0') << key << ".dvc";
  const fs::path path = *dir / file.str();
  if (fs::is_regular_file(path)) {
    try {
      auto cache = cache_from_container(parse_container(read_file(path)));
      if (cache.size() == count && cache.timesteps == model.config.timesteps && cache.depth == model.config.depth) {
        return cache;
      }
    } catch (const Error&) {
      // Unreadable entry: regenerate below.
    }
  }
  auto cache = build_trajectory_cache(model, count, seed, cfg_scale);
  write_file(path, write_container(cache_to_container(cache)));
  return cache;
}

std::optional<fs::path> resolve_cache_dir(const std::string& flag) {
  if (!flag.empty()) return fs::path(flag);
  if (const char* env = std::getenv("DITVQ_CACHE_DIR"); env != nullptr && *env != '\0') return fs::path(env);
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_make_toy_model(const MakeToyOptions& opt, std::ostream& out) {
  if (opt.out.empty()) throw ConfigError("make-toy-model: --out is required");
  const DiTModel model = make_toy_model(opt.config, opt.seed);
  save_model(model, opt.out);
  std::size_t params = 0;
  for (const auto& [name, t] : model.named_tensors()) params += t.numel();
  out << "wrote " << opt.out.string() << ": " << params << " parameters, depth " << opt.config.depth << ", hidden "
      << opt.config.hidden << "\n";
  return 0;
}

int cmd_quantize(const QuantizeOptions& opt, std::ostream& out) {
  if (opt.out.empty()) throw ConfigError("quantize: --out is required");
  if (opt.n < 1) throw ConfigError("quantize: n must be >= 1");
  const DiTModel fp = load_model(opt.model);
  const LayerPlan plan = resolve_plan(opt.plan);
  const auto issues = plan_diagnostics(fp, plan);
  if (!issues.empty()) {
    std::string msg = "invalid quantization plan:";
    for (const auto& i : issues) msg += "\n  " + i;
    throw ConfigError(msg);
  }
  for (const auto& [name, t] : fp.named_tensors()) {
    if (!is_block_weight(name)) continue;
    const auto [k, d] = plan(name, t.dim(0), t.dim(1));
    if (opt.n > k) throw ConfigError(name + ": n=" + std::to_string(opt.n) + " exceeds k=" + std::to_string(k));
  }
  auto layers = init_quant_layers(fp, plan, opt.n, opt.seed);

  const auto file = make_quantized_file(fp, layers);
  write_file(opt.out, write_quantized(file));
  const fs::path sidecar = opt.sidecar.empty() ? with_suffix(opt.out, ".candidates") : opt.sidecar;
  write_file(sidecar, write_container(candidates_to_container(layers)));

  const auto weights = hard_weights(layers);
  const auto named = fp.named_tensors();
  auto fp_weight = [&named](const std::string& name) {
    for (const auto& [n, t] : named) {
      if (n == name) return t.to_matrix();
    }
    throw InputError("missing " + name);
  };
  constexpr double MB = 1024.0 * 1024.0;
  out << std::left << std::setw(24) << "layer" << std::setw(12) << "k x d" << std::right << std::setw(14)
      << "codebook MB" << std::setw(16) << "assignment MB" << std::setw(14) << "MSE" << "\n";
  std::uint64_t cb_bits = 0;
  std::uint64_t as_bits = 0;
  std::uint64_t fp_bits = 0;
  for (const auto& st : layers) {
    const auto rep = storage_report(st.shape);
    cb_bits += rep.codebook_bits;
    as_bits += rep.assignment_bits;
    fp_bits += static_cast<std::uint64_t>(st.shape.out) * st.shape.in * 32U;
    const double err = mean_squared_error(fp_weight(st.name), weights.at(st.name));
    out << std::left << std::setw(24) << strip_weight(st.name) << std::setw(12)
        << (std::to_string(st.shape.codebook_size) + "x" + std::to_string(st.shape.dim)) << std::right
        << std::setw(14) << fixed(static_cast<double>(rep.codebook_bits) / 8.0 / MB, 6) << std::setw(16)
        << fixed(static_cast<double>(rep.assignment_bits) / 8.0 / MB, 6) << std::setw(14) << sci(err) << "\n";
  }
  out << std::left << std::setw(36) << "total" << std::right << std::setw(14)
      << fixed(static_cast<double>(cb_bits) / 8.0 / MB, 6) << std::setw(16)
      << fixed(static_cast<double>(as_bits) / 8.0 / MB, 6) << "\n";
  out << "block weights: " << fixed(static_cast<double>(fp_bits) / 8.0 / MB, 6) << " MB fp32 -> "
      << fixed(static_cast<double>(cb_bits + as_bits) / 8.0 / MB, 6) << " MB ("
      << fixed(static_cast<double>(fp_bits) / static_cast<double>(cb_bits + as_bits), 2) << "x)\n";
  out << "wrote " << opt.out.string() << " and " << sidecar.string() << "\n";
  return 0;
}

namespace {

json grad_report_json(const GradCosineReport& r) {
  return json{{"mean", r.mean},
              {"codewords", r.similarities.size()},
              {"excluded", r.excluded},
              {"histogram", r.histogram}};
}

DiTConfig checked_config(const std::map<std::string, std::string>& meta, const DiTModel& fp, const std::string& what) {
  const DiTConfig c = DiTConfig::from_metadata(meta);
  if (!(c == fp.config)) throw ConfigError(what + ": model configuration does not match the floating-point model");
  return c;
}

}  // namespace

int cmd_calibrate(const CalibrateOptions& opt, std::ostream& out) {
  if (opt.out.empty()) throw ConfigError("calibrate: --out is required");
  opt.calib.validate();
  const DiTModel fp = load_model(opt.model);
  require_file(opt.quantized, "quantized model");
  const QuantizedModelFile qfile = read_quantized(read_file(opt.quantized));
  checked_config(qfile.config, fp, opt.quantized.string());
  auto layers = layers_from_file(qfile);

  const fs::path sidecar = opt.sidecar.empty() ? with_suffix(opt.quantized, ".candidates") : opt.sidecar;
  require_file(sidecar, "candidate sidecar");
  apply_candidates(layers, parse_container(read_file(sidecar)));
  const auto named = fp.named_tensors();
  for (auto& st : layers) {
    if (opt.calib.n > st.shape.codebook_size) {
      throw ConfigError(st.name + ": n=" + std::to_string(opt.calib.n) + " exceeds k=" +
                        std::to_string(st.shape.codebook_size));
    }
    if (st.candidates.n == opt.calib.n) continue;
    // Different candidate-set length than at quantization time: rebuild from the weights.
    for (const auto& [name, t] : named) {
      if (name == st.name) {
        st.candidates = build_candidates(split_subvectors(t.to_matrix(), st.shape.dim), st.codebook, opt.calib.n);
      }
    }
  }
  const auto initial = layers;

  const auto cache = cached_trajectories(fp, opt.cache_size, mix_seed(opt.calib.seed, 0x7A11), opt.calib_cfg_scale,
                                         resolve_cache_dir(opt.cache_dir));
  const fs::path log_path = opt.log.empty() ? with_suffix(opt.out, ".log.jsonl") : opt.log;
  std::string log_text;
  auto on_record = [&log_text](const CalibLogRecord& r) {
    log_text += json{{"iter", r.iter}, {"t", r.t}, {"ld", r.ld}, {"lr", r.lr}, {"loss", r.loss},
                     {"frozen_layers", r.frozen_layers}}
                    .dump();
    log_text += '\n';
  };
  CalibResult result;
  try {
    result = calibrate(fp, layers, opt.calib, cache, on_record);
  } catch (const CalibrationDiverged&) {
    write_text(log_path, log_text);
    throw;
  }
  write_text(log_path, log_text);

  write_file(opt.out, write_quantized(make_quantized_file(fp, result.layers, result.biases)));
  const fs::path sidecar_out = opt.sidecar_out.empty() ? with_suffix(opt.out, ".candidates") : opt.sidecar_out;
  write_file(sidecar_out, write_container(candidates_to_container(result.layers)));

  if (!opt.grad_report.empty()) {
    // Both measurements use the codebooks the run ended with; only the
    // assignments differ (nearest codeword before, finalized after).
    std::vector<QuantLayerState> fixed_cb = initial;
    std::vector<Assignments> before;
    std::vector<Assignments> after;
    for (std::size_t l = 0; l < fixed_cb.size(); ++l) {
      fixed_cb[l].codebook = result.layers[l].codebook;
      Assignments nearest(fixed_cb[l].candidates.count());
      for (std::size_t s = 0; s < nearest.size(); ++s) nearest[s] = fixed_cb[l].candidates.of(s)[0];
      before.push_back(std::move(nearest));
      after.push_back(result.layers[l].assignments);
    }
    const std::uint64_t gseed = mix_seed(opt.calib.seed, 0x6C05);
    const auto b = grad_cosine_report(fp, fixed_cb, before, cache, opt.grad_samples, gseed);
    const auto a = grad_cosine_report(fp, fixed_cb, after, cache, opt.grad_samples, gseed);
    const json report{{"sample_size", opt.grad_samples},
                      {"codebook_calibrated", !opt.calib.freeze_codebook && opt.calib.mode != CalibMode::None},
                      {"before", grad_report_json(b)},
                      {"after", grad_report_json(a)}};
    write_text(opt.grad_report, report.dump(2) + "\n");
    out << "grad cosine: before " << fixed(b.mean, 4) << ", after " << fixed(a.mean, 4) << "\n";
  }

  std::size_t frozen = 0;
  for (const auto& st : result.layers) frozen += st.frozen ? 1 : 0;
  out << "calibrated " << result.layers.size() << " layers (" << to_string(opt.calib.mode) << ", n=" << opt.calib.n
      << ", " << result.log.size() << " iterations, " << frozen << " frozen)\n";
  if (!result.log.empty()) {
    const auto& last = result.log.back();
    out << "final L_d " << sci(last.ld) << ", L_r " << sci(last.lr) << ", L " << sci(last.loss) << "\n";
  }
  out << "wrote " << opt.out.string() << ", " << sidecar_out.string() << ", " << log_path.string() << "\n";
  return 0;
}

namespace {

struct LayerMetric {
  std::string name;
  std::size_t out = 0;
  std::size_t in = 0;
  std::size_t k = 0;
  std::size_t d = 0;
  double bits_per_weight = 32.0;
  double weight_mse = 0.0;
  std::uint64_t bytes = 0;
};

struct EvalRow {
  std::string label;
  std::string kind;
  DiTModel model;
  std::vector<LayerMetric> layers;
};

std::vector<LayerMetric> dense_layers(const DiTModel& fp, const DiTModel& m) {
  std::vector<LayerMetric> out;
  const auto a = fp.named_tensors();
  const auto b = m.named_tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!is_block_weight(a[i].first)) continue;
    LayerMetric lm;
    lm.name = a[i].first;
    lm.out = a[i].second.dim(0);
    lm.in = a[i].second.dim(1);
    lm.weight_mse = mean_squared_error(a[i].second.matrix(), b[i].second.matrix());
    lm.bytes = static_cast<std::uint64_t>(lm.out) * lm.in * 4U;
    out.push_back(lm);
  }
  return out;
}

}  // namespace

int cmd_eval(const EvalOptions& opt, std::ostream& out) {
  const DiTModel fp = load_model(opt.model);
  if (opt.entries.empty() && opt.uq_bits.empty()) throw ConfigError("eval: nothing to evaluate");

  std::vector<EvalRow> rows;
  for (unsigned bits : opt.uq_bits) {
    EvalRow row;
    row.label = "UQ-" + std::to_string(bits) + "bit";
    row.kind = "uq";
    std::map<std::string, MatrixF> weights;
    for (const auto& [name, t] : fp.named_tensors()) {
      if (is_block_weight(name)) weights[name] = uniform_quantize(t.matrix(), bits).dequantized;
    }
    row.model = with_block_weights(fp, weights);
    row.layers = dense_layers(fp, row.model);
    for (auto& lm : row.layers) {
      lm.bits_per_weight = bits;
      lm.bytes = (static_cast<std::uint64_t>(lm.out) * lm.in * bits + 7) / 8 + 4;  // + one f32 scale
    }
    rows.push_back(std::move(row));
  }
  for (const auto& e : opt.entries) {
    require_file(e.path, "model '" + e.label + "'");
    const auto bytes = read_file(e.path);
    EvalRow row;
    row.label = e.label;
    if (is_quantized_file(bytes)) {
      const auto file = read_quantized(bytes);
      checked_config(file.config, fp, e.path.string());
      row.kind = "vq";
      row.model = model_from_quantized(file);
      row.layers = dense_layers(fp, row.model);
      for (auto& lm : row.layers) {
        for (const auto& rec : file.layers) {
          if (rec.name != lm.name) continue;
          const auto rep = storage_report(rec.shape);
          lm.k = rec.shape.codebook_size;
          lm.d = rec.shape.dim;
          lm.bits_per_weight = rep.effective_bits_per_weight;
          lm.bytes = (rep.assignment_bits + 7) / 8 + rep.codebook_bits / 8;
        }
      }
    } else {
      const auto container = parse_container(bytes);
      checked_config(container.metadata, fp, e.path.string());
      row.kind = "dense";
      row.model = model_from_container(container);
      row.layers = dense_layers(fp, row.model);
    }
    rows.push_back(std::move(row));
  }

  const auto cache = cached_trajectories(fp, opt.eval_trajectories, mix_seed(opt.eval_seed, 0xE7A1), 1.0,
                                         resolve_cache_dir(opt.cache_dir));
  std::vector<SampleOptions> latent_runs;
  Rng rng(mix_seed(opt.eval_seed, 0x1A7E));
  for (std::size_t s = 0; s < opt.latent_samples; ++s) {
    SampleOptions so;
    so.y = 1 + rng.index(fp.config.classes);
    so.seed = rng.next();
    so.cfg_scale = fp.config.cfg_scale;
    so.record_blocks = false;
    latent_runs.push_back(so);
  }
  std::vector<MatrixF> fp_latents;
  for (const auto& so : latent_runs) fp_latents.push_back(ddpm_sample(fp, so).final_latent.to_matrix());

  std::uint64_t fp_block_bytes = 0;
  for (const auto& [name, t] : fp.named_tensors()) {
    if (is_block_weight(name)) fp_block_bytes += t.numel() * 4U;
  }

  json report{{"eval_trajectories", opt.eval_trajectories},
              {"latent_samples", opt.latent_samples},
              {"eval_seed", opt.eval_seed},
              {"fp_block_weight_bytes", fp_block_bytes},
              {"rows", json::array()}};
  out << std::left << std::setw(20) << "model" << std::right << std::setw(14) << "weight MSE" << std::setw(16)
      << "block-out MSE" << std::setw(16) << "latent MSE" << std::setw(14) << "block bytes" << std::setw(12)
      << "bits/w" << "\n";
  for (const auto& row : rows) {
    const auto per_block = per_block_output_mse(fp, row.model, cache);
    double block_mse = 0.0;
    for (double v : per_block) block_mse += v;
    block_mse /= static_cast<double>(per_block.size());
    double latent = 0.0;
    for (std::size_t s = 0; s < latent_runs.size(); ++s) {
      latent += mean_squared_error(fp_latents[s], ddpm_sample(row.model, latent_runs[s]).final_latent.to_matrix());
    }
    latent /= static_cast<double>(std::max<std::size_t>(1, latent_runs.size()));
    double wmse = 0.0;
    double bits = 0.0;
    double weights = 0.0;
    std::uint64_t bytes = 0;
    json layer_json = json::array();
    for (const auto& lm : row.layers) {
      wmse += lm.weight_mse;
      const double count = static_cast<double>(lm.out * lm.in);
      bits += lm.bits_per_weight * count;
      weights += count;
      bytes += lm.bytes;
      layer_json.push_back(json{{"name", lm.name}, {"o", lm.out}, {"i", lm.in}, {"k", lm.k}, {"d", lm.d},
                                {"bits_per_weight", lm.bits_per_weight}, {"weight_mse", lm.weight_mse},
                                {"bytes", lm.bytes}});
    }
    wmse /= static_cast<double>(std::max<std::size_t>(1, row.layers.size()));
    bits /= std::max(1.0, weights);
    report["rows"].push_back(json{{"label", row.label},
                                  {"kind", row.kind},
                                  {"mean_weight_mse", wmse},
                                  {"block_output_mse", per_block},
                                  {"mean_block_output_mse", block_mse},
                                  {"final_latent_mse", latent},
                                  {"block_weight_bytes", bytes},
                                  {"compression", static_cast<double>(fp_block_bytes) / static_cast<double>(bytes)},
                                  {"bits_per_weight", bits},
                                  {"layers", layer_json}});
    out << std::left << std::setw(20) << row.label << std::right << std::setw(14) << sci(wmse) << std::setw(16)
        << sci(block_mse) << std::setw(16) << sci(latent) << std::setw(14) << bytes << std::setw(12) << fixed(bits, 3)
        << "\n";
  }
  if (!opt.out.empty()) write_text(opt.out, report.dump(2) + "\n");
  return 0;
}

int cmd_report(const ReportOptions& opt, std::ostream& out) {
  require_file(opt.log, "calibration log");
  if (opt.out_dir.empty()) throw ConfigError("report: --out_dir is required");
  fs::create_directories(opt.out_dir);

  std::ifstream log(opt.log);
  std::string line;
  std::string csv = "iter,t,ld,lr,loss,frozen_layers\n";
  std::size_t iters = 0;
  json last;
  while (std::getline(log, line)) {
    if (line.empty()) continue;
    json r;
    try {
      r = json::parse(line);
      csv += std::to_string(r.at("iter").get<std::size_t>()) + "," + std::to_string(r.at("t").get<std::size_t>()) +
             "," + r.at("ld").dump() + "," + r.at("lr").dump() + "," + r.at("loss").dump() + "," +
             std::to_string(r.at("frozen_layers").get<std::size_t>()) + "\n";
    } catch (const json::exception& e) {
      throw InputError("calibration log line " + std::to_string(iters + 1) + " is malformed: " + e.what());
    }
    last = r;
    ++iters;
  }
  write_text(opt.out_dir / "loss_curve.csv", csv);
  out << "loss curve: " << iters << " iterations";
  if (iters > 0) out << ", final L " << sci(last["loss"].get<double>()) << ", frozen layers " << last["frozen_layers"];
  out << "\n";

  if (!opt.quantized.empty()) {
    require_file(opt.quantized, "quantized model");
    const fs::path sidecar = opt.sidecar.empty() ? with_suffix(opt.quantized, ".candidates") : opt.sidecar;
    require_file(sidecar, "candidate sidecar");
    auto layers = layers_from_file(read_quantized(read_file(opt.quantized)));
    apply_candidates(layers, parse_container(read_file(sidecar)));
    const std::size_t n = layers.empty() ? 1 : layers.front().candidates.n;
    std::string pcsv = "layer";
    for (std::size_t j = 1; j <= n; ++j) pcsv += ",position_" + std::to_string(j);
    pcsv += "\n";
    std::vector<double> overall(n, 0.0);
    double total = 0.0;
    for (const auto& st : layers) {
      const auto h = candidate_position_report(st.assignments, st.candidates);
      pcsv += strip_weight(st.name);
      for (std::size_t j = 0; j < n; ++j) {
        pcsv += "," + json(h[j]).dump();
        overall[j] += h[j] * static_cast<double>(st.assignments.size());
      }
      pcsv += "\n";
      total += static_cast<double>(st.assignments.size());
    }
    pcsv += "all";
    out << "candidate positions:";
    for (std::size_t j = 0; j < n; ++j) {
      overall[j] /= std::max(1.0, total);
      pcsv += "," + json(overall[j]).dump();
      out << " " << (j + 1) << "=" << fixed(overall[j], 4);
    }
    pcsv += "\n";
    out << "\n";
    write_text(opt.out_dir / "positions.csv", pcsv);
  }

  if (!opt.grad_report.empty()) {
    require_file(opt.grad_report, "gradient report");
    json g;
    try {
      g = json::parse(std::ifstream(opt.grad_report));
      const auto before = g.at("before").at("histogram").get<std::vector<double>>();
      const auto after = g.at("after").at("histogram").get<std::vector<double>>();
      std::string gcsv = "bin_low,bin_high,before,after\n";
      for (std::size_t b = 0; b < before.size() && b < after.size(); ++b) {
        const double lo = -1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(before.size());
        const double hi = -1.0 + 2.0 * static_cast<double>(b + 1) / static_cast<double>(before.size());
        gcsv += json(lo).dump() + "," + json(hi).dump() + "," + json(before[b]).dump() + "," + json(after[b]).dump() + "\n";
      }
      write_text(opt.out_dir / "grad_cosine.csv", gcsv);
      out << "grad cosine mean: before " << fixed(g["before"]["mean"].get<double>(), 4) << ", after "
          << fixed(g["after"]["mean"].get<double>(), 4) << "\n";
    } catch (const json::exception& e) {
      throw InputError("gradient report is malformed: " + std::string(e.what()));
    }
  }
  out << "wrote " << opt.out_dir.string() << "\n";
  return 0;
}

int cmd_bench(const BenchOptions& opt, std::ostream& out) {
  std::vector<BenchCase> cases;
  for (const auto& s : opt.sizes) {
    BenchCase c;
    char x1 = 0, c1 = 0, x2 = 0, c2 = 0;
    std::istringstream in(s);
    if (!(in >> c.out >> x1 >> c.in >> c1 >> c.codebook_size >> x2 >> c.dim >> c2 >> c.columns) || x1 != 'x' ||
        c1 != ':' || x2 != 'x' || c2 != ':') {
      throw ConfigError("bench size '" + s + "' is not <o>x<i>:<k>x<d>:<q>");
    }
    cases.push_back(c);
  }
  if (cases.empty()) {
    cases = {{256, 256, 4, 256, 16}, {1024, 1024, 4, 256, 16}, {1024, 1024, 2, 64, 16}, {1152, 4608, 4, 256, 8}};
  }
  const auto records = bench(cases, opt.repetitions, opt.seed);
  out << std::left << std::setw(22) << "layer" << std::right << std::setw(12) << "fused ms" << std::setw(12)
      << "dense ms" << std::setw(16) << "fused bytes" << std::setw(16) << "dense bytes" << std::setw(12) << "max rel"
      << "\n";
  for (const auto& r : records) {
    const std::string name = std::to_string(r.config.out) + "x" + std::to_string(r.config.in) + " k" +
                             std::to_string(r.config.codebook_size) + " d" + std::to_string(r.config.dim);
    out << std::left << std::setw(22) << name << std::right << std::setw(12) << fixed(r.fused_ms, 3) << std::setw(12)
        << fixed(r.dense_ms, 3) << std::setw(16) << r.fused_weight_bytes << std::setw(16) << r.dense_weight_bytes
        << std::setw(12) << sci(r.max_rel_diff) << "\n";
  }
  if (!opt.out.empty()) write_text(opt.out, bench_to_jsonl(records));
  return 0;
}

int cmd_inspect(const fs::path& path, std::ostream& out) {
  require_file(path, "input");
  const auto bytes = read_file(path);
  if (is_quantized_file(bytes)) {
    const auto f = read_quantized(bytes);
    out << "quantized model, " << bytes.size() << " bytes\nconfig:";
    for (const auto& [k, v] : f.config) out << " " << k << "=" << v;
    out << "\n";
    for (const auto& rec : f.layers) {
      out << "  " << std::left << std::setw(26) << rec.name << rec.shape.str() << ", " << rec.packed.payload.size()
          << " assignment bytes, " << rec.codebook.size() * 4 << " codebook bytes\n";
    }
    out << "passthrough tensors: " << f.passthrough.size() << "\n";
    return 0;
  }
  const auto c = parse_container(bytes);
  out << "tensor container, " << bytes.size() << " bytes, " << c.tensors.size() << " tensors\n";
  for (const auto& [name, e] : c.tensors) {
    out << "  " << std::left << std::setw(26) << name << dtype_name(e.dtype) << " [";
    for (std::size_t i = 0; i < e.shape.size(); ++i) out << (i ? "," : "") << e.shape[i];
    out << "]\n";
  }
  for (const auto& [k, v] : c.metadata) out << "  meta " << k << "=" << v << "\n";
  return 0;
}

}  // namespace ditvq
