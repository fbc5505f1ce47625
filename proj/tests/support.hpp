#pragma once

// Shared test helpers: seeded random tensors and a central-difference
// gradient probe.

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ditvq/dit.hpp"
#include "ditvq/kernel.hpp"
#include "ditvq/modelio.hpp"
#include "ditvq/tensor.hpp"

namespace ditvq::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, float scale = 1.0F, bool requires_grad = false) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal()) * scale;
  return Tensor::from(shape, std::move(v), requires_grad);
}

inline MatrixF random_matrix(std::size_t rows, std::size_t cols, Rng& rng, float scale = 1.0F) {
  MatrixF m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal()) * scale;
  return m;
}

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheck {
  double rel_error = 0.0;  // ||analytic - numeric|| / ||numeric||
  double numeric_norm = 0.0;
  double analytic_norm = 0.0;
  double abs_error = 0.0;
  std::size_t probed = 0;
};

// Projects f's output onto a fixed random direction R, so the scalar probe is
// L = Σ f(x) ⊙ R. The analytic gradient comes from backward(); the numeric one
// from (L(x + h e_i) − L(x − h e_i)) / (2h), with L summed in double.
// At most `max_probes` coordinates of input `which` are probed.
inline GradCheck gradcheck(const TensorFn& f, const std::vector<Tensor>& inputs, std::size_t which, float h,
                           std::uint64_t seed, std::size_t max_probes = 64) {
  Rng rng(seed);
  std::vector<Tensor> leaves;
  for (const auto& t : inputs) leaves.push_back(t.clone(true));
  const Tensor y = f(leaves);
  const Tensor r = random_tensor(y.shape(), rng);
  backward(sum(mul(y, r)));
  const auto analytic = leaves[which].grad();

  auto probe = [&](std::size_t i, float delta, float& actual) {
    std::vector<Tensor> xs;
    for (const auto& t : inputs) xs.push_back(t.detach());
    std::vector<float> v = inputs[which].values();
    const float base = v[i];
    v[i] = base + delta;
    actual = v[i];
    xs[which] = Tensor::from(inputs[which].shape(), std::move(v));
    const Tensor out = f(xs);
    double acc = 0.0;
    for (std::size_t j = 0; j < out.numel(); ++j) acc += static_cast<double>(out.data()[j]) * r.data()[j];
    return acc;
  };

  const std::size_t n = inputs[which].numel();
  std::vector<std::size_t> coords;
  if (n <= max_probes) {
    for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
  } else {
    for (std::size_t i = 0; i < max_probes; ++i) coords.push_back(rng.index(n));
  }
  double diff = 0.0;
  double norm = 0.0;
  double anorm = 0.0;
  for (std::size_t i : coords) {
    float xp = 0.0F;
    float xm = 0.0F;
    const double lp = probe(i, h, xp);
    const double lm = probe(i, -h, xm);
    const double numeric = (lp - lm) / (static_cast<double>(xp) - static_cast<double>(xm));
    diff += (numeric - analytic[i]) * (numeric - analytic[i]);
    norm += numeric * numeric;
    anorm += static_cast<double>(analytic[i]) * analytic[i];
  }
  GradCheck g;
  g.numeric_norm = std::sqrt(norm);
  g.analytic_norm = std::sqrt(anorm);
  g.abs_error = std::sqrt(diff);
  g.rel_error = g.abs_error / std::max(g.numeric_norm, 1e-12);
  g.probed = coords.size();
  return g;
}


struct PrimitiveCase {
  std::string name;
  TensorFn fn;
  std::vector<Tensor> inputs;
};

// One case per differentiable primitive, sized so every coordinate is probed.
inline std::vector<PrimitiveCase> primitive_cases(std::uint64_t seed) {
  Rng rng(seed);
  auto r = [&](const Shape& s) { return random_tensor(s, rng); };
  // Inputs bounded away from the kink at 0.
  auto away_from_zero = [&](const Shape& s) {
    std::vector<float> v(shape_numel(s));
    for (auto& x : v) x = static_cast<float>((rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.2 + rng.uniform()));
    return Tensor::from(s, std::move(v));
  };
  std::vector<PrimitiveCase> cases;
  cases.push_back({"matmul", [](const auto& x) { return matmul(x[0], x[1]); }, {r({4, 4}), r({4, 4})}});
  cases.push_back({"matmul_rect", [](const auto& x) { return matmul(x[0], x[1]); }, {r({3, 5}), r({5, 2})}});
  cases.push_back({"transpose", [](const auto& x) { return transpose(x[0]); }, {r({3, 4})}});
  cases.push_back({"linear", [](const auto& x) { return linear(x[0], x[1], x[2]); }, {r({3, 4}), r({5, 4}), r({5})}});
  cases.push_back({"linear_vector", [](const auto& x) { return linear(x[0], x[1], x[2]); }, {r({4}), r({5, 4}), r({5})}});
  cases.push_back({"add", [](const auto& x) { return add(x[0], x[1]); }, {r({2, 3}), r({2, 3})}});
  cases.push_back({"sub", [](const auto& x) { return sub(x[0], x[1]); }, {r({2, 3}), r({2, 3})}});
  cases.push_back({"mul", [](const auto& x) { return mul(x[0], x[1]); }, {r({2, 3}), r({2, 3})}});
  cases.push_back({"scale", [](const auto& x) { return scale(x[0], -1.75F); }, {r({2, 3})}});
  cases.push_back({"add_scalar", [](const auto& x) { return add_scalar(x[0], 0.5F); }, {r({2, 3})}});
  cases.push_back({"abs", [](const auto& x) { return abs(x[0]); }, {away_from_zero({2, 3})}});
  cases.push_back({"gelu", [](const auto& x) { return activation_gelu(x[0]); },
                   {Tensor::from({4}, {-2.0F, -0.5F, 0.5F, 2.0F})}});
  cases.push_back({"gelu_random", [](const auto& x) { return activation_gelu(x[0]); }, {r({3, 4})}});
  cases.push_back({"add_row", [](const auto& x) { return add_row(x[0], x[1]); }, {r({3, 4}), r({4})}});
  cases.push_back({"mul_row", [](const auto& x) { return mul_row(x[0], x[1]); }, {r({3, 4}), r({4})}});
  cases.push_back({"layer_norm", [](const auto& x) { return layer_norm(x[0]); }, {r({2, 8})}});
  cases.push_back({"softmax", [](const auto& x) { return softmax(x[0]); }, {r({3, 5})}});
  cases.push_back({"sum", [](const auto& x) { return sum(x[0]); }, {r({3, 4})}});
  cases.push_back({"mean", [](const auto& x) { return mean(x[0]); }, {r({3, 4})}});
  cases.push_back({"mse", [](const auto& x) { return mse(x[0], x[1]); }, {r({3, 4}), r({3, 4})}});
  cases.push_back({"reshape", [](const auto& x) { return reshape(x[0], {4, 3}); }, {r({3, 4})}});
  cases.push_back({"slice_last", [](const auto& x) { return slice_last(x[0], 1, 3); }, {r({3, 4})}});
  cases.push_back({"concat_last", [](const auto& x) { return concat_last({x[0], x[1]}); }, {r({3, 2}), r({3, 3})}});
  cases.push_back({"row", [](const auto& x) { return row(x[0], 2); }, {r({4, 3})}});
  return cases;
}

/// Worst relative error over every input of every primitive case.
struct PrimitiveCheck {
  std::string name;
  std::size_t input = 0;
  double rel_error = 0.0;
};

inline std::vector<PrimitiveCheck> check_primitives(std::uint64_t seed, float h = 1e-3F) {
  std::vector<PrimitiveCheck> out;
  for (const auto& pc : primitive_cases(seed)) {
    for (std::size_t which = 0; which < pc.inputs.size(); ++which) {
      out.push_back({pc.name, which, gradcheck(pc.fn, pc.inputs, which, h, mix_seed(seed, which)).rel_error});
    }
  }
  return out;
}

// A single DiT block on 4 tokens, width 8, 2 heads. Inputs are z, c and then
// (weight, bias) of every linear in BlockParams order.
struct BlockFixture {
  std::size_t heads = 2;
  std::vector<std::string> names;
  std::vector<Tensor> inputs;
  TensorFn fn;
};

// The key bias adds q·b to every logit of a query row, which softmax cancels,
// so its true gradient is identically zero and a relative error is undefined.
// There both gradients must vanish to within finite-difference noise.
inline bool structurally_zero(const std::string& name) { return name == "key.bias"; }

inline bool block_check_passes(const std::string& name, const GradCheck& g, double tol) {
  if (structurally_zero(name)) return g.analytic_norm < 1e-4 && g.numeric_norm < tol;
  return g.rel_error < tol;
}

inline BlockFixture block_fixture(std::uint64_t seed) {
  DiTConfig cfg;
  cfg.depth = 1;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.tokens = 4;
  const DiTModel model = make_toy_model(cfg, seed);
  Rng rng(mix_seed(seed, 1));
  BlockFixture f;
  f.names = {"z", "c"};
  f.inputs = {random_tensor({4, 8}, rng), random_tensor({8}, rng)};
  for (const auto& [name, lin] : model.blocks[0].linears()) {
    f.names.push_back(name + ".weight");
    f.names.push_back(name + ".bias");
    f.inputs.push_back(lin->weight.detach());
    // Non-zero biases so their gradients are exercised in general position.
    f.inputs.push_back(random_tensor(lin->bias.shape(), rng, 0.1F));
  }
  f.fn = [heads = f.heads](const std::vector<Tensor>& x) {
    BlockParams p;
    std::size_t i = 2;
    for (auto& entry : p.linears()) {
      entry.second->weight = x[i++];
      entry.second->bias = x[i++];
    }
    return dit_block(x[0], x[1], p, heads);
  };
  return f;
}


// Little-endian file bytes from a header string and a data section, written
// out by hand so the parser is checked against an independent encoder.
inline std::vector<std::uint8_t> raw_container(const std::string& header, const std::vector<std::uint8_t>& data) {
  std::vector<std::uint8_t> out;
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(header.size() >> (8 * i)));
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), data.begin(), data.end());
  return out;
}

inline std::vector<std::uint8_t> f32_bytes(std::initializer_list<float> values) {
  std::vector<std::uint8_t> out;
  for (float v : values) {
    std::uint32_t u = 0;
    std::memcpy(&u, &v, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  return out;
}

inline std::string random_name(Rng& rng) {
  static const std::string alphabet = "abcdefghijklmnopqrstuvwxyz0123456789._";
  std::string s(1 + rng.index(12), 'a');
  for (auto& c : s) c = alphabet[rng.index(alphabet.size())];
  return "t" + s;
}

inline TensorEntry random_entry(Rng& rng) {
  std::vector<std::size_t> shape(rng.index(4));
  for (auto& e : shape) e = 1 + rng.index(5);
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  if (rng.uniform() < 0.5) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return TensorEntry::from_f32(shape, v);
  }
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return TensorEntry::from_f64(shape, v);
}

inline TensorContainer random_container(Rng& rng) {
  TensorContainer c;
  const std::size_t count = rng.index(6);
  for (std::size_t i = 0; i < count; ++i) c.tensors[random_name(rng)] = random_entry(rng);
  const std::size_t meta = rng.index(3);
  for (std::size_t i = 0; i < meta; ++i) c.metadata[random_name(rng)] = random_name(rng);
  return c;
}

inline QuantizedModelFile random_quantized(Rng& rng) {
  static const std::size_t ks[] = {2, 4, 16, 64, 256, 4096};
  QuantizedModelFile m;
  m.config["seed"] = std::to_string(rng.next() % 1000);
  const std::size_t layers = rng.index(4);
  for (std::size_t l = 0; l < layers; ++l) {
    LayerShape shape;
    shape.dim = 1 + rng.index(4);
    shape.in = shape.dim * (1 + rng.index(6));
    shape.out = 1 + rng.index(7);
    shape.codebook_size = ks[rng.index(6)];
    Codebook<float> cb;
    cb.words = random_matrix(shape.codebook_size, shape.dim, rng);
    Assignments a(shape.count());
    for (auto& v : a) v = static_cast<std::uint32_t>(rng.index(shape.codebook_size));
    m.layers.push_back(make_layer_record("layer" + std::to_string(l), shape, cb, a));
  }
  const std::size_t pass = rng.index(4);
  for (std::size_t i = 0; i < pass; ++i) m.passthrough[random_name(rng)] = random_entry(rng);
  return m;
}


// Reconstruct-then-multiply in double, straight from the unpacked indices.
inline MatrixD naive_matmul(const LayerShape& shape, const Codebook<float>& codebook, const Assignments& a,
                            const std::vector<float>& bias, const MatrixF& x) {
  MatrixD w(static_cast<Eigen::Index>(shape.out), static_cast<Eigen::Index>(shape.in));
  const std::size_t m = shape.in / shape.dim;
  for (std::size_t r = 0; r < shape.out; ++r) {
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t t = 0; t < shape.dim; ++t) {
        w(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j * shape.dim + t)) =
            codebook.words(a[r * m + j], static_cast<Eigen::Index>(t));
      }
    }
  }
  MatrixD y = w * x.cast<double>();
  if (!bias.empty()) {
    for (Eigen::Index r = 0; r < y.rows(); ++r) y.row(r).array() += static_cast<double>(bias[static_cast<std::size_t>(r)]);
  }
  return y;
}

struct KernelCase {
  LayerShape shape;
  Codebook<float> codebook;
  Assignments assignments;
  std::vector<float> bias;
  MatrixF x;
};

inline KernelCase random_kernel_case(Rng& rng, std::size_t k) {
  KernelCase c;
  c.shape.codebook_size = k;
  c.shape.dim = 1 + rng.index(8);
  c.shape.in = c.shape.dim * (1 + rng.index(24));
  c.shape.out = 1 + rng.index(40);
  c.codebook.words = random_matrix(k, c.shape.dim, rng);
  c.assignments.resize(c.shape.count());
  for (auto& v : c.assignments) v = static_cast<std::uint32_t>(rng.index(k));
  if (rng.uniform() < 0.5) {
    c.bias.resize(c.shape.out);
    for (auto& b : c.bias) b = static_cast<float>(rng.normal());
  }
  c.x = random_matrix(c.shape.in, 1 + rng.index(9), rng);
  return c;
}

inline double max_relative_difference(const MatrixF& got, const MatrixD& want) {
  const double scale = want.cwiseAbs().maxCoeff();
  return (got.cast<double>() - want).cwiseAbs().maxCoeff() / std::max(scale, 1e-300);
}


struct CliRun {
  int exit_code = -1;
  std::string output;  // stdout and stderr interleaved
};

inline CliRun run_cli(const std::string& cli, const std::string& args) {
  CliRun r;
  const std::string cmd = "'" + cli + "' " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buf[4096];
  std::size_t n = 0;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

/// Fresh scratch directory under the system temp path, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("ditvq-" + tag + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace ditvq::testing
