#include "ditvq/kernel.hpp"

#include <atomic>
#include <chrono>
#include <numeric>

#include <json.hpp>

#include "ditvq/parallel.hpp"

namespace ditvq {

PackedLayer PackedLayer::from(const LayerShape& shape, Codebook<float> codebook, const Assignments& assignments,
                              std::vector<float> bias) {
  PackedLayer layer;
  layer.shape = shape;
  layer.codebook = std::move(codebook);
  layer.packed = pack(assignments, shape.codebook_size);
  layer.bias = std::move(bias);
  layer.validate();
  return layer;
}

void PackedLayer::validate() const {
  shape.validate();
  if (codebook.size() != shape.codebook_size || codebook.dim() != shape.dim) {
    throw DimensionError("PackedLayer: codebook is not " + std::to_string(shape.codebook_size) + "x" +
                         std::to_string(shape.dim));
  }
  if (packed.count != shape.count() || packed.bits_per_index != shape.bits_per_index() ||
      packed.payload.size() != packed_size_bytes(shape.count(), shape.codebook_size)) {
    throw DimensionError("PackedLayer: packed assignments do not match " + shape.str());
  }
  if (!bias.empty() && bias.size() != shape.out) throw DimensionError("PackedLayer: bias length mismatch");
}

namespace {

// Sequential LSB-first reader over a packed index stream.
class BitReader {
 public:
  BitReader(const std::uint8_t* payload, std::uint64_t start_bit, unsigned bits)
      : payload_(payload), byte_(start_bit / 8), bits_(bits), mask_((std::uint64_t{1} << bits) - 1) {
    const auto skip = static_cast<unsigned>(start_bit % 8);
    if (skip != 0) {
      load();
      buffer_ >>= skip;
      filled_ -= skip;
    }
  }

  std::uint32_t next() {
    while (filled_ < bits_) load();
    const auto v = static_cast<std::uint32_t>(buffer_ & mask_);
    buffer_ >>= bits_;
    filled_ -= bits_;
    return v;
  }

  std::uint64_t bytes_loaded() const { return loaded_; }

 private:
  void load() {
    buffer_ |= static_cast<std::uint64_t>(payload_[byte_++]) << filled_;
    filled_ += 8;
    ++loaded_;
  }

  const std::uint8_t* payload_;
  std::size_t byte_;
  unsigned bits_;
  std::uint64_t mask_;
  std::uint64_t buffer_ = 0;
  unsigned filled_ = 0;
  std::uint64_t loaded_ = 0;
};

}  // namespace

MatrixF fused_matmul(const PackedLayer& layer, const MatrixF& x, KernelTraffic* traffic) {
  layer.validate();
  const std::size_t o = layer.shape.out;
  const std::size_t d = layer.shape.dim;
  const std::size_t m = layer.shape.in / d;  // sub-vectors per row
  const unsigned bits = layer.shape.bits_per_index();
  if (static_cast<std::size_t>(x.rows()) != layer.shape.in) {
    throw DimensionError("fused_matmul: x has " + std::to_string(x.rows()) + " rows, layer expects " +
                         std::to_string(layer.shape.in));
  }
  const auto q = static_cast<std::size_t>(x.cols());

  // Working copy of the codebook, read by every worker.
  const std::vector<float> words(layer.codebook.words.data(),
                                 layer.codebook.words.data() + layer.codebook.words.size());

  // Rows per chunk are chosen so that every chunk starts on a byte boundary
  // of the packed stream; chunks then read disjoint bytes.
  const std::size_t row_bits_mod = (m * bits) % 8;
  const std::size_t granule = 8 / std::gcd<std::size_t>(8, row_bits_mod);

  MatrixF y(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(q));
  std::atomic<std::uint64_t> loaded{0};
  parallel_for(
      o,
      [&](std::size_t begin, std::size_t end) {
        BitReader reader(layer.packed.payload.data(), static_cast<std::uint64_t>(begin) * m * bits, bits);
        std::vector<double> acc(q);
        for (std::size_t r = begin; r < end; ++r) {
          std::fill(acc.begin(), acc.end(), 0.0);
          for (std::size_t j = 0; j < m; ++j) {
            const float* c = words.data() + static_cast<std::size_t>(reader.next()) * d;
            for (std::size_t t = 0; t < d; ++t) {
              const double cv = c[t];
              const float* xr = x.data() + (j * d + t) * q;
              for (std::size_t col = 0; col < q; ++col) acc[col] += cv * static_cast<double>(xr[col]);
            }
          }
          const double b = layer.bias.empty() ? 0.0 : static_cast<double>(layer.bias[r]);
          for (std::size_t col = 0; col < q; ++col) {
            y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(col)) = static_cast<float>(acc[col] + b);
          }
        }
        loaded += reader.bytes_loaded();
      },
      granule);

  if (traffic != nullptr) {
    traffic->assignment_bytes = loaded.load();
    traffic->codebook_bytes = words.size() * sizeof(float);
  }
  return y;
}

MatrixF dequantized_matmul(const PackedLayer& layer, const MatrixF& x) {
  layer.validate();
  if (static_cast<std::size_t>(x.rows()) != layer.shape.in) throw DimensionError("dequantized_matmul: shape mismatch");
  const Assignments a = unpack(layer.packed, layer.shape.count(), layer.shape.codebook_size);
  const MatrixF w = reconstruct_hard(layer.codebook, a, layer.shape);
  MatrixF y = w * x;
  if (!layer.bias.empty()) {
    y.colwise() += Eigen::Map<const Eigen::VectorXf>(layer.bias.data(), static_cast<Eigen::Index>(layer.bias.size()));
  }
  return y;
}

std::vector<BenchRecord> bench(const std::vector<BenchCase>& cases, std::size_t repetitions, std::uint64_t seed) {
  std::vector<BenchRecord> report;
  if (repetitions == 0) return report;
  using Clock = std::chrono::steady_clock;
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    const BenchCase& bc = cases[ci];
    const LayerShape shape{bc.out, bc.in, bc.dim, bc.codebook_size};
    shape.validate();
    Rng rng(mix_seed(seed, ci));
    Codebook<float> cb;
    cb.words = MatrixF::NullaryExpr(static_cast<Eigen::Index>(bc.codebook_size), static_cast<Eigen::Index>(bc.dim),
                                    [&] { return static_cast<float>(rng.normal()); });
    Assignments a(shape.count());
    for (auto& v : a) v = static_cast<std::uint32_t>(rng.index(bc.codebook_size));
    const PackedLayer layer = PackedLayer::from(shape, std::move(cb), a);
    const MatrixF x = MatrixF::NullaryExpr(static_cast<Eigen::Index>(bc.in), static_cast<Eigen::Index>(bc.columns),
                                           [&] { return static_cast<float>(rng.normal()); });

    BenchRecord rec;
    rec.config = bc;
    rec.repetitions = repetitions;
    KernelTraffic traffic;
    MatrixF fused;
    MatrixF dense;
    auto t0 = Clock::now();
    for (std::size_t r = 0; r < repetitions; ++r) fused = fused_matmul(layer, x, &traffic);
    auto t1 = Clock::now();
    for (std::size_t r = 0; r < repetitions; ++r) dense = dequantized_matmul(layer, x);
    auto t2 = Clock::now();
    const double reps = static_cast<double>(repetitions);
    rec.fused_ms = std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
    rec.dense_ms = std::chrono::duration<double, std::milli>(t2 - t1).count() / reps;
    rec.fused_weight_bytes = traffic.total();
    rec.dense_weight_bytes = traffic.total() + static_cast<std::uint64_t>(bc.out) * bc.in * sizeof(float);
    rec.fused_bytes_per_output = static_cast<double>(rec.fused_weight_bytes) / static_cast<double>(bc.out);
    const double scale = static_cast<double>(dense.cwiseAbs().maxCoeff());
    rec.max_rel_diff = scale > 0.0 ? static_cast<double>((fused - dense).cwiseAbs().maxCoeff()) / scale : 0.0;
    report.push_back(rec);
  }
  return report;
}

std::string bench_to_jsonl(const std::vector<BenchRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    const nlohmann::ordered_json j{{"o", r.config.out},
                                   {"i", r.config.in},
                                   {"d", r.config.dim},
                                   {"k", r.config.codebook_size},
                                   {"q", r.config.columns},
                                   {"repetitions", r.repetitions},
                                   {"fused_ms", r.fused_ms},
                                   {"dense_ms", r.dense_ms},
                                   {"fused_weight_bytes", r.fused_weight_bytes},
                                   {"dense_weight_bytes", r.dense_weight_bytes},
                                   {"fused_bytes_per_output", r.fused_bytes_per_output},
                                   {"max_rel_diff", r.max_rel_diff}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace ditvq
