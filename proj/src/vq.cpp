#include "ditvq/vq.hpp"

#include <bit>

namespace ditvq {

bool is_power_of_two(std::size_t k) { return k != 0 && (k & (k - 1)) == 0; }

void LayerShape::validate() const {
  if (out == 0 || in == 0) throw ConfigError("layer " + str() + ": empty weight");
  if (dim == 0 || in % dim != 0) {
    throw ConfigError("layer " + str() + ": d=" + std::to_string(dim) + " does not divide i=" + std::to_string(in));
  }
  if (!is_power_of_two(codebook_size) || codebook_size < 2 || codebook_size > 65536) {
    throw ConfigError("layer " + str() + ": k=" + std::to_string(codebook_size) +
                      " must be a power of two in [2, 65536]");
  }
}

unsigned LayerShape::bits_per_index() const {
  return static_cast<unsigned>(std::countr_zero(codebook_size));
}

std::string LayerShape::str() const {
  return std::to_string(out) + "x" + std::to_string(in) + " (k=" + std::to_string(codebook_size) +
         ", d=" + std::to_string(dim) + ")";
}

void softmax_row(std::span<const float> logits, std::span<float> out) {
  const float m = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const double e = std::exp(static_cast<double>(logits[j]) - m);
    out[j] = static_cast<float>(e);
    total += e;
  }
  for (std::size_t j = 0; j < logits.size(); ++j) {
    out[j] = static_cast<float>(std::exp(static_cast<double>(logits[j]) - m) / total);
  }
}

Assignments finalize(const CandidateSet& set) {
  Assignments a(set.count());
  for (std::size_t s = 0; s < a.size(); ++s) {
    const auto z = set.logits_of(s);
    std::size_t best = 0;
    for (std::size_t j = 1; j < set.n; ++j) {
      if (z[j] > z[best]) best = j;
    }
    a[s] = set.of(s)[best];
  }
  return a;
}

std::size_t packed_size_bytes(std::size_t count, std::size_t k) {
  const std::size_t bits = static_cast<std::size_t>(std::countr_zero(k));
  return (count * bits + 7) / 8;
}

PackedAssignments pack(const Assignments& a, std::size_t k) {
  if (!is_power_of_two(k) || k < 2 || k > 65536) throw ConfigError("pack: k must be a power of two in [2, 65536]");
  PackedAssignments p;
  p.bits_per_index = static_cast<unsigned>(std::countr_zero(k));
  p.count = a.size();
  p.payload.assign(packed_size_bytes(a.size(), k), 0);
  std::uint64_t buffer = 0;
  unsigned filled = 0;
  std::size_t byte = 0;
  for (std::size_t s = 0; s < a.size(); ++s) {
    if (a[s] >= k) {
      throw EncodingError("pack: index " + std::to_string(a[s]) + " at position " + std::to_string(s) +
                          " is not below k=" + std::to_string(k));
    }
    buffer |= static_cast<std::uint64_t>(a[s]) << filled;
    filled += p.bits_per_index;
    while (filled >= 8) {
      p.payload[byte++] = static_cast<std::uint8_t>(buffer & 0xFFU);
      buffer >>= 8;
      filled -= 8;
    }
  }
  if (filled > 0) p.payload[byte] = static_cast<std::uint8_t>(buffer & 0xFFU);
  return p;
}

Assignments unpack(const PackedAssignments& packed, std::size_t count, std::size_t k) {
  if (!is_power_of_two(k) || k < 2 || k > 65536) throw ConfigError("unpack: k must be a power of two in [2, 65536]");
  const unsigned bits = static_cast<unsigned>(std::countr_zero(k));
  if (packed.payload.size() != packed_size_bytes(count, k)) {
    throw EncodingError("unpack: payload has " + std::to_string(packed.payload.size()) + " bytes, expected " +
                        std::to_string(packed_size_bytes(count, k)));
  }
  Assignments a(count);
  const std::uint64_t mask = (std::uint64_t{1} << bits) - 1;
  std::uint64_t buffer = 0;
  unsigned filled = 0;
  std::size_t byte = 0;
  for (std::size_t s = 0; s < count; ++s) {
    while (filled < bits) {
      buffer |= static_cast<std::uint64_t>(packed.payload[byte++]) << filled;
      filled += 8;
    }
    a[s] = static_cast<std::uint32_t>(buffer & mask);
    buffer >>= bits;
    filled -= bits;
  }
  return a;
}

StorageReport storage_report(const LayerShape& shape) {
  shape.validate();
  StorageReport r;
  const auto bits = static_cast<std::uint64_t>(shape.bits_per_index());
  r.assignment_bits = static_cast<std::uint64_t>(shape.count()) * bits;
  r.codebook_bits = static_cast<std::uint64_t>(shape.codebook_size) * shape.dim * 32U;
  r.effective_bits_per_weight = static_cast<double>(bits) / static_cast<double>(shape.dim);
  return r;
}

LayerInit quantize_layer(const MatrixF& weight, const LayerShape& shape, std::size_t n, std::uint64_t seed) {
  shape.validate();
  if (static_cast<std::size_t>(weight.rows()) != shape.out || static_cast<std::size_t>(weight.cols()) != shape.in) {
    throw DimensionError("quantize_layer: weight does not match " + shape.str());
  }
  const MatrixF sub = split_subvectors(weight, shape.dim);
  KMeansOptions opt;
  opt.k = shape.codebook_size;
  opt.seed = seed;
  auto km = kmeans(sub, opt);
  LayerInit init;
  init.candidates = build_candidates(sub, km.codebook, n);
  init.codebook = std::move(km.codebook);
  init.assignments = std::move(km.assignments);
  init.objective = km.objective;
  return init;
}

}  // namespace ditvq
