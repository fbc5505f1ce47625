#pragma once

// Lookup matrix multiply over packed assignments. Each output row decodes its
// indices straight from the packed stream and accumulates codeword·activation
// partial dot products, so the dense weight is never formed.

#include <cstdint>
#include <string>
#include <vector>

#include "ditvq/vq.hpp"

namespace ditvq {

struct PackedLayer {
  LayerShape shape;
  Codebook<float> codebook;
  PackedAssignments packed;
  std::vector<float> bias;  // empty or shape.out entries

  /// Packs finalized assignments for `shape`.
  static PackedLayer from(const LayerShape& shape, Codebook<float> codebook, const Assignments& assignments,
                          std::vector<float> bias = {});
  void validate() const;
};

/// Weight bytes read by one call: packed stream bytes and the codebook copy.
struct KernelTraffic {
  std::uint64_t assignment_bytes = 0;
  std::uint64_t codebook_bytes = 0;
  std::uint64_t total() const { return assignment_bytes + codebook_bytes; }
};

/// W·x + bias with W = C[A]; x is [i × q], the result [o × q].
MatrixF fused_matmul(const PackedLayer& layer, const MatrixF& x, KernelTraffic* traffic = nullptr);

/// Reference path: reconstruct the dense weight, then multiply.
MatrixF dequantized_matmul(const PackedLayer& layer, const MatrixF& x);

struct BenchCase {
  std::size_t out = 0;
  std::size_t in = 0;
  std::size_t dim = 4;
  std::size_t codebook_size = 256;
  std::size_t columns = 16;  // q
};

struct BenchRecord {
  BenchCase config;
  std::size_t repetitions = 0;
  double fused_ms = 0.0;  // mean per call
  double dense_ms = 0.0;
  std::uint64_t fused_weight_bytes = 0;
  std::uint64_t dense_weight_bytes = 0;  // dequantize path: codebook + packed + o·i·4
  double fused_bytes_per_output = 0.0;
  double max_rel_diff = 0.0;
};

/// Times both paths on seeded random layers. repetitions == 0 gives an empty report.
std::vector<BenchRecord> bench(const std::vector<BenchCase>& cases, std::size_t repetitions, std::uint64_t seed = 0);

/// One JSON object per line.
std::string bench_to_jsonl(const std::vector<BenchRecord>& records);

}  // namespace ditvq
