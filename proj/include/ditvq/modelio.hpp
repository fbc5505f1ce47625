#pragma once

// Two binary formats:
//
// Tensor container
//   u64 LE header length N | N bytes UTF-8 JSON header | data section
//   header: {"name": {"dtype": "F32"|"F64", "shape": [...], "data_offsets": [b, e]}, ...,
//            "__metadata__": {"key": "value"}}
//   offsets are relative to the data section; values little-endian row-major.
//
// Quantized model
//   u32 LE magic 0x56513444 | u32 LE version 1 | u64 LE header length N |
//   N bytes UTF-8 JSON header | payload
//   payload: every layer codebook (k·d f32 LE), then every packed assignment
//   stream, then passthrough tensors. The header records each byte range.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ditvq/common.hpp"
#include "ditvq/vq.hpp"

namespace ditvq {

class ParseError : public InputError {
 public:
  enum class Kind {
    Truncated,
    MalformedHeader,
    UnknownDtype,
    OutOfBounds,
    Overlap,
    Misaligned,
    DuplicateName,
    BadMagic,
    UnsupportedVersion,
    PayloadLength,
  };
  ParseError(Kind kind, const std::string& what) : InputError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

enum class DType { F32, F64 };

std::size_t dtype_size(DType dtype);
std::string dtype_name(DType dtype);

struct TensorEntry {
  DType dtype = DType::F32;
  std::vector<std::size_t> shape;
  std::vector<std::uint8_t> bytes;  // little-endian, row-major

  std::size_t numel() const;
  static TensorEntry from_f32(std::vector<std::size_t> shape, std::span<const float> values);
  static TensorEntry from_f64(std::vector<std::size_t> shape, std::span<const double> values);
  /// Values as float (F64 is narrowed).
  std::vector<float> to_f32() const;

  friend bool operator==(const TensorEntry&, const TensorEntry&) = default;
};

struct TensorContainer {
  std::map<std::string, TensorEntry> tensors;
  std::map<std::string, std::string> metadata;

  const TensorEntry& at(const std::string& name) const;
  friend bool operator==(const TensorContainer&, const TensorContainer&) = default;
};

TensorContainer parse_container(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> write_container(const TensorContainer& container);

struct QuantizedLayerRecord {
  std::string name;
  LayerShape shape;
  std::vector<float> codebook;  // k·d, row-major
  PackedAssignments packed;

  friend bool operator==(const QuantizedLayerRecord& a, const QuantizedLayerRecord& b) {
    return a.name == b.name && a.shape == b.shape && a.codebook == b.codebook &&
           a.packed.bits_per_index == b.packed.bits_per_index && a.packed.count == b.packed.count &&
           a.packed.payload == b.packed.payload;
  }
};

struct QuantizedModelFile {
  static constexpr std::uint32_t kMagic = 0x56513444U;
  static constexpr std::uint32_t kVersion = 1U;

  std::map<std::string, std::string> config;
  std::vector<QuantizedLayerRecord> layers;
  std::map<std::string, TensorEntry> passthrough;

  friend bool operator==(const QuantizedModelFile&, const QuantizedModelFile&) = default;
};

std::vector<std::uint8_t> write_quantized(const QuantizedModelFile& model);
QuantizedModelFile read_quantized(std::span<const std::uint8_t> bytes);

/// Record for one layer from its codebook and finalized assignments.
QuantizedLayerRecord make_layer_record(const std::string& name, const LayerShape& shape,
                                       const Codebook<float>& codebook, const Assignments& assignments);
Codebook<float> record_codebook(const QuantizedLayerRecord& record);
Assignments record_assignments(const QuantizedLayerRecord& record);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace ditvq
