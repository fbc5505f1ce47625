#include "ditvq/modelio.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <stack>

#include <json.hpp>

namespace ditvq {

static_assert(std::endian::native == std::endian::little, "modelio assumes a little-endian host");

using json = nlohmann::json;
using Kind = ParseError::Kind;

namespace {

constexpr const char* kMetadataKey = "__metadata__";

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> bytes, std::size_t at, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes[at + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

// Header text padded with spaces to a multiple of 8 bytes.
std::string padded_header(const json& header) {
  std::string text = header.dump();
  text.append((8 - text.size() % 8) % 8, ' ');
  return text;
}

json parse_json_header(std::span<const std::uint8_t> bytes) {
  std::vector<std::set<std::string>> keys;
  std::string duplicate;
  json::parser_callback_t cb = [&](int, json::parse_event_t event, json& parsed) {
    switch (event) {
      case json::parse_event_t::object_start: keys.emplace_back(); break;
      case json::parse_event_t::object_end: keys.pop_back(); break;
      case json::parse_event_t::key:
        if (!keys.back().insert(parsed.get<std::string>()).second && duplicate.empty()) {
          duplicate = parsed.get<std::string>();
        }
        break;
      default: break;
    }
    return true;
  };
  json header;
  try {
    header = json::parse(bytes.begin(), bytes.end(), cb);
  } catch (const json::exception& e) {
    throw ParseError(Kind::MalformedHeader, std::string("header is not valid JSON: ") + e.what());
  }
  if (!duplicate.empty()) throw ParseError(Kind::DuplicateName, "duplicate header key '" + duplicate + "'");
  if (!header.is_object()) throw ParseError(Kind::MalformedHeader, "header must be a JSON object");
  return header;
}

struct Range {
  std::string name;
  std::uint64_t begin;
  std::uint64_t end;
};

void check_ranges(std::vector<Range> ranges) {
  std::sort(ranges.begin(), ranges.end(), [](const Range& a, const Range& b) {
    return a.begin < b.begin || (a.begin == b.begin && a.end < b.end);
  });
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].begin < ranges[i - 1].end) {
      throw ParseError(Kind::Overlap, "byte ranges of '" + ranges[i - 1].name + "' and '" + ranges[i].name + "' overlap");
    }
  }
}

DType parse_dtype(const json& j, const std::string& name) {
  if (!j.is_string()) throw ParseError(Kind::MalformedHeader, "tensor '" + name + "': dtype must be a string");
  const auto s = j.get<std::string>();
  if (s == "F32") return DType::F32;
  if (s == "F64") return DType::F64;
  throw ParseError(Kind::UnknownDtype, "tensor '" + name + "': unsupported dtype '" + s + "'");
}

std::pair<std::uint64_t, std::uint64_t> parse_offsets(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_unsigned() || !j[1].is_number_unsigned()) {
    throw ParseError(Kind::MalformedHeader, what + ": offsets must be two unsigned integers");
  }
  const auto b = j[0].get<std::uint64_t>();
  const auto e = j[1].get<std::uint64_t>();
  if (e < b) throw ParseError(Kind::MalformedHeader, what + ": end offset precedes begin");
  return {b, e};
}

// Parses {"dtype", "shape", "data_offsets"} entries against a data section.
TensorEntry parse_entry(const std::string& name, const json& j, std::span<const std::uint8_t> data, Range& range) {
  if (!j.is_object() || !j.contains("dtype") || !j.contains("shape") || !j.contains("data_offsets")) {
    throw ParseError(Kind::MalformedHeader, "tensor '" + name + "': missing dtype/shape/data_offsets");
  }
  TensorEntry e;
  e.dtype = parse_dtype(j["dtype"], name);
  const auto& shape = j["shape"];
  if (!shape.is_array()) throw ParseError(Kind::MalformedHeader, "tensor '" + name + "': shape must be an array");
  for (const auto& x : shape) {
    if (!x.is_number_unsigned()) throw ParseError(Kind::MalformedHeader, "tensor '" + name + "': bad extent");
    e.shape.push_back(x.get<std::size_t>());
  }
  const auto [b, end] = parse_offsets(j["data_offsets"], "tensor '" + name + "'");
  if (end > data.size()) {
    throw ParseError(Kind::OutOfBounds, "tensor '" + name + "': range [" + std::to_string(b) + "," +
                                            std::to_string(end) + ") exceeds data section of " +
                                            std::to_string(data.size()) + " bytes");
  }
  if (b % dtype_size(e.dtype) != 0) throw ParseError(Kind::Misaligned, "tensor '" + name + "': misaligned offset");
  if (end - b != e.numel() * dtype_size(e.dtype)) {
    throw ParseError(Kind::MalformedHeader, "tensor '" + name + "': byte length does not match shape");
  }
  e.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(b), data.begin() + static_cast<std::ptrdiff_t>(end));
  range = {name, b, end};
  return e;
}

json entry_header(const TensorEntry& e, std::uint64_t begin) {
  return json{{"dtype", dtype_name(e.dtype)}, {"shape", e.shape}, {"data_offsets", {begin, begin + e.bytes.size()}}};
}

void append_aligned(std::vector<std::uint8_t>& data, const std::vector<std::uint8_t>& bytes, std::size_t align) {
  data.resize((data.size() + align - 1) / align * align, 0);
  data.insert(data.end(), bytes.begin(), bytes.end());
}

}  // namespace

std::size_t dtype_size(DType dtype) { return dtype == DType::F32 ? 4 : 8; }

std::string dtype_name(DType dtype) { return dtype == DType::F32 ? "F32" : "F64"; }

std::size_t TensorEntry::numel() const {
  std::size_t n = 1;
  for (auto x : shape) n *= x;
  return n;
}

TensorEntry TensorEntry::from_f32(std::vector<std::size_t> shape, std::span<const float> values) {
  TensorEntry e;
  e.dtype = DType::F32;
  e.shape = std::move(shape);
  if (e.numel() != values.size()) throw DimensionError("TensorEntry: value count does not match shape");
  e.bytes.resize(values.size() * 4);
  std::memcpy(e.bytes.data(), values.data(), e.bytes.size());
  return e;
}

TensorEntry TensorEntry::from_f64(std::vector<std::size_t> shape, std::span<const double> values) {
  TensorEntry e;
  e.dtype = DType::F64;
  e.shape = std::move(shape);
  if (e.numel() != values.size()) throw DimensionError("TensorEntry: value count does not match shape");
  e.bytes.resize(values.size() * 8);
  std::memcpy(e.bytes.data(), values.data(), e.bytes.size());
  return e;
}

std::vector<float> TensorEntry::to_f32() const {
  std::vector<float> out(numel());
  if (dtype == DType::F32) {
    std::memcpy(out.data(), bytes.data(), out.size() * 4);
  } else {
    std::vector<double> tmp(numel());
    std::memcpy(tmp.data(), bytes.data(), tmp.size() * 8);
    std::transform(tmp.begin(), tmp.end(), out.begin(), [](double v) { return static_cast<float>(v); });
  }
  return out;
}

const TensorEntry& TensorContainer::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw InputError("container has no tensor named '" + name + "'");
  return it->second;
}

TensorContainer parse_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw ParseError(Kind::Truncated, "file shorter than the 8-byte header length");
  const std::uint64_t n = get_le(bytes, 0, 8);
  if (n > bytes.size() - 8) {
    throw ParseError(Kind::Truncated, "header length " + std::to_string(n) + " exceeds file size " +
                                          std::to_string(bytes.size()));
  }
  const json header = parse_json_header(bytes.subspan(8, n));
  const auto data = bytes.subspan(8 + n);

  TensorContainer c;
  std::vector<Range> ranges;
  for (const auto& [name, value] : header.items()) {
    if (name == kMetadataKey) {
      if (!value.is_object()) throw ParseError(Kind::MalformedHeader, "__metadata__ must be an object");
      for (const auto& [k, v] : value.items()) {
        if (!v.is_string()) throw ParseError(Kind::MalformedHeader, "__metadata__ values must be strings");
        c.metadata[k] = v.get<std::string>();
      }
      continue;
    }
    Range r;
    c.tensors[name] = parse_entry(name, value, data, r);
    ranges.push_back(r);
  }
  check_ranges(std::move(ranges));
  return c;
}

std::vector<std::uint8_t> write_container(const TensorContainer& container) {
  json header = json::object();
  std::vector<std::uint8_t> data;
  for (const auto& [name, e] : container.tensors) {
    if (name == kMetadataKey) throw InputError("tensor name '__metadata__' is reserved");
    if (e.bytes.size() != e.numel() * dtype_size(e.dtype)) throw InputError("tensor '" + name + "': byte length mismatch");
    data.resize((data.size() + 7) / 8 * 8, 0);
    header[name] = entry_header(e, data.size());
    data.insert(data.end(), e.bytes.begin(), e.bytes.end());
  }
  if (!container.metadata.empty()) header[kMetadataKey] = container.metadata;
  const std::string text = padded_header(header);
  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + data.size());
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), data.begin(), data.end());
  return out;
}

std::vector<std::uint8_t> write_quantized(const QuantizedModelFile& model) {
  std::vector<std::uint8_t> payload;
  json layers = json::array();
  std::vector<std::pair<std::uint64_t, std::uint64_t>> cb_ranges;
  for (const auto& l : model.layers) {
    l.shape.validate();
    if (l.codebook.size() != l.shape.codebook_size * l.shape.dim) {
      throw InputError("layer '" + l.name + "': codebook length does not match k·d");
    }
    if (l.packed.payload.size() != packed_size_bytes(l.shape.count(), l.shape.codebook_size)) {
      throw InputError("layer '" + l.name + "': packed assignments do not match the storage formula");
    }
    std::vector<std::uint8_t> cb(l.codebook.size() * 4);
    std::memcpy(cb.data(), l.codebook.data(), cb.size());
    append_aligned(payload, cb, 4);
    cb_ranges.emplace_back(payload.size() - cb.size(), payload.size());
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    const std::uint64_t begin = payload.size();
    payload.insert(payload.end(), l.packed.payload.begin(), l.packed.payload.end());
    layers.push_back(json{{"name", l.name},
                          {"o", l.shape.out},
                          {"i", l.shape.in},
                          {"d", l.shape.dim},
                          {"k", l.shape.codebook_size},
                          {"codebook", {cb_ranges[i].first, cb_ranges[i].second}},
                          {"assignments", {begin, payload.size()}}});
  }
  json passthrough = json::object();
  for (const auto& [name, e] : model.passthrough) {
    append_aligned(payload, {}, 8);
    passthrough[name] = entry_header(e, payload.size());
    payload.insert(payload.end(), e.bytes.begin(), e.bytes.end());
  }
  json header{{"config", model.config}, {"layers", layers}, {"passthrough", passthrough},
              {"payload_bytes", payload.size()}};
  const std::string text = padded_header(header);
  std::vector<std::uint8_t> out;
  out.reserve(16 + text.size() + payload.size());
  put_u32(out, QuantizedModelFile::kMagic);
  put_u32(out, QuantizedModelFile::kVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

QuantizedModelFile read_quantized(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16) throw ParseError(Kind::Truncated, "quantized file shorter than its fixed header");
  if (get_le(bytes, 0, 4) != QuantizedModelFile::kMagic) throw ParseError(Kind::BadMagic, "not a quantized model file");
  const auto version = get_le(bytes, 4, 4);
  if (version != QuantizedModelFile::kVersion) {
    throw ParseError(Kind::UnsupportedVersion, "unsupported quantized model version " + std::to_string(version));
  }
  const std::uint64_t n = get_le(bytes, 8, 8);
  if (n > bytes.size() - 16) throw ParseError(Kind::Truncated, "header length exceeds file size");
  const json header = parse_json_header(bytes.subspan(16, n));
  const auto payload = bytes.subspan(16 + n);

  for (const char* key : {"config", "layers", "passthrough", "payload_bytes"}) {
    if (!header.contains(key)) throw ParseError(Kind::MalformedHeader, std::string("missing '") + key + "'");
  }
  if (!header["payload_bytes"].is_number_unsigned() ||
      header["payload_bytes"].get<std::uint64_t>() != payload.size()) {
    throw ParseError(Kind::PayloadLength, "payload is " + std::to_string(payload.size()) +
                                              " bytes, header declares " + header["payload_bytes"].dump());
  }

  QuantizedModelFile m;
  try {
    m.config = header["config"].get<std::map<std::string, std::string>>();
  } catch (const json::exception&) {
    throw ParseError(Kind::MalformedHeader, "config must map strings to strings");
  }
  if (!header["layers"].is_array()) throw ParseError(Kind::MalformedHeader, "layers must be an array");

  std::vector<Range> ranges;
  std::set<std::string> names;
  for (const auto& jl : header["layers"]) {
    QuantizedLayerRecord rec;
    try {
      rec.name = jl.at("name").get<std::string>();
      rec.shape = {jl.at("o").get<std::size_t>(), jl.at("i").get<std::size_t>(), jl.at("d").get<std::size_t>(),
                   jl.at("k").get<std::size_t>()};
    } catch (const json::exception& e) {
      throw ParseError(Kind::MalformedHeader, std::string("bad layer record: ") + e.what());
    }
    if (!names.insert(rec.name).second) throw ParseError(Kind::DuplicateName, "duplicate layer '" + rec.name + "'");
    try {
      rec.shape.validate();
    } catch (const ConfigError& e) {
      throw ParseError(Kind::MalformedHeader, e.what());
    }
    const auto [cb, ce] = parse_offsets(jl.at("codebook"), "layer '" + rec.name + "' codebook");
    const auto [ab, ae] = parse_offsets(jl.at("assignments"), "layer '" + rec.name + "' assignments");
    if (ce > payload.size() || ae > payload.size()) {
      throw ParseError(Kind::PayloadLength, "layer '" + rec.name + "': range exceeds payload");
    }
    if (ce - cb != rec.shape.codebook_size * rec.shape.dim * 4) {
      throw ParseError(Kind::PayloadLength, "layer '" + rec.name + "': codebook length is not k·d·4 bytes");
    }
    if (ae - ab != packed_size_bytes(rec.shape.count(), rec.shape.codebook_size)) {
      throw ParseError(Kind::PayloadLength, "layer '" + rec.name + "': assignment length does not match o·i/d·log2(k) bits");
    }
    if (cb % 4 != 0) throw ParseError(Kind::Misaligned, "layer '" + rec.name + "': misaligned codebook");
    rec.codebook.resize(rec.shape.codebook_size * rec.shape.dim);
    std::memcpy(rec.codebook.data(), payload.data() + cb, ce - cb);
    rec.packed.bits_per_index = rec.shape.bits_per_index();
    rec.packed.count = rec.shape.count();
    rec.packed.payload.assign(payload.begin() + static_cast<std::ptrdiff_t>(ab), payload.begin() + static_cast<std::ptrdiff_t>(ae));
    ranges.push_back({rec.name + ".codebook", cb, ce});
    ranges.push_back({rec.name + ".assignments", ab, ae});
    m.layers.push_back(std::move(rec));
  }
  if (!header["passthrough"].is_object()) throw ParseError(Kind::MalformedHeader, "passthrough must be an object");
  for (const auto& [name, value] : header["passthrough"].items()) {
    Range r;
    m.passthrough[name] = parse_entry(name, value, payload, r);
    ranges.push_back(r);
  }
  check_ranges(std::move(ranges));
  return m;
}

QuantizedLayerRecord make_layer_record(const std::string& name, const LayerShape& shape,
                                       const Codebook<float>& codebook, const Assignments& assignments) {
  shape.validate();
  if (codebook.size() != shape.codebook_size || codebook.dim() != shape.dim || assignments.size() != shape.count()) {
    throw DimensionError("layer '" + name + "': codebook/assignments do not match " + shape.str());
  }
  QuantizedLayerRecord r;
  r.name = name;
  r.shape = shape;
  r.codebook.assign(codebook.words.data(), codebook.words.data() + codebook.words.size());
  r.packed = pack(assignments, shape.codebook_size);
  return r;
}

Codebook<float> record_codebook(const QuantizedLayerRecord& record) {
  Codebook<float> cb;
  cb.words = Eigen::Map<const MatrixF>(record.codebook.data(), static_cast<Eigen::Index>(record.shape.codebook_size),
                                       static_cast<Eigen::Index>(record.shape.dim));
  return cb;
}

Assignments record_assignments(const QuantizedLayerRecord& record) {
  return unpack(record.packed, record.shape.count(), record.shape.codebook_size);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

}  // namespace ditvq
