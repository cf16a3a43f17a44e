#pragma once

// Checkpoint container: an 8-byte little-endian header length, a JSON header
// describing every tensor, then the packed tensor bytes. This is the
// safetensors layout; files written here are canonical (sorted names, sorted
// header keys, contiguous data in name order, header space-padded to a
// multiple of 8 bytes).

#include "himerge/dtype.hpp"
#include "himerge/error.hpp"
#include "himerge/hash.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace himerge {

struct tensor_record {
  dtype type = dtype::f32;
  std::vector<std::uint64_t> shape;
  std::vector<std::byte> data;

  std::size_t numel() const noexcept {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }

  float value(std::size_t i) const noexcept { return load_element(data.data(), type, i); }

  std::vector<float> to_f32() const {
    std::vector<float> out(numel());
    if (type == dtype::f32) {
      if (!out.empty()) std::memcpy(out.data(), data.data(), data.size());
      return out;
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = value(i);
    return out;
  }

  /// Overwrites the payload, narrowing from f32 to this record's dtype.
  void assign_f32(std::span<const float> values) {
    if (values.size() != numel()) {
      throw data_error("assign_f32: " + std::to_string(values.size()) +
                       " values for a tensor of " + std::to_string(numel()) + " elements");
    }
    data.resize(values.size() * element_size(type));
    if (type == dtype::f32) {
      if (!values.empty()) std::memcpy(data.data(), values.data(), data.size());
      return;
    }
    for (std::size_t i = 0; i < values.size(); ++i) store_element(data.data(), type, i, values[i]);
  }

  static tensor_record from_f32(dtype t, std::vector<std::uint64_t> shape,
                                std::span<const float> values) {
    tensor_record r{t, std::move(shape), {}};
    r.assign_f32(values);
    return r;
  }

  bool operator==(const tensor_record&) const = default;
};

using metadata_map = std::map<std::string, std::string>;

/// Named tensors in lexicographic name order. That order is the canonical
/// flattening order used for every global element index.
class checkpoint {
public:
  using tensor_map = std::map<std::string, tensor_record, std::less<>>;

  checkpoint() = default;

  void insert(std::string name, tensor_record rec) {
    if (rec.data.size() != rec.numel() * element_size(rec.type)) {
      throw data_error("tensor '" + name + "': " + std::to_string(rec.data.size()) +
                       " data bytes, expected " +
                       std::to_string(rec.numel() * element_size(rec.type)));
    }
    if (name == "__metadata__") throw data_error("tensor name '__metadata__' is reserved");
    auto [it, inserted] = tensors_.try_emplace(std::move(name), std::move(rec));
    if (!inserted) throw data_error("duplicate tensor name '" + it->first + "'");
  }

  bool contains(std::string_view name) const { return tensors_.find(name) != tensors_.end(); }

  const tensor_record& at(std::string_view name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw data_error("no tensor named '" + std::string(name) + "'");
    return it->second;
  }

  /// Replaces the values of an existing tensor, keeping its dtype and shape.
  void assign_f32(std::string_view name, std::span<const float> values) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw data_error("no tensor named '" + std::string(name) + "'");
    it->second.assign_f32(values);
  }

  const tensor_map& tensors() const noexcept { return tensors_; }
  std::size_t size() const noexcept { return tensors_.size(); }
  bool empty() const noexcept { return tensors_.empty(); }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.numel();
    return n;
  }

  const std::optional<metadata_map>& metadata() const noexcept { return metadata_; }
  void set_metadata(std::optional<metadata_map> m) { metadata_ = std::move(m); }

  bool operator==(const checkpoint&) const = default;

private:
  tensor_map tensors_;
  std::optional<metadata_map> metadata_;
};

// ----------------------------------------------------------------------------
// Serialization
// ----------------------------------------------------------------------------

inline std::vector<std::byte> serialize_checkpoint(const checkpoint& cp) {
  nlohmann::json header = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : cp.tensors()) {
    const std::uint64_t end = offset + t.data.size();
    header[name] = {{"dtype", std::string(dtype_name(t.type))},
                    {"shape", t.shape},
                    {"data_offsets", {offset, end}}};
    offset = end;
  }
  if (cp.metadata()) header["__metadata__"] = *cp.metadata();

  std::string text;
  try {
    text = header.dump();
  } catch (const nlohmann::json::exception& e) {
    throw data_error(std::string("cannot encode header: ") + e.what());
  }
  text.append((8 - text.size() % 8) % 8, ' ');

  std::vector<std::byte> out;
  out.reserve(8 + text.size() + offset);
  const std::uint64_t hlen = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::byte>((hlen >> (8 * i)) & 0xff));
  for (char c : text) out.push_back(static_cast<std::byte>(c));
  for (const auto& [_, t] : cp.tensors()) out.insert(out.end(), t.data.begin(), t.data.end());
  return out;
}

namespace detail {

inline std::uint64_t checked_u64(const nlohmann::json& v, const std::string& what) {
  // the parser stores every non-negative integer literal as unsigned
  if (!v.is_number_unsigned()) {
    throw data_error(what + ": expected a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

} // namespace detail

inline checkpoint deserialize_checkpoint(std::span<const std::byte> bytes) {
  if (bytes.size() < 8) {
    throw data_error("malformed header length: file has " + std::to_string(bytes.size()) +
                     " bytes, need at least 8");
  }
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  if (hlen > bytes.size() - 8) {
    throw data_error("malformed header length: header declares " + std::to_string(hlen) +
                     " bytes but only " + std::to_string(bytes.size() - 8) + " follow offset 8");
  }

  const auto* hbegin = reinterpret_cast<const char*>(bytes.data() + 8);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hbegin, hbegin + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw data_error(std::string("invalid header JSON: ") + e.what());
  }
  if (!header.is_object()) throw data_error("invalid header JSON: top level is not an object");

  const auto data = bytes.subspan(8 + hlen);
  checkpoint cp;

  struct region {
    std::uint64_t begin, end;
    std::string name;
  };
  std::vector<region> regions;

  for (auto it = header.begin(); it != header.end(); ++it) {
    const std::string& name = it.key();
    const auto& entry = it.value();
    if (name == "__metadata__") {
      if (!entry.is_object()) throw data_error("__metadata__ is not an object");
      metadata_map meta;
      for (auto m = entry.begin(); m != entry.end(); ++m) {
        if (!m.value().is_string()) {
          throw data_error("__metadata__ value for '" + m.key() + "' is not a string");
        }
        meta.emplace(m.key(), m.value().get<std::string>());
      }
      cp.set_metadata(std::move(meta));
      continue;
    }
    const std::string where = "tensor '" + name + "'";
    if (!entry.is_object()) throw data_error(where + ": entry is not an object");
    if (!entry.contains("dtype") || !entry["dtype"].is_string()) {
      throw data_error(where + ": missing dtype");
    }
    const auto tag = entry["dtype"].get<std::string>();
    const auto type = parse_dtype(tag);
    if (!type) throw data_error(where + ": unsupported dtype " + tag);

    if (!entry.contains("shape") || !entry["shape"].is_array()) {
      throw data_error(where + ": missing shape");
    }
    std::vector<std::uint64_t> shape;
    std::uint64_t numel = 1;
    for (const auto& d : entry["shape"]) {
      const auto extent = detail::checked_u64(d, where + " shape");
      if (extent != 0 && numel > std::numeric_limits<std::uint64_t>::max() / extent) {
        throw data_error(where + ": shape overflows");
      }
      numel *= extent;
      shape.push_back(extent);
    }

    if (!entry.contains("data_offsets") || !entry["data_offsets"].is_array() ||
        entry["data_offsets"].size() != 2) {
      throw data_error(where + ": data_offsets must be [begin, end]");
    }
    const auto begin = detail::checked_u64(entry["data_offsets"][0], where + " data_offsets");
    const auto end = detail::checked_u64(entry["data_offsets"][1], where + " data_offsets");
    if (begin > end) throw data_error(where + ": data_offsets begin > end");
    if (end > data.size()) {
      throw data_error(where + ": out-of-bounds data region [" + std::to_string(begin) + ", " +
                       std::to_string(end) + ") in a data section of " +
                       std::to_string(data.size()) + " bytes");
    }
    if (numel > std::numeric_limits<std::uint64_t>::max() / element_size(*type) ||
        end - begin != numel * element_size(*type)) {
      throw data_error(where + ": data region of " + std::to_string(end - begin) +
                       " bytes does not match shape and dtype");
    }

    tensor_record rec{*type, std::move(shape), {}};
    rec.data.assign(data.begin() + static_cast<std::ptrdiff_t>(begin),
                    data.begin() + static_cast<std::ptrdiff_t>(end));
    regions.push_back({begin, end, name});
    cp.insert(name, std::move(rec));
  }

  std::sort(regions.begin(), regions.end(),
            [](const region& a, const region& b) { return a.begin < b.begin; });
  for (std::size_t i = 1; i < regions.size(); ++i) {
    if (regions[i].begin < regions[i - 1].end) {
      throw data_error("overlapping data regions: tensor '" + regions[i - 1].name +
                       "' and tensor '" + regions[i].name + "' at byte offset " +
                       std::to_string(regions[i].begin));
    }
  }
  return cp;
}

/// SHA-256 of the canonical serialized bytes.
inline std::string fingerprint(const checkpoint& cp) {
  return sha256_hex(serialize_checkpoint(cp));
}

inline std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::byte> bytes(size);
  if (size && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw data_error("read failed: " + path.string());
  }
  return bytes;
}

/// Writes via a sibling temp file and rename, so readers never see a torn file.
inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw data_error("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw data_error("cannot rename " + tmp.string() + ": " + ec.message());
}

inline checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return deserialize_checkpoint(bytes);
  } catch (const data_error& e) {
    throw data_error(path.string() + ": " + e.what());
  }
}

inline void save_checkpoint(const checkpoint& cp, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_checkpoint(cp));
}

// ----------------------------------------------------------------------------
// Compatibility
// ----------------------------------------------------------------------------

/// Throws data_error unless both checkpoints have the same tensor names and,
/// per name, the same shape and dtype.
inline void validate_compat(const checkpoint& a, const checkpoint& b) {
  std::vector<std::string> only_a, only_b;
  for (const auto& [name, _] : a.tensors())
    if (!b.contains(name)) only_a.push_back(name);
  for (const auto& [name, _] : b.tensors())
    if (!a.contains(name)) only_b.push_back(name);

  if (!only_a.empty() || !only_b.empty()) {
    std::ostringstream msg;
    msg << "tensor name sets differ;";
    auto list = [&](const char* label, const std::vector<std::string>& names) {
      if (names.empty()) return;
      msg << ' ' << label << ':';
      for (const auto& n : names) msg << ' ' << n;
      msg << ';';
    };
    list("only in first", only_a);
    list("only in second", only_b);
    throw data_error(msg.str());
  }

  auto shape_str = [](const std::vector<std::uint64_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
  };
  for (const auto& [name, ta] : a.tensors()) {
    const auto& tb = b.at(name);
    if (ta.shape != tb.shape) {
      throw data_error("shape mismatch for '" + name + "': " + shape_str(ta.shape) + " vs " +
                       shape_str(tb.shape));
    }
    if (ta.type != tb.type) {
      throw data_error("dtype mismatch for '" + name + "': " + std::string(dtype_name(ta.type)) +
                       " vs " + std::string(dtype_name(tb.type)));
    }
  }
}

} // namespace himerge
