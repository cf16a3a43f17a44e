#pragma once

#include "himerge/checkpoint.hpp"
#include "himerge/error.hpp"

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace himerge {

/// A transformer block index, or one of the two pseudo-layers holding tensors
/// that sit before (embeddings) or after (final norm, output head) the blocks.
struct layer_id {
  enum class kind : std::uint8_t { pre, block, post };

  kind k = kind::pre;
  std::uint32_t index = 0;

  static constexpr layer_id pre() noexcept { return {kind::pre, 0}; }
  static constexpr layer_id post() noexcept { return {kind::post, 0}; }
  static constexpr layer_id block(std::uint32_t i) noexcept { return {kind::block, i}; }

  constexpr bool is_block() const noexcept { return k == kind::block; }

  auto operator<=>(const layer_id&) const = default;

  std::string str() const {
    switch (k) {
    case kind::pre: return "PRE";
    case kind::post: return "POST";
    case kind::block: return std::to_string(index);
    }
    return "?";
  }

  static std::optional<layer_id> parse(std::string_view s) {
    if (s == "PRE") return pre();
    if (s == "POST") return post();
    if (s.empty()) return std::nullopt;
    std::uint32_t v = 0;
    for (char c : s) {
      if (c < '0' || c > '9') return std::nullopt;
      v = v * 10 + static_cast<std::uint32_t>(c - '0');
    }
    return block(v);
  }
};

/// Substring template with a single `{}` integer capture. The default rule
/// matches names like `model.layers.7.mlp.up_proj.weight`.
class layer_rule {
public:
  static constexpr std::string_view default_pattern = ".layers.{}.";

  layer_rule() : layer_rule(default_pattern) {}

  explicit layer_rule(std::string_view pattern) : pattern_(pattern) {
    const auto pos = pattern.find("{}");
    if (pos == std::string_view::npos || pattern.find("{}", pos + 2) != std::string_view::npos) {
      throw usage_error("layer rule '" + std::string(pattern) +
                        "' must contain exactly one {} capture");
    }
    prefix_ = pattern.substr(0, pos);
    suffix_ = pattern.substr(pos + 2);
  }

  const std::string& pattern() const noexcept { return pattern_; }

  /// First captured layer index in `name`, if any occurrence matches.
  std::optional<std::uint32_t> match(std::string_view name) const {
    std::size_t from = 0;
    while (from <= name.size()) {
      const auto at = name.find(prefix_, from);
      if (at == std::string_view::npos) return std::nullopt;
      std::size_t p = at + prefix_.size();
      std::uint64_t value = 0;
      std::size_t digits = 0;
      while (p < name.size() && name[p] >= '0' && name[p] <= '9' && digits < 9) {
        value = value * 10 + static_cast<std::uint64_t>(name[p] - '0');
        ++p;
        ++digits;
      }
      if (digits > 0 && name.substr(p, suffix_.size()) == suffix_) {
        return static_cast<std::uint32_t>(value);
      }
      from = at + 1;
    }
    return std::nullopt;
  }

private:
  std::string pattern_;
  std::string prefix_;
  std::string suffix_;
};

struct layer_partition {
  layer_rule rule;
  std::map<std::string, layer_id, std::less<>> assignment;
  std::uint32_t block_count = 0; ///< L: one past the largest captured index.

  layer_id of(std::string_view name) const {
    auto it = assignment.find(name);
    if (it == assignment.end()) throw data_error("tensor '" + std::string(name) + "' has no layer");
    return it->second;
  }

  std::vector<std::string> names_in(layer_id l) const {
    std::vector<std::string> out;
    for (const auto& [name, id] : assignment)
      if (id == l) out.push_back(name);
    return out;
  }

  /// Block layers 0..L-1 (including empty ones), optionally bracketed by the
  /// PRE/POST pseudo-layers when they hold tensors.
  std::vector<layer_id> layers(bool include_pseudo) const {
    std::vector<layer_id> out;
    bool has_pre = false, has_post = false;
    for (const auto& [_, id] : assignment) {
      has_pre |= id == layer_id::pre();
      has_post |= id == layer_id::post();
    }
    if (include_pseudo && has_pre) out.push_back(layer_id::pre());
    for (std::uint32_t i = 0; i < block_count; ++i) out.push_back(layer_id::block(i));
    if (include_pseudo && has_post) out.push_back(layer_id::post());
    return out;
  }
};

/// Assigns every tensor a layer. Names the rule does not match become PRE when
/// they sort before the first matching name, POST otherwise.
inline layer_partition partition_layers(const checkpoint& cp, const layer_rule& rule = {}) {
  layer_partition part{rule, {}, 0};
  bool seen_block = false;
  for (const auto& [name, _] : cp.tensors()) {
    if (auto idx = rule.match(name)) {
      seen_block = true;
      part.assignment.emplace(name, layer_id::block(*idx));
      part.block_count = std::max(part.block_count, *idx + 1);
    } else {
      part.assignment.emplace(name, seen_block ? layer_id::post() : layer_id::pre());
    }
  }
  return part;
}

} // namespace himerge
