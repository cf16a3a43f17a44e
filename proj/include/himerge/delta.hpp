#pragma once

#include "himerge/checkpoint.hpp"
#include "himerge/error.hpp"
#include "himerge/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace himerge {

/// Where one tensor's elements live inside a delta_vector's flat buffer.
struct delta_slot {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::size_t offset = 0;
  std::size_t count = 0;

  bool operator==(const delta_slot&) const = default;
};

/// Per-element parameter differences against a base checkpoint, stored as one
/// f32 buffer in canonical (lexicographic tensor name) order. An element's
/// position in `values` is its global flattened index.
struct delta_vector {
  std::string base_fingerprint;
  std::string provenance;
  std::vector<delta_slot> slots;
  std::vector<float> values;

  std::size_t size() const noexcept { return values.size(); }

  const delta_slot& slot(std::string_view name) const {
    auto it = std::lower_bound(slots.begin(), slots.end(), name,
                               [](const delta_slot& s, std::string_view n) { return s.name < n; });
    if (it == slots.end() || it->name != name) {
      throw data_error("delta has no tensor named '" + std::string(name) + "'");
    }
    return *it;
  }

  std::span<const float> tensor(std::string_view name) const {
    const auto& s = slot(name);
    return std::span<const float>(values).subspan(s.offset, s.count);
  }

  std::span<float> tensor(std::string_view name) {
    const auto& s = slot(name);
    return std::span<float>(values).subspan(s.offset, s.count);
  }

  bool operator==(const delta_vector&) const = default;
};

/// Model-wise pruning threshold p (fraction of elements kept) and scaling
/// factor s, both in [0, 1].
struct prune_scale_params {
  double p = 1.0;
  double s = 1.0;

  void validate() const {
    if (!(p >= 0.0 && p <= 1.0)) throw usage_error("pruning threshold p=" + std::to_string(p) + " outside [0, 1]");
    if (!(s >= 0.0 && s <= 1.0)) throw usage_error("scaling factor s=" + std::to_string(s) + " outside [0, 1]");
  }
};

/// ceil(p * n), with products that land within rounding noise of an integer
/// snapped to it (0.3 * 10 is 3.0000000000000004 in binary floating point).
inline std::size_t keep_count(double p, std::size_t n) {
  if (!(p >= 0.0 && p <= 1.0)) throw usage_error("pruning threshold p=" + std::to_string(p) + " outside [0, 1]");
  const double x = p * static_cast<double>(n);
  const double r = std::nearbyint(x);
  const double k = std::abs(x - r) <= 1e-9 * std::max(1.0, x) ? r : std::ceil(x);
  return std::min(n, static_cast<std::size_t>(k));
}

// ----------------------------------------------------------------------------
// Construction
// ----------------------------------------------------------------------------

/// Zero delta shaped like `cp`.
inline delta_vector zero_delta_like(const checkpoint& cp, std::string base_fp = {},
                                    std::string provenance = {}) {
  delta_vector d{std::move(base_fp), std::move(provenance), {}, {}};
  std::size_t offset = 0;
  for (const auto& [name, t] : cp.tensors()) {
    d.slots.push_back({name, t.shape, offset, t.numel()});
    offset += t.numel();
  }
  d.values.assign(offset, 0.0f);
  return d;
}

/// model - base, elementwise in f32.
inline delta_vector compute_delta(const checkpoint& model, const checkpoint& base,
                                  std::string provenance = {}) {
  validate_compat(model, base);
  auto d = zero_delta_like(base, fingerprint(base), std::move(provenance));
  for (const auto& s : d.slots) {
    const auto& tm = model.at(s.name);
    const auto& tb = base.at(s.name);
    for (std::size_t i = 0; i < s.count; ++i) {
      const float v = tm.value(i) - tb.value(i);
      if (!std::isfinite(v)) {
        throw data_error("non-finite delta in tensor '" + s.name + "' at element " + std::to_string(i));
      }
      d.values[s.offset + i] = v;
    }
  }
  return d;
}

inline void check_delta_layout(const checkpoint& cp, const delta_vector& d) {
  if (d.slots.size() != cp.size()) {
    throw data_error("delta '" + d.provenance + "' has " + std::to_string(d.slots.size()) +
                     " tensors, checkpoint has " + std::to_string(cp.size()));
  }
  auto it = cp.tensors().begin();
  for (const auto& s : d.slots) {
    if (s.name != it->first || s.shape != it->second.shape) {
      throw data_error("delta '" + d.provenance + "' does not match checkpoint layout at tensor '" +
                       s.name + "'");
    }
    ++it;
  }
}

// ----------------------------------------------------------------------------
// Pruning and scaling
// ----------------------------------------------------------------------------

/// Half-open index ranges [offset, offset + count) into a delta's buffer.
using index_ranges = std::vector<std::pair<std::size_t, std::size_t>>;

inline index_ranges global_ranges(const delta_vector& d) {
  return {{0, d.size()}};
}

/// Ranges covering every tensor assigned to one of `layers`, ascending.
inline index_ranges layer_ranges(const delta_vector& d, const layer_partition& part,
                                 std::span<const layer_id> layers) {
  index_ranges out;
  for (const auto& s : d.slots) {
    const auto l = part.of(s.name);
    if (std::find(layers.begin(), layers.end(), l) != layers.end() && s.count > 0) {
      out.emplace_back(s.offset, s.count);
    }
  }
  return out;
}

/// In-place Top-p over the elements inside `ranges`: keeps exactly
/// keep_count(p, N) elements of largest magnitude, ties broken by ascending
/// global index, zeroes the rest. Elements outside the ranges are untouched.
inline void prune_topp_inplace(std::span<float> values, const index_ranges& ranges, double p) {
  std::size_t n = 0;
  for (const auto& [off, cnt] : ranges) n += cnt;
  const std::size_t k = keep_count(p, n);
  if (k == n) return;
  if (k == 0) {
    for (const auto& [off, cnt] : ranges) std::fill_n(values.begin() + off, cnt, 0.0f);
    return;
  }

  std::vector<float> mags;
  mags.reserve(n);
  for (const auto& [off, cnt] : ranges) {
    for (std::size_t i = off; i < off + cnt; ++i) {
      if (!std::isfinite(values[i])) {
        throw data_error("non-finite delta value at flat index " + std::to_string(i));
      }
      mags.push_back(std::abs(values[i]));
    }
  }
  // k-th largest magnitude is the admission threshold
  std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(k - 1), mags.end(),
                   std::greater<float>{});
  const float threshold = mags[k - 1];

  std::size_t above = 0;
  for (const auto& [off, cnt] : ranges)
    for (std::size_t i = off; i < off + cnt; ++i) above += std::abs(values[i]) > threshold;

  std::size_t ties_left = k - above;
  for (const auto& [off, cnt] : ranges) {
    for (std::size_t i = off; i < off + cnt; ++i) {
      const float m = std::abs(values[i]);
      if (m > threshold) continue;
      if (m == threshold && ties_left > 0) {
        --ties_left;
        continue;
      }
      values[i] = 0.0f;
    }
  }
}

/// Top-p over the whole delta (N = all parameters).
inline delta_vector prune_topp(delta_vector d, double p) {
  prune_topp_inplace(d.values, global_ranges(d), p);
  return d;
}

/// Top-p restricted to the tensors of `layers`; N is that scope's size.
inline delta_vector prune_topp(delta_vector d, double p, const layer_partition& part,
                               std::span<const layer_id> layers) {
  prune_topp_inplace(d.values, layer_ranges(d, part, layers), p);
  return d;
}

inline void scale_inplace(std::span<float> values, const index_ranges& ranges, double s) {
  if (!(s >= 0.0 && s <= 1.0)) throw usage_error("scaling factor s=" + std::to_string(s) + " outside [0, 1]");
  const auto f = static_cast<float>(s);
  for (const auto& [off, cnt] : ranges)
    for (std::size_t i = off; i < off + cnt; ++i) values[i] *= f;
}

inline delta_vector scale(delta_vector d, double s) {
  scale_inplace(d.values, global_ranges(d), s);
  return d;
}

/// s * Top_p(delta) over the global scope; prune first, then scale.
inline delta_vector model_wise_process(delta_vector d, const prune_scale_params& params) {
  params.validate();
  prune_topp_inplace(d.values, global_ranges(d), params.p);
  scale_inplace(d.values, global_ranges(d), params.s);
  return d;
}

// ----------------------------------------------------------------------------
// Application
// ----------------------------------------------------------------------------

/// One weighted delta term of a linear combination.
struct weighted_delta {
  const delta_vector* delta;
  double weight;
};

/// Returns `cp` with every tensor accepted by `select` replaced by
/// cp + sum(weight * delta). Each element is accumulated in double and rounded
/// once to f32, then narrowed to the tensor's dtype.
template <typename Select>
checkpoint add_weighted_deltas(const checkpoint& cp, std::span<const weighted_delta> terms,
                               Select&& select) {
  for (const auto& t : terms) check_delta_layout(cp, *t.delta);
  checkpoint out;
  out.set_metadata(cp.metadata());
  std::size_t idx = 0;
  std::vector<float> buf;
  for (const auto& [name, rec] : cp.tensors()) {
    if (terms.empty() || !select(name)) {
      out.insert(name, rec);
      ++idx;
      continue;
    }
    buf.resize(rec.numel());
    for (std::size_t i = 0; i < buf.size(); ++i) {
      double sum = 0.0;
      for (const auto& t : terms) {
        const auto& s = t.delta->slots[idx];
        sum += t.weight * static_cast<double>(t.delta->values[s.offset + i]);
      }
      // a zero sum leaves the element bit-identical (keeps -0.0)
      buf[i] = sum == 0.0 ? rec.value(i) : static_cast<float>(static_cast<double>(rec.value(i)) + sum);
    }
    out.insert(name, tensor_record::from_f32(rec.type, rec.shape, buf));
    ++idx;
  }
  return out;
}

inline checkpoint add_weighted_deltas(const checkpoint& cp, std::span<const weighted_delta> terms) {
  return add_weighted_deltas(cp, terms, [](const std::string&) { return true; });
}

/// Throws unless every delta was computed against `base`.
inline void check_fingerprints(const checkpoint& base, std::span<const delta_vector* const> deltas) {
  if (deltas.empty()) return;
  const auto fp = fingerprint(base);
  for (const auto* d : deltas) {
    if (d->base_fingerprint != fp) {
      throw data_error("fingerprint mismatch: delta '" + d->provenance + "' was computed against base " +
                       d->base_fingerprint.substr(0, 16) + "…, not " + fp.substr(0, 16) + "…");
    }
  }
}

/// base + sum(deltas), unit weights.
inline checkpoint apply_delta(const checkpoint& base, std::span<const delta_vector* const> deltas) {
  check_fingerprints(base, deltas);
  std::vector<weighted_delta> terms;
  for (const auto* d : deltas) terms.push_back({d, 1.0});
  return add_weighted_deltas(base, terms);
}

inline checkpoint apply_delta(const checkpoint& base, const delta_vector& delta) {
  const delta_vector* ds[] = {&delta};
  return apply_delta(base, ds);
}

// ----------------------------------------------------------------------------
// Container round trip
// ----------------------------------------------------------------------------

inline constexpr std::string_view delta_kind_key = "himerge.kind";
inline constexpr std::string_view delta_base_key = "himerge.base_fingerprint";
inline constexpr std::string_view delta_provenance_key = "himerge.provenance";

/// F32 checkpoint holding the delta values, with fingerprint and provenance
/// recorded in the header metadata.
inline checkpoint delta_to_checkpoint(const delta_vector& d) {
  checkpoint cp;
  for (const auto& s : d.slots) {
    cp.insert(s.name, tensor_record::from_f32(dtype::f32, s.shape,
                                              std::span<const float>(d.values).subspan(s.offset, s.count)));
  }
  cp.set_metadata(metadata_map{{std::string(delta_kind_key), "delta"},
                               {std::string(delta_base_key), d.base_fingerprint},
                               {std::string(delta_provenance_key), d.provenance}});
  return cp;
}

inline delta_vector delta_from_checkpoint(const checkpoint& cp) {
  const auto& meta = cp.metadata();
  if (!meta || !meta->contains(std::string(delta_kind_key)) ||
      meta->at(std::string(delta_kind_key)) != "delta") {
    throw data_error("checkpoint is not a delta file (missing himerge.kind=delta metadata)");
  }
  auto get = [&](std::string_view key) {
    auto it = meta->find(std::string(key));
    return it == meta->end() ? std::string{} : it->second;
  };
  auto d = zero_delta_like(cp, get(delta_base_key), get(delta_provenance_key));
  for (const auto& s : d.slots) {
    const auto& rec = cp.at(s.name);
    for (std::size_t i = 0; i < s.count; ++i) d.values[s.offset + i] = rec.value(i);
  }
  return d;
}

} // namespace himerge
