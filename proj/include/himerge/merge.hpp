#pragma once

#include "himerge/checkpoint.hpp"
#include "himerge/delta.hpp"
#include "himerge/error.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

namespace himerge {

/// Per-model merge weights, aligned with the model (or delta) list.
struct merge_weights {
  std::vector<double> omega;

  void validate_positive() const {
    for (std::size_t i = 0; i < omega.size(); ++i) {
      if (!(omega[i] > 0.0) || !std::isfinite(omega[i])) {
        throw usage_error("merge weight #" + std::to_string(i) + " = " + std::to_string(omega[i]) +
                          " must be finite and > 0");
      }
    }
  }

  /// Weighted averaging additionally needs the weights to sum to one.
  void validate_convex() const {
    validate_positive();
    const double sum = std::accumulate(omega.begin(), omega.end(), 0.0);
    if (std::abs(sum - 1.0) > 1e-9) {
      throw usage_error("merge weights sum to " + std::to_string(sum) + ", expected 1");
    }
  }
};

/// Model soup: sum_m omega_m * theta_m. Output dtypes follow the first model.
inline checkpoint weighted_average_merge(std::span<const std::reference_wrapper<const checkpoint>> models,
                                         const merge_weights& w) {
  if (models.empty()) throw usage_error("weighted_average_merge needs at least one model");
  if (w.omega.size() != models.size()) {
    throw usage_error(std::to_string(w.omega.size()) + " weights for " + std::to_string(models.size()) +
                      " models");
  }
  w.validate_convex();
  for (std::size_t i = 1; i < models.size(); ++i) validate_compat(models[0].get(), models[i].get());

  const checkpoint& first = models[0].get();
  checkpoint out;
  out.set_metadata(first.metadata());
  std::vector<float> buf;
  for (const auto& [name, rec] : first.tensors()) {
    std::vector<const tensor_record*> recs;
    for (const auto& m : models) recs.push_back(&m.get().at(name));
    buf.resize(rec.numel());
    for (std::size_t i = 0; i < buf.size(); ++i) {
      double sum = 0.0;
      for (std::size_t m = 0; m < recs.size(); ++m) sum += w.omega[m] * static_cast<double>(recs[m]->value(i));
      buf[i] = static_cast<float>(sum);
    }
    out.insert(name, tensor_record::from_f32(rec.type, rec.shape, buf));
  }
  return out;
}

/// Task arithmetic: theta_F + sum_m omega_m * delta_m.
inline checkpoint delta_weighted_merge(const checkpoint& base, std::span<const delta_vector* const> deltas,
                                       const merge_weights& w) {
  if (w.omega.size() != deltas.size()) {
    throw usage_error(std::to_string(w.omega.size()) + " weights for " + std::to_string(deltas.size()) +
                      " deltas");
  }
  w.validate_positive();
  check_fingerprints(base, deltas);
  std::vector<weighted_delta> terms;
  for (std::size_t i = 0; i < deltas.size(); ++i) terms.push_back({deltas[i], w.omega[i]});
  return add_weighted_deltas(base, terms);
}

/// Final assembly theta_F + delta_A + delta_B with unit weights; the scaling
/// factors already carry any per-model weighting.
inline checkpoint assemble_final(const checkpoint& base, const delta_vector& delta_a,
                                 const delta_vector& delta_b) {
  const delta_vector* ds[] = {&delta_a, &delta_b};
  return delta_weighted_merge(base, ds, merge_weights{{1.0, 1.0}});
}

} // namespace himerge
