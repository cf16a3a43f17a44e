#pragma once

// Layer-wise contribution analysis. For a capability m1 (task of model A or B)
// and a source model m2 in {A, B, G} (G = the model-wise pre-merge):
//   alpha = P_m1(theta_m2 - delta^l_m2) - P_m1(theta_m2)   (deletion impact)
//   beta  = P_m1(theta_F + delta^l_m2) - P_m1(theta_F)     (addition impact)
//   c     = alpha + beta
// and per layer gamma_A = c_{A,A} - c_{A,G}, gamma_B = c_{B,B} - c_{B,G},
// Gamma = gamma_A + gamma_B. For G the layer delta is delta^l_A + delta^l_B.

#include "himerge/checkpoint.hpp"
#include "himerge/delta.hpp"
#include "himerge/evaluation.hpp"
#include "himerge/layers.hpp"
#include "himerge/merge.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <charconv>
#include <ostream>
#include <string>
#include <vector>

namespace himerge {

enum class model_id : std::uint8_t { A, B, G };

inline const char* model_name(model_id m) {
  switch (m) {
  case model_id::A: return "A";
  case model_id::B: return "B";
  case model_id::G: return "G";
  }
  return "?";
}

struct layer_contribution {
  model_id capability; ///< m1: which task is scored
  model_id source;     ///< m2: whose layer delta is removed / added
  double alpha = 0.0;
  double beta = 0.0;
  double c = 0.0;
};

/// Column order used by every report: (A,A) (A,B) (A,G) (B,A) (B,B) (B,G).
inline constexpr std::array<std::pair<model_id, model_id>, 6> contribution_pairs{{
    {model_id::A, model_id::A},
    {model_id::A, model_id::B},
    {model_id::A, model_id::G},
    {model_id::B, model_id::A},
    {model_id::B, model_id::B},
    {model_id::B, model_id::G},
}};

inline std::size_t pair_index(model_id cap, model_id src) {
  return static_cast<std::size_t>(cap) * 3 + static_cast<std::size_t>(src);
}

struct layer_conflict {
  layer_id layer;
  std::array<layer_contribution, 6> entries{};
  double gamma_a = 0.0;
  double gamma_b = 0.0;
  double gamma = 0.0; ///< Gamma = gamma_a + gamma_b

  const layer_contribution& at(model_id cap, model_id src) const { return entries.at(pair_index(cap, src)); }
};

/// Whole-model scores the per-layer impacts are measured against.
struct profile_baselines {
  // [capability][source], source index 3 is theta_F
  std::array<std::array<double, 4>, 2> score{};

  double of(model_id cap, std::optional<model_id> src) const {
    return score.at(static_cast<std::size_t>(cap)).at(src ? static_cast<std::size_t>(*src) : 3);
  }
};

struct conflict_profile {
  std::vector<layer_conflict> layers;
  profile_baselines baselines;

  const layer_conflict* find(layer_id l) const {
    for (const auto& e : layers)
      if (e.layer == l) return &e;
    return nullptr;
  }
};

/// Everything the analysis reads. Non-owning for the input checkpoints and the
/// evaluator; owns the processed deltas and the pre-merge they induce.
struct analysis_context {
  const checkpoint* base = nullptr;
  const checkpoint* model_a = nullptr;
  const checkpoint* model_b = nullptr;
  delta_vector delta_a; ///< processed delta of A
  delta_vector delta_b;
  checkpoint merged; ///< theta_G = theta_F + delta_a + delta_b
  layer_partition partition;
  eval_task task_a;
  eval_task task_b;
  evaluator* eval = nullptr;

  static analysis_context make(const checkpoint& base, const checkpoint& a, const checkpoint& b,
                               delta_vector delta_a, delta_vector delta_b, layer_partition part,
                               eval_task task_a, eval_task task_b, evaluator& ev) {
    analysis_context ctx{&base, &a, &b, std::move(delta_a), std::move(delta_b), {}, std::move(part),
                         std::move(task_a), std::move(task_b), &ev};
    ctx.refresh_merged();
    return ctx;
  }

  /// Recomputes theta_G after the processed deltas changed.
  void refresh_merged() { merged = assemble_final(*base, delta_a, delta_b); }

  const eval_task& task(model_id cap) const { return cap == model_id::A ? task_a : task_b; }

  const checkpoint& reference(model_id m) const {
    switch (m) {
    case model_id::A: return *model_a;
    case model_id::B: return *model_b;
    case model_id::G: return merged;
    }
    throw usage_error("bad model id");
  }

  std::vector<weighted_delta> layer_terms(model_id m, double sign) const {
    if (m == model_id::A) return {{&delta_a, sign}};
    if (m == model_id::B) return {{&delta_b, sign}};
    return {{&delta_a, sign}, {&delta_b, sign}};
  }

  auto layer_selector(layer_id l) const {
    return [this, l](const std::string& name) { return partition.of(name) == l; };
  }

  /// theta_m2 with layer l's delta removed.
  checkpoint removal_candidate(model_id m2, layer_id l) const {
    return add_weighted_deltas(reference(m2), layer_terms(m2, -1.0), layer_selector(l));
  }

  /// theta_F with layer l's delta of m2 added.
  checkpoint addition_candidate(model_id m2, layer_id l) const {
    return add_weighted_deltas(*base, layer_terms(m2, 1.0), layer_selector(l));
  }
};

namespace detail {

inline double score(analysis_context& ctx, const checkpoint& cp, model_id cap) {
  return ctx.eval->evaluate(cp, ctx.task(cap)).value;
}

} // namespace detail

inline double deletion_impact(analysis_context& ctx, model_id cap, model_id src, layer_id l) {
  return detail::score(ctx, ctx.removal_candidate(src, l), cap) - detail::score(ctx, ctx.reference(src), cap);
}

inline double addition_impact(analysis_context& ctx, model_id cap, model_id src, layer_id l) {
  return detail::score(ctx, ctx.addition_candidate(src, l), cap) - detail::score(ctx, *ctx.base, cap);
}

inline double contribution(analysis_context& ctx, model_id cap, model_id src, layer_id l) {
  return deletion_impact(ctx, cap, src, l) + addition_impact(ctx, cap, src, l);
}

/// Scores the four reference checkpoints (theta_A, theta_B, theta_G, theta_F)
/// under both tasks.
inline profile_baselines compute_baselines(analysis_context& ctx) {
  const checkpoint* refs[] = {ctx.model_a, ctx.model_b, &ctx.merged, ctx.base};
  std::vector<eval_request> reqs;
  for (model_id cap : {model_id::A, model_id::B})
    for (const auto* r : refs) reqs.push_back({r, &ctx.task(cap)});
  const auto res = ctx.eval->evaluate_all(reqs);
  profile_baselines b;
  for (std::size_t i = 0; i < res.size(); ++i) b.score[i / 4][i % 4] = res[i].value;
  return b;
}

/// Full profile over `layers`. Every layer costs six candidate checkpoints
/// (removal and addition for A, B, G), each scored under both tasks.
inline conflict_profile compute_conflict_profile(analysis_context& ctx, std::span<const layer_id> layers) {
  conflict_profile prof;
  prof.baselines = compute_baselines(ctx);
  const auto& base_scores = prof.baselines;

  constexpr model_id sources[] = {model_id::A, model_id::B, model_id::G};
  for (const auto l : layers) {
    std::vector<checkpoint> cands;
    cands.reserve(6);
    for (auto src : sources) {
      cands.push_back(ctx.removal_candidate(src, l));
      cands.push_back(ctx.addition_candidate(src, l));
    }
    std::vector<eval_request> reqs;
    for (model_id cap : {model_id::A, model_id::B})
      for (const auto& c : cands) reqs.push_back({&c, &ctx.task(cap)});
    const auto res = ctx.eval->evaluate_all(reqs);

    layer_conflict lc;
    lc.layer = l;
    for (auto [cap, src] : contribution_pairs) {
      const std::size_t ci = static_cast<std::size_t>(cap) * 6 + static_cast<std::size_t>(src) * 2;
      layer_contribution e{cap, src};
      e.alpha = res[ci].value - base_scores.of(cap, src);
      e.beta = res[ci + 1].value - base_scores.of(cap, std::nullopt);
      e.c = e.alpha + e.beta;
      lc.entries[pair_index(cap, src)] = e;
    }
    lc.gamma_a = lc.at(model_id::A, model_id::A).c - lc.at(model_id::A, model_id::G).c;
    lc.gamma_b = lc.at(model_id::B, model_id::B).c - lc.at(model_id::B, model_id::G).c;
    lc.gamma = lc.gamma_a + lc.gamma_b;
    prof.layers.push_back(lc);
  }
  return prof;
}

// ----------------------------------------------------------------------------
// Reports
// ----------------------------------------------------------------------------

/// Shortest decimal text that round-trips to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline std::string pair_label(model_id cap, model_id src) {
  return std::string(model_name(cap)) + "_" + model_name(src);
}

inline nlohmann::json profile_to_json(const conflict_profile& prof) {
  nlohmann::json j;
  auto& base = j["baselines"];
  for (model_id cap : {model_id::A, model_id::B}) {
    for (model_id src : {model_id::A, model_id::B, model_id::G})
      base[std::string("P_") + model_name(cap) + "(" + model_name(src) + ")"] = prof.baselines.of(cap, src);
    base[std::string("P_") + model_name(cap) + "(F)"] = prof.baselines.of(cap, std::nullopt);
  }
  j["layers"] = nlohmann::json::array();
  for (const auto& lc : prof.layers) {
    nlohmann::json row;
    row["layer"] = lc.layer.str();
    for (const char* key : {"alpha", "beta", "c"}) row[key] = nlohmann::json::object();
    for (auto [cap, src] : contribution_pairs) {
      const auto& e = lc.at(cap, src);
      const auto label = pair_label(cap, src);
      row["alpha"][label] = e.alpha;
      row["beta"][label] = e.beta;
      row["c"][label] = e.c;
    }
    row["gamma_A"] = lc.gamma_a;
    row["gamma_B"] = lc.gamma_b;
    row["Gamma"] = lc.gamma;
    j["layers"].push_back(std::move(row));
  }
  return j;
}

inline void write_profile_csv(std::ostream& os, const conflict_profile& prof) {
  os << "layer";
  for (const char* key : {"alpha", "beta", "c"})
    for (auto [cap, src] : contribution_pairs) os << ',' << key << '_' << pair_label(cap, src);
  os << ",gamma_A,gamma_B,Gamma\n";
  for (const auto& lc : prof.layers) {
    os << lc.layer.str();
    for (auto field : {&layer_contribution::alpha, &layer_contribution::beta, &layer_contribution::c})
      for (auto [cap, src] : contribution_pairs) os << ',' << format_double(lc.at(cap, src).*field);
    os << ',' << format_double(lc.gamma_a) << ',' << format_double(lc.gamma_b) << ',' << format_double(lc.gamma)
       << '\n';
  }
}

} // namespace himerge
