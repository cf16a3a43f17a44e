#pragma once

// Conflict elimination. Layers whose Gamma exceeds a threshold are visited in
// descending-Gamma order and handled by sign case:
//   severe  (gamma_A > 0, gamma_B > 0): zero the weaker model's layer delta
//   partial (gamma_A * gamma_B < 0):    re-prune and re-scale the model with
//                                       gamma < 0 inside that layer
//   mutual  (otherwise):                keep both

#include "himerge/checkpoint.hpp"
#include "himerge/contribution.hpp"
#include "himerge/delta.hpp"
#include "himerge/evaluation.hpp"
#include "himerge/layers.hpp"
#include "himerge/merge.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace himerge {

enum class conflict_case { severe, partial, mutual };

inline const char* case_name(conflict_case c) {
  switch (c) {
  case conflict_case::severe: return "SEVERE";
  case conflict_case::partial: return "PARTIAL";
  case conflict_case::mutual: return "MUTUAL";
  }
  return "?";
}

inline conflict_case classify_layer(double gamma_a, double gamma_b) {
  if (!std::isfinite(gamma_a) || !std::isfinite(gamma_b)) {
    throw data_error("cannot classify non-finite conflict (" + format_double(gamma_a) + ", " +
                     format_double(gamma_b) + ")");
  }
  if (gamma_a > 0 && gamma_b > 0) return conflict_case::severe;
  if ((gamma_a < 0 && gamma_b > 0) || (gamma_a > 0 && gamma_b < 0)) return conflict_case::partial;
  return conflict_case::mutual;
}

enum class action_kind { drop, reprune, keep };

inline const char* action_name(action_kind k) {
  switch (k) {
  case action_kind::drop: return "DROP";
  case action_kind::reprune: return "REPRUNE";
  case action_kind::keep: return "KEEP";
  }
  return "?";
}

struct resolution_action {
  layer_id layer;
  action_kind kind = action_kind::keep;
  std::optional<model_id> target; ///< dropped or re-pruned model
  double p_layer = 0.0;
  double s_layer = 0.0;
  double gamma_a = 0.0;
  double gamma_b = 0.0;
  double gamma = 0.0;
  unsigned pass = 1;
  std::string note; ///< tie-break or boundary warning, empty otherwise
};

struct resolution_log {
  std::vector<resolution_action> actions;
  unsigned iterations = 0;
  bool recompute = false;
  std::optional<conflict_profile> final_profile;
};

struct iteration_policy {
  double gamma_threshold = 0.0;
  bool recompute = false;
  unsigned max_passes = 1;
  unsigned max_halvings = 3;
  bool single_halving = false; ///< always use (p/2, s/2) instead of halving per revisit
  bool include_pseudo_layers = false;
};

/// Current layer-wise (p, s) for one model; `halvings` counts re-prunes so far.
struct layer_params {
  prune_scale_params model_wise;
  unsigned halvings = 0;

  prune_scale_params next(const iteration_policy& policy) const {
    const unsigned h = policy.single_halving ? 1 : std::min(halvings + 1, std::max(1u, policy.max_halvings));
    const double f = std::ldexp(1.0, -static_cast<int>(h));
    return {model_wise.p * f, model_wise.s * f};
  }
};

/// Per-(layer, model) re-prune state.
struct layer_param_table {
  prune_scale_params a;
  prune_scale_params b;
  std::map<std::pair<layer_id, model_id>, unsigned> halvings;

  layer_params get(layer_id l, model_id m) const {
    auto it = halvings.find({l, m});
    return {m == model_id::A ? a : b, it == halvings.end() ? 0u : it->second};
  }
  void bump(layer_id l, model_id m) { ++halvings[{l, m}]; }
};

/// Applies the case rule to one layer, mutating the deltas in place.
inline resolution_action resolve_layer(const layer_conflict& lc, conflict_case cc, delta_vector& delta_a,
                                       delta_vector& delta_b, const layer_partition& part,
                                       layer_param_table& params, const iteration_policy& policy = {}) {
  resolution_action act;
  act.layer = lc.layer;
  act.gamma_a = lc.gamma_a;
  act.gamma_b = lc.gamma_b;
  act.gamma = lc.gamma;
  const layer_id scope[] = {lc.layer};

  switch (cc) {
  case conflict_case::severe: {
    const double ca = lc.at(model_id::A, model_id::A).c;
    const double cb = lc.at(model_id::B, model_id::B).c;
    const model_id loser = ca >= cb ? model_id::B : model_id::A;
    if (ca == cb) act.note = "tie on own contribution, kept A";
    auto& d = loser == model_id::A ? delta_a : delta_b;
    for (const auto& [off, cnt] : layer_ranges(d, part, scope)) std::fill_n(d.values.begin() + off, cnt, 0.0f);
    act.kind = action_kind::drop;
    act.target = loser;
    break;
  }
  case conflict_case::partial: {
    const model_id aggressor = lc.gamma_a < 0 ? model_id::A : model_id::B;
    auto& d = aggressor == model_id::A ? delta_a : delta_b;
    const auto ps = params.get(lc.layer, aggressor).next(policy);
    const auto ranges = layer_ranges(d, part, scope);
    prune_topp_inplace(d.values, ranges, ps.p);
    scale_inplace(d.values, ranges, ps.s);
    params.bump(lc.layer, aggressor);
    act.kind = action_kind::reprune;
    act.target = aggressor;
    act.p_layer = ps.p;
    act.s_layer = ps.s;
    break;
  }
  case conflict_case::mutual:
    act.kind = action_kind::keep;
    if ((lc.gamma_a == 0 && lc.gamma_b > 0) || (lc.gamma_b == 0 && lc.gamma_a > 0)) {
      act.note = "zero conflict on one side, kept without re-pruning";
    }
    break;
  }
  return act;
}

/// Layers above threshold, by descending Gamma, ties in layer order.
inline std::vector<layer_conflict> conflicted_layers(const conflict_profile& prof, double threshold) {
  std::vector<layer_conflict> out;
  for (const auto& lc : prof.layers)
    if (lc.gamma > threshold) out.push_back(lc);
  std::stable_sort(out.begin(), out.end(), [](const auto& x, const auto& y) { return x.gamma > y.gamma; });
  return out;
}

/// Runs the resolution loop on ctx's processed deltas (updated in place,
/// along with ctx.merged). Actions are appended to `log` as they happen so a
/// failure part-way leaves an accurate partial log.
inline void iterate(analysis_context& ctx, const conflict_profile& initial, const iteration_policy& policy,
                    const prune_scale_params& params_a, const prune_scale_params& params_b,
                    resolution_log& log) {
  log.recompute = policy.recompute;
  const auto scope = ctx.partition.layers(policy.include_pseudo_layers);
  layer_param_table params{params_a, params_b, {}};
  conflict_profile prof = initial;

  const unsigned passes = std::max(1u, policy.max_passes);
  for (unsigned pass = 1; pass <= passes; ++pass) {
    if (pass > 1) {
      prof = compute_conflict_profile(ctx, scope);
      log.final_profile = prof;
    }
    auto queue = conflicted_layers(prof, policy.gamma_threshold);
    if (queue.empty()) break;
    ++log.iterations;

    bool changed = false;
    std::vector<layer_id> done;
    while (!queue.empty()) {
      const layer_conflict lc = queue.front();
      queue.erase(queue.begin());
      auto act = resolve_layer(lc, classify_layer(lc.gamma_a, lc.gamma_b), ctx.delta_a, ctx.delta_b,
                               ctx.partition, params, policy);
      act.pass = pass;
      const bool acted = act.kind != action_kind::keep;
      log.actions.push_back(std::move(act));
      done.push_back(lc.layer);
      if (!acted) continue;
      changed = true;
      ctx.refresh_merged();

      if (policy.recompute && !queue.empty()) {
        std::vector<layer_id> rest;
        for (const auto l : scope)
          if (std::find(done.begin(), done.end(), l) == done.end()) rest.push_back(l);
        const auto sub = compute_conflict_profile(ctx, rest);
        queue = conflicted_layers(sub, policy.gamma_threshold);
        log.final_profile = sub;
      }
    }
    if (!changed) break;
  }
}

// ----------------------------------------------------------------------------
// Log output
// ----------------------------------------------------------------------------

inline nlohmann::json action_to_json(const resolution_action& a) {
  nlohmann::json j{{"layer", a.layer.str()},     {"action", action_name(a.kind)},
                   {"case", case_name(classify_layer(a.gamma_a, a.gamma_b))},
                   {"gamma_A", a.gamma_a},       {"gamma_B", a.gamma_b},
                   {"Gamma", a.gamma},           {"pass", a.pass}};
  if (a.target) j["model"] = model_name(*a.target);
  if (a.kind == action_kind::reprune) {
    j["p_layer"] = a.p_layer;
    j["s_layer"] = a.s_layer;
  }
  if (!a.note.empty()) j["note"] = a.note;
  return j;
}

inline void write_log_jsonl(std::ostream& os, const resolution_log& log) {
  for (const auto& a : log.actions) os << action_to_json(a).dump() << '\n';
}

inline void write_log_summary(std::ostream& os, const resolution_log& log) {
  char line[160];
  std::snprintf(line, sizeof line, "%-6s %-8s %-5s %12s %12s %12s  %s\n", "layer", "action", "model", "gamma_A",
                "gamma_B", "Gamma", "note");
  os << line;
  for (const auto& a : log.actions) {
    std::snprintf(line, sizeof line, "%-6s %-8s %-5s %12.6g %12.6g %12.6g  ", a.layer.str().c_str(),
                  action_name(a.kind), a.target ? model_name(*a.target) : "-", a.gamma_a, a.gamma_b, a.gamma);
    os << line;
    if (a.kind == action_kind::reprune) os << "p=" << format_double(a.p_layer) << " s=" << format_double(a.s_layer) << ' ';
    os << a.note << '\n';
  }
  os << "passes: " << log.iterations << ", recompute: " << (log.recompute ? "on" : "off") << '\n';
}

// ----------------------------------------------------------------------------
// End-to-end pipeline
// ----------------------------------------------------------------------------

struct hi_merge_config {
  prune_scale_params params_a;
  prune_scale_params params_b;
  layer_rule rule;
  eval_task task_a;
  eval_task task_b;
  iteration_policy policy;
  std::optional<std::filesystem::path> out_dir;
};

struct hi_merge_result {
  checkpoint merged;
  resolution_log log;
  conflict_profile profile; ///< the initial profile the resolution acted on
  delta_vector delta_a;     ///< final resolved deltas
  delta_vector delta_b;
};

namespace detail {

template <typename F>
auto stage(const char* name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const error& e) {
    const std::string msg = std::string(name) + ": " + e.what();
    switch (e.kind()) {
    case error_kind::usage: throw usage_error(msg);
    case error_kind::data: throw data_error(msg);
    case error_kind::evaluator: throw eval_error(msg);
    }
    throw;
  } catch (const std::filesystem::filesystem_error& e) {
    throw data_error(std::string(name) + ": " + e.what());
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  const auto* p = reinterpret_cast<const std::byte*>(text.data());
  write_file_bytes(path, std::span(p, text.size()));
}

inline void persist_profile(const std::filesystem::path& dir, const std::string& stem, const conflict_profile& prof) {
  write_text(dir / (stem + ".json"), profile_to_json(prof).dump(2) + "\n");
  std::ostringstream csv;
  write_profile_csv(csv, prof);
  write_text(dir / (stem + ".csv"), csv.str());
}

inline void persist_log(const std::filesystem::path& dir, const resolution_log& log) {
  std::ostringstream jl, sum;
  write_log_jsonl(jl, log);
  write_log_summary(sum, log);
  write_text(dir / "resolution.jsonl", jl.str());
  write_text(dir / "resolution_summary.txt", sum.str());
  if (log.final_profile) persist_profile(dir, "final_profile", *log.final_profile);
}

} // namespace detail

inline hi_merge_result hi_merge(const checkpoint& base, const checkpoint& model_a, const checkpoint& model_b,
                                const hi_merge_config& cfg, evaluator& ev) {
  const auto& out = cfg.out_dir;
  if (out) detail::stage("output", [&] { std::filesystem::create_directories(*out); });

  detail::stage("compat", [&] {
    validate_compat(base, model_a);
    validate_compat(base, model_b);
    cfg.params_a.validate();
    cfg.params_b.validate();
  });
  auto da = detail::stage("delta A", [&] { return compute_delta(model_a, base, "A"); });
  auto db = detail::stage("delta B", [&] { return compute_delta(model_b, base, "B"); });
  da = detail::stage("model-wise A", [&] { return model_wise_process(std::move(da), cfg.params_a); });
  db = detail::stage("model-wise B", [&] { return model_wise_process(std::move(db), cfg.params_b); });

  auto ctx = detail::stage("pre-merge", [&] {
    return analysis_context::make(base, model_a, model_b, std::move(da), std::move(db),
                                  partition_layers(base, cfg.rule), cfg.task_a, cfg.task_b, ev);
  });
  if (out) {
    detail::stage("persist", [&] {
      save_checkpoint(delta_to_checkpoint(ctx.delta_a), *out / "delta_a.safetensors");
      save_checkpoint(delta_to_checkpoint(ctx.delta_b), *out / "delta_b.safetensors");
      save_checkpoint(ctx.merged, *out / "premerge.safetensors");
    });
  }

  const auto scope = ctx.partition.layers(cfg.policy.include_pseudo_layers);
  auto profile = detail::stage("contribution analysis", [&] { return compute_conflict_profile(ctx, scope); });
  if (out) detail::stage("persist", [&] { detail::persist_profile(*out, "profile", profile); });

  resolution_log log;
  try {
    detail::stage("resolution", [&] { iterate(ctx, profile, cfg.policy, cfg.params_a, cfg.params_b, log); });
  } catch (...) {
    if (out) detail::persist_log(*out, log);
    throw;
  }

  auto merged = detail::stage("assembly", [&] { return assemble_final(base, ctx.delta_a, ctx.delta_b); });
  if (out) {
    detail::stage("persist", [&] {
      detail::persist_log(*out, log);
      save_checkpoint(delta_to_checkpoint(ctx.delta_a), *out / "resolved_delta_a.safetensors");
      save_checkpoint(delta_to_checkpoint(ctx.delta_b), *out / "resolved_delta_b.safetensors");
      save_checkpoint(merged, *out / "merged.safetensors");
    });
  }
  return {std::move(merged), std::move(log), std::move(profile), std::move(ctx.delta_a), std::move(ctx.delta_b)};
}

// ----------------------------------------------------------------------------
// (p, s) sweep
// ----------------------------------------------------------------------------

struct sweep_cell {
  double p = 0.0;
  double s = 0.0;
  std::optional<double> score;
  std::string error;
};

/// 0.1, 0.2, ..., 1.0
inline std::vector<double> default_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 10; ++i) g.push_back(i / 10.0);
  return g;
}

/// Scores base + s * Top_p(model - base) for every grid cell. Evaluator
/// failures are recorded per cell and the sweep continues.
inline std::vector<sweep_cell> run_sweep(const checkpoint& base, const checkpoint& model, const eval_task& task,
                                         std::span<const double> grid_p, std::span<const double> grid_s,
                                         evaluator& ev) {
  const auto delta = compute_delta(model, base, "model");
  std::vector<sweep_cell> cells;
  for (double p : grid_p) {
    for (double s : grid_s) {
      prune_scale_params{p, s}.validate();
      cells.push_back({p, s, std::nullopt, {}});
    }
  }
  // materialize at most `parallel` candidates at a time
  const std::size_t batch = std::max(1u, ev.options().parallel);
  for (std::size_t from = 0; from < cells.size(); from += batch) {
    const std::size_t to = std::min(cells.size(), from + batch);
    std::vector<checkpoint> cands;
    for (std::size_t i = from; i < to; ++i)
      cands.push_back(apply_delta(base, model_wise_process(delta, {cells[i].p, cells[i].s})));
    std::vector<eval_request> reqs;
    for (const auto& c : cands) reqs.push_back({&c, &task});
    auto outcomes = ev.evaluate_settled(reqs);
    for (std::size_t i = from; i < to; ++i) {
      auto& o = outcomes[i - from];
      if (o.result) cells[i].score = o.result->value;
      else cells[i].error = o.error;
    }
  }
  return cells;
}

inline void write_sweep_csv(std::ostream& os, std::span<const sweep_cell> cells) {
  os << "p,s,score,error\n";
  for (const auto& c : cells) {
    os << format_double(c.p) << ',' << format_double(c.s) << ',' << (c.score ? format_double(*c.score) : "") << ',';
    // errors are free text; quote and double inner quotes
    if (!c.error.empty()) {
      os << '"';
      for (char ch : c.error) os << (ch == '"' ? "\"\"" : std::string(1, ch == '\n' ? ' ' : ch));
      os << '"';
    }
    os << '\n';
  }
}

} // namespace himerge
