#pragma once

// Run configuration shared by the command-line front end: a flat JSON
// document whose keys mirror the long flags (dashes become underscores).

#include "himerge/error.hpp"
#include "himerge/evaluation.hpp"
#include "himerge/hash.hpp"
#include "himerge/resolver.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace himerge {

/// Evaluator spec text: either a shell command template, or a JSON object
///   {"type": "command", "command": "...", "timeout": seconds}
///   {"type": "synthetic", "seed", "dim", "n_eval", "targets": [...], "support": [b, e]}
///   {"type": "constant", "value": x}
/// An optional "id" fixes the cache task id; otherwise it is derived from the
/// spec so that different evaluators never share cache entries.
inline eval_task parse_eval_spec(const nlohmann::json& spec, double default_timeout_s = 600.0) {
  nlohmann::json j = spec;
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    const auto first = s.find_first_not_of(" \t\n");
    if (first != std::string::npos && s[first] == '{') {
      j = nlohmann::json::parse(s, nullptr, false);
      if (j.is_discarded()) throw usage_error("evaluator spec is not valid JSON: " + s);
    } else {
      j = nlohmann::json{{"type", "command"}, {"command", s}};
    }
  }
  if (!j.is_object() || !j.contains("type") || !j["type"].is_string()) {
    throw usage_error("evaluator spec needs a \"type\": " + j.dump());
  }

  eval_task task;
  const auto type = j["type"].get<std::string>();
  nlohmann::json identity;
  try {
    if (type == "command") {
      external_command cmd;
      cmd.command_template = j.at("command").get<std::string>();
      const double secs = j.value("timeout", default_timeout_s);
      if (!(secs > 0)) throw usage_error("evaluator timeout must be positive");
      cmd.timeout = std::chrono::milliseconds(static_cast<long long>(secs * 1000.0));
      if (cmd.command_template.find("{checkpoint}") == std::string::npos) {
        throw usage_error("evaluator command '" + cmd.command_template + "' has no {checkpoint} placeholder");
      }
      identity = {{"type", type}, {"command", cmd.command_template}};
      task.evaluator = cmd;
    } else if (type == "synthetic") {
      synthetic_linear_task t;
      t.seed = j.at("seed").get<std::uint64_t>();
      t.dim = j.at("dim").get<std::size_t>();
      t.n_eval = j.value("n_eval", std::size_t{1000});
      if (j.at("targets").is_string()) t.targets = {j["targets"].get<std::string>()};
      else t.targets = j["targets"].get<std::vector<std::string>>();
      if (j.contains("support")) {
        const auto sup = j["support"].get<std::vector<std::size_t>>();
        if (sup.size() != 2) throw usage_error("synthetic support must be [begin, end]");
        t.support_begin = sup[0];
        t.support_end = sup[1];
      }
      validate_synthetic_task(t);
      identity = {{"type", type}, {"seed", t.seed}, {"dim", t.dim}, {"n_eval", t.n_eval},
                  {"targets", t.targets}, {"support", {t.support_begin, t.support_stop()}}};
      task.evaluator = t;
    } else if (type == "constant") {
      constant_task c{j.at("value").get<double>()};
      if (!std::isfinite(c.value)) throw usage_error("constant evaluator value must be finite");
      identity = {{"type", type}, {"value", c.value}};
      task.evaluator = c;
    } else {
      throw usage_error("unknown evaluator type '" + type + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw usage_error("bad evaluator spec " + j.dump() + ": " + e.what());
  }
  task.higher_is_better = j.value("higher_is_better", true);
  if (!task.higher_is_better) throw usage_error("only higher-is-better scores are supported");
  if (j.contains("id")) {
    task.task_id = j["id"].get<std::string>();
  } else {
    const auto text = identity.dump();
    task.task_id = type + "-" + sha256_hex(std::as_bytes(std::span(text.data(), text.size()))).substr(0, 16);
  }
  return task;
}

struct run_config {
  std::optional<std::filesystem::path> base, model_a, model_b, out;
  prune_scale_params params_a, params_b;
  std::optional<double> omega_a, omega_b;
  std::string layer_rule{layer_rule::default_pattern};
  std::optional<nlohmann::json> eval_a, eval_b;
  iteration_policy policy;
  bool keep_candidates = false;
  unsigned parallel = 1;
  double timeout = 600.0; ///< seconds per evaluator call
  std::vector<double> grid_p = default_grid();
  std::vector<double> grid_s = default_grid();
};

namespace detail {

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j[key].get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw usage_error(std::string("config key '") + key + "': " + e.what());
  }
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, std::optional<T>& dst) {
  if (!j.contains(key)) return;
  T v{};
  read_key(j, key, v);
  dst = v;
}

} // namespace detail

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "base", "model_a", "model_b", "model", "out", "p_a", "s_a", "p_b", "s_b", "omega_a", "omega_b",
      "layer_rule", "eval_a", "eval_b", "eval", "recompute", "gamma_threshold", "max_halvings", "max_passes",
      "single_halving", "include_pseudo_layers", "keep_candidates", "parallel", "timeout", "grid_p", "grid_s"};
  return keys;
}

/// Reads a config document; relative paths resolve against its directory.
inline run_config config_from_json(const nlohmann::json& j, const std::filesystem::path& dir = {}) {
  if (!j.is_object()) throw usage_error("config must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    if (std::find(config_keys().begin(), config_keys().end(), k) == config_keys().end()) {
      throw usage_error("unknown config key '" + k + "'");
    }
  }
  run_config c;
  auto path_key = [&](const char* key, std::optional<std::filesystem::path>& dst) {
    std::optional<std::string> s;
    detail::read_key(j, key, s);
    if (s) dst = std::filesystem::path(*s).is_absolute() ? std::filesystem::path(*s) : dir / *s;
  };
  path_key("base", c.base);
  path_key("model_a", c.model_a);
  path_key("model", c.model_a);
  path_key("model_b", c.model_b);
  path_key("out", c.out);
  detail::read_key(j, "p_a", c.params_a.p);
  detail::read_key(j, "s_a", c.params_a.s);
  detail::read_key(j, "p_b", c.params_b.p);
  detail::read_key(j, "s_b", c.params_b.s);
  detail::read_key(j, "omega_a", c.omega_a);
  detail::read_key(j, "omega_b", c.omega_b);
  detail::read_key(j, "layer_rule", c.layer_rule);
  if (j.contains("eval_a")) c.eval_a = j["eval_a"];
  if (j.contains("eval")) c.eval_a = j["eval"];
  if (j.contains("eval_b")) c.eval_b = j["eval_b"];
  detail::read_key(j, "recompute", c.policy.recompute);
  detail::read_key(j, "gamma_threshold", c.policy.gamma_threshold);
  detail::read_key(j, "max_halvings", c.policy.max_halvings);
  detail::read_key(j, "max_passes", c.policy.max_passes);
  detail::read_key(j, "single_halving", c.policy.single_halving);
  detail::read_key(j, "include_pseudo_layers", c.policy.include_pseudo_layers);
  detail::read_key(j, "keep_candidates", c.keep_candidates);
  detail::read_key(j, "parallel", c.parallel);
  detail::read_key(j, "timeout", c.timeout);
  detail::read_key(j, "grid_p", c.grid_p);
  detail::read_key(j, "grid_s", c.grid_s);
  return c;
}

inline run_config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw usage_error("cannot open config '" + path.string() + "'");
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw usage_error("config '" + path.string() + "' is not valid JSON");
  return config_from_json(j, path.parent_path());
}

} // namespace himerge
