// himerge command-line tool: delta extraction, baseline merges, hierarchical
// conflict-aware merging, contribution reports and (p, s) sweeps.
//
// Exit codes: 0 ok, 1 usage/config, 2 data/compat, 3 evaluator.

#include "himerge/himerge.hpp"

#include <CLI11.hpp>

#include <sys/file.h>
#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using namespace himerge;

namespace {

struct flag_values {
  std::string config;
  std::optional<std::string> base, model_a, model_b, out;
  std::optional<double> p_a, s_a, p_b, s_b, omega_a, omega_b;
  std::optional<std::string> layer_rule, eval_a, eval_b;
  bool recompute = false;
  bool single_halving = false;
  bool include_pseudo = false;
  bool keep_candidates = false;
  std::optional<double> gamma_threshold, timeout;
  std::optional<unsigned> max_halvings, max_passes, parallel;
  std::vector<double> grid_p, grid_s;
  std::string method;
};

void add_paths(CLI::App* app, flag_values& f, bool two_models) {
  app->add_option("--config", f.config, "JSON config file; flags override its values");
  app->add_option("--base", f.base, "foundation checkpoint");
  if (two_models) {
    app->add_option("--model-a", f.model_a, "fine-tuned checkpoint A");
    app->add_option("--model-b", f.model_b, "fine-tuned checkpoint B");
  } else {
    app->add_option("--model,--model-a", f.model_a, "fine-tuned checkpoint");
  }
  app->add_option("--out", f.out, "output directory");
}

void add_prune_scale(CLI::App* app, flag_values& f) {
  app->add_option("--p-a", f.p_a, "model-wise pruning threshold for A");
  app->add_option("--s-a", f.s_a, "model-wise scaling factor for A");
  app->add_option("--p-b", f.p_b, "model-wise pruning threshold for B");
  app->add_option("--s-b", f.s_b, "model-wise scaling factor for B");
}

void add_eval(CLI::App* app, flag_values& f, bool two_tasks) {
  if (two_tasks) {
    app->add_option("--eval-a", f.eval_a, "evaluator for task A: command with {checkpoint}, or JSON spec");
    app->add_option("--eval-b", f.eval_b, "evaluator for task B");
  } else {
    app->add_option("--eval,--eval-a", f.eval_a, "evaluator: command with {checkpoint}, or JSON spec");
  }
  app->add_option("--timeout", f.timeout, "seconds per evaluator call");
  app->add_flag("--keep-candidates", f.keep_candidates, "keep candidate checkpoints written for evaluators");
  app->add_option("--parallel", f.parallel, "concurrent evaluator calls")->check(CLI::PositiveNumber);
}

void add_analysis(CLI::App* app, flag_values& f) {
  app->add_option("--layer-rule", f.layer_rule, "layer name template with one {} capture");
  app->add_flag("--include-pseudo-layers", f.include_pseudo, "also analyze PRE/POST tensors");
}

void add_policy(CLI::App* app, flag_values& f) {
  app->add_flag("--recompute", f.recompute, "recompute the profile after every resolution");
  app->add_option("--gamma-threshold", f.gamma_threshold, "resolve layers with Gamma above this");
  app->add_option("--max-halvings", f.max_halvings, "cap on repeated (p, s) halvings per layer");
  app->add_option("--max-passes", f.max_passes, "full resolution passes");
  app->add_flag("--single-halving", f.single_halving, "always re-prune at half the model-wise (p, s)");
}

run_config resolve_config(const flag_values& f) {
  run_config c = f.config.empty() ? run_config{} : load_config(f.config);
  auto set_path = [](std::optional<fs::path>& dst, const std::optional<std::string>& v) {
    if (v) dst = *v;
  };
  set_path(c.base, f.base);
  set_path(c.model_a, f.model_a);
  set_path(c.model_b, f.model_b);
  set_path(c.out, f.out);
  if (f.p_a) c.params_a.p = *f.p_a;
  if (f.s_a) c.params_a.s = *f.s_a;
  if (f.p_b) c.params_b.p = *f.p_b;
  if (f.s_b) c.params_b.s = *f.s_b;
  if (f.omega_a) c.omega_a = f.omega_a;
  if (f.omega_b) c.omega_b = f.omega_b;
  if (f.layer_rule) c.layer_rule = *f.layer_rule;
  if (f.eval_a) c.eval_a = *f.eval_a;
  if (f.eval_b) c.eval_b = *f.eval_b;
  if (f.recompute) c.policy.recompute = true;
  if (f.single_halving) c.policy.single_halving = true;
  if (f.include_pseudo) c.policy.include_pseudo_layers = true;
  if (f.keep_candidates) c.keep_candidates = true;
  if (f.gamma_threshold) c.policy.gamma_threshold = *f.gamma_threshold;
  if (f.max_halvings) c.policy.max_halvings = *f.max_halvings;
  if (f.max_passes) c.policy.max_passes = *f.max_passes;
  if (f.parallel) c.parallel = *f.parallel;
  if (f.timeout) c.timeout = *f.timeout;
  if (!f.grid_p.empty()) c.grid_p = f.grid_p;
  if (!f.grid_s.empty()) c.grid_s = f.grid_s;
  return c;
}

const fs::path& require_path(const std::optional<fs::path>& p, const char* flag) {
  if (!p) throw usage_error(std::string("missing ") + flag);
  return *p;
}

checkpoint load_input(const std::optional<fs::path>& p, const char* flag) {
  const auto& path = require_path(p, flag);
  if (!fs::exists(path)) throw usage_error(std::string(flag) + " '" + path.string() + "' does not exist");
  return load_checkpoint(path);
}

/// Inputs and the output directory must all be different locations.
void check_distinct(const run_config& c) {
  std::vector<std::pair<std::string, fs::path>> seen;
  auto add = [&](const char* what, const std::optional<fs::path>& p) {
    if (!p) return;
    const auto canon = fs::weakly_canonical(*p);
    for (const auto& [other, q] : seen) {
      if (q == canon) throw usage_error(std::string(what) + " and " + other + " are the same path: " + p->string());
    }
    seen.emplace_back(what, canon);
  };
  add("--base", c.base);
  add("--model-a", c.model_a);
  add("--model-b", c.model_b);
  add("--out", c.out);
}

/// Exclusive advisory lock on <out>/.himerge.lock, released when the process exits.
class out_dir_lock {
public:
  explicit out_dir_lock(const fs::path& dir) {
    fs::create_directories(dir);
    const auto path = dir / ".himerge.lock";
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw data_error("cannot create lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw usage_error("output directory " + dir.string() + " is in use by another himerge process");
    }
  }
  ~out_dir_lock() { ::close(fd_); }
  out_dir_lock(const out_dir_lock&) = delete;
  out_dir_lock& operator=(const out_dir_lock&) = delete;

private:
  int fd_ = -1;
};

std::unique_ptr<evaluator> make_evaluator(const run_config& c, const fs::path& out) {
  evaluator_options opts;
  fs::path cache_dir = out / "cache";
  if (const char* env = std::getenv("HIMERGE_CACHE_DIR"); env && *env) cache_dir = env;
  opts.cache_file = cache_dir / "evaluations.jsonl";
  opts.scratch_dir = out / "candidates";
  opts.keep_candidates = c.keep_candidates;
  opts.parallel = c.parallel;
  return std::make_unique<evaluator>(std::move(opts));
}

eval_task require_task(const std::optional<nlohmann::json>& spec, const char* flag, const run_config& c) {
  if (!spec) throw usage_error(std::string("missing ") + flag);
  return parse_eval_spec(*spec, c.timeout);
}

void write_text_file(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::as_bytes(std::span(text.data(), text.size())));
}

void report_calls(const evaluator& ev) {
  std::cout << "evaluator invocations: " << ev.invocations() << " (cache hits: " << ev.cache_hits() << ")\n";
}

// ----------------------------------------------------------------------------

int cmd_delta(const run_config& c) {
  const auto& out = require_path(c.out, "--out");
  const auto base = load_input(c.base, "--base");
  const auto a = load_input(c.model_a, "--model-a");
  std::optional<checkpoint> b;
  if (c.model_b) b = load_input(c.model_b, "--model-b");
  check_distinct(c);
  out_dir_lock lock(out);
  save_checkpoint(delta_to_checkpoint(compute_delta(a, base, c.model_a->filename().string())),
                  out / "delta_a.safetensors");
  std::cout << "wrote " << (out / "delta_a.safetensors").string() << '\n';
  if (b) {
    save_checkpoint(delta_to_checkpoint(compute_delta(*b, base, c.model_b->filename().string())),
                    out / "delta_b.safetensors");
    std::cout << "wrote " << (out / "delta_b.safetensors").string() << '\n';
  }
  return 0;
}

int cmd_merge(const run_config& c, const std::string& method) {
  const auto& out = require_path(c.out, "--out");
  const auto base = method == "soups" && !c.base ? std::optional<checkpoint>{}
                                                  : std::optional<checkpoint>{load_input(c.base, "--base")};
  const auto a = load_input(c.model_a, "--model-a");
  const auto b = load_input(c.model_b, "--model-b");
  check_distinct(c);

  if (method == "soups" || method == "arithmetic") {
    if (!c.omega_a || !c.omega_b) throw usage_error("--omega-a and --omega-b are required for " + method);
    const merge_weights w{{*c.omega_a, *c.omega_b}};
    checkpoint merged;
    if (method == "soups") {
      const std::reference_wrapper<const checkpoint> models[] = {a, b};
      merged = weighted_average_merge(models, w);
    } else {
      const auto da = compute_delta(a, *base, "A");
      const auto db = compute_delta(b, *base, "B");
      const delta_vector* ds[] = {&da, &db};
      merged = delta_weighted_merge(*base, ds, w);
    }
    out_dir_lock lock(out);
    save_checkpoint(merged, out / "merged.safetensors");
    std::cout << "wrote " << (out / "merged.safetensors").string() << '\n';
    return 0;
  }

  hi_merge_config cfg;
  cfg.params_a = c.params_a;
  cfg.params_b = c.params_b;
  cfg.rule = layer_rule(c.layer_rule);
  cfg.task_a = require_task(c.eval_a, "--eval-a", c);
  cfg.task_b = require_task(c.eval_b, "--eval-b", c);
  cfg.policy = c.policy;
  cfg.out_dir = out;
  out_dir_lock lock(out);
  auto ev = make_evaluator(c, out);
  const auto res = hi_merge(*base, a, b, cfg, *ev);
  std::ostringstream summary;
  write_log_summary(summary, res.log);
  std::cout << summary.str();
  report_calls(*ev);
  std::cout << "wrote " << (out / "merged.safetensors").string() << '\n';
  return 0;
}

int cmd_analyze(const run_config& c) {
  const auto& out = require_path(c.out, "--out");
  const auto base = load_input(c.base, "--base");
  const auto a = load_input(c.model_a, "--model-a");
  const auto b = load_input(c.model_b, "--model-b");
  check_distinct(c);
  const auto task_a = require_task(c.eval_a, "--eval-a", c);
  const auto task_b = require_task(c.eval_b, "--eval-b", c);
  const layer_rule rule(c.layer_rule);
  validate_compat(base, a);
  validate_compat(base, b);

  out_dir_lock lock(out);
  auto ev = make_evaluator(c, out);
  auto da = model_wise_process(compute_delta(a, base, "A"), c.params_a);
  auto db = model_wise_process(compute_delta(b, base, "B"), c.params_b);
  auto ctx = analysis_context::make(base, a, b, std::move(da), std::move(db), partition_layers(base, rule), task_a,
                                    task_b, *ev);
  const auto prof = compute_conflict_profile(ctx, ctx.partition.layers(c.policy.include_pseudo_layers));
  detail::persist_profile(out, "profile", prof);
  report_calls(*ev);
  std::cout << "wrote " << (out / "profile.csv").string() << '\n';
  return 0;
}

int cmd_sweep(const run_config& c) {
  const auto& out = require_path(c.out, "--out");
  const auto base = load_input(c.base, "--base");
  const auto model = load_input(c.model_a, "--model");
  check_distinct(c);
  const auto task = require_task(c.eval_a, "--eval", c);
  out_dir_lock lock(out);
  auto ev = make_evaluator(c, out);
  const auto cells = run_sweep(base, model, task, c.grid_p, c.grid_s, *ev);
  std::ostringstream csv;
  write_sweep_csv(csv, cells);
  write_text_file(out / "sweep.csv", csv.str());
  std::size_t failed = 0;
  for (const auto& cell : cells) failed += !cell.score;
  report_calls(*ev);
  std::cout << "wrote " << (out / "sweep.csv").string() << " (" << cells.size() << " cells, " << failed
            << " failed)\n";
  return 0;
}

/// Built-in synthetic scorer speaking the external evaluator protocol.
int cmd_score(const std::string& task_json, const std::string& path) {
  const auto spec = nlohmann::json::parse(task_json, nullptr, false);
  if (spec.is_discarded()) throw usage_error("--task is not valid JSON");
  const auto task = parse_eval_spec(spec);
  const auto* syn = std::get_if<synthetic_linear_task>(&task.evaluator);
  if (!syn) throw usage_error("score only runs synthetic tasks");
  if (!fs::exists(path)) throw usage_error("checkpoint '" + path + "' does not exist");
  const double v = synthetic_linear_eval(load_checkpoint(path), *syn);
  std::cout << nlohmann::json{{"score", v}}.dump() << '\n';
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-wise conflict-aware merging of two fine-tuned checkpoints"};
  app.require_subcommand(1);
  flag_values f;

  auto* delta = app.add_subcommand("delta", "write task deltas (model - base)");
  add_paths(delta, f, true);

  auto* merge = app.add_subcommand("merge", "merge two fine-tuned models");
  add_paths(merge, f, true);
  merge->add_option("--method", f.method, "soups | arithmetic | hi")
      ->required()
      ->check(CLI::IsMember({"soups", "arithmetic", "hi"}));
  merge->add_option("--omega-a", f.omega_a, "weight of A (soups, arithmetic)");
  merge->add_option("--omega-b", f.omega_b, "weight of B (soups, arithmetic)");
  add_prune_scale(merge, f);
  add_eval(merge, f, true);
  add_analysis(merge, f);
  add_policy(merge, f);

  auto* analyze = app.add_subcommand("analyze", "write the layer-wise conflict profile only");
  add_paths(analyze, f, true);
  add_prune_scale(analyze, f);
  add_eval(analyze, f, true);
  add_analysis(analyze, f);

  auto* sweep = app.add_subcommand("sweep", "score base + s * Top_p(delta) over a (p, s) grid");
  add_paths(sweep, f, false);
  add_eval(sweep, f, false);
  sweep->add_option("--grid-p", f.grid_p, "pruning thresholds (default 0.1..1.0)")->delimiter(',');
  sweep->add_option("--grid-s", f.grid_s, "scaling factors (default 0.1..1.0)")->delimiter(',');

  std::string score_task, score_path;
  auto* score = app.add_subcommand("score", "synthetic evaluator: print {\"score\": x} for a checkpoint");
  score->add_option("--task", score_task, "synthetic task JSON")->required();
  score->add_option("checkpoint", score_path, "checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(error_kind::usage);
  }

  try {
    if (score->parsed()) return cmd_score(score_task, score_path);
    const auto cfg = resolve_config(f);
    if (delta->parsed()) return cmd_delta(cfg);
    if (merge->parsed()) return cmd_merge(cfg, f.method);
    if (analyze->parsed()) return cmd_analyze(cfg);
    if (sweep->parsed()) return cmd_sweep(cfg);
  } catch (const error& e) {
    std::cerr << "himerge: " << e.what() << '\n';
    return static_cast<int>(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "himerge: " << e.what() << '\n';
    return static_cast<int>(error_kind::data);
  } catch (const std::exception& e) {
    std::cerr << "himerge: " << e.what() << '\n';
    return static_cast<int>(error_kind::data);
  }
  return static_cast<int>(error_kind::usage);
}
