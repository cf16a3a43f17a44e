#pragma once

// Performance oracle P_t(theta). A task is scored either by an external
// process (command template with a {checkpoint} placeholder that prints one
// JSON object {"score": <number>}) or by a built-in deterministic scorer.
// Results are cached by (checkpoint fingerprint, task id).

#include "himerge/checkpoint.hpp"
#include "himerge/error.hpp"
#include "himerge/subprocess.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <variant>
#include <vector>

namespace himerge {

struct external_command {
  std::string command_template;
  std::chrono::milliseconds timeout{std::chrono::seconds(600)};
};

/// Linear sign-agreement task: the scored weight vector is the elementwise sum
/// of the `targets` tensors (each 1-D of length `dim`). Probes and the hidden
/// optimum are standard Gaussian on [support_begin, support_end) and zero
/// elsewhere; support_end == 0 means the full length.
struct synthetic_linear_task {
  std::uint64_t seed = 0;
  std::size_t dim = 0;
  std::size_t n_eval = 1000;
  std::vector<std::string> targets;
  std::size_t support_begin = 0;
  std::size_t support_end = 0;

  std::size_t support_stop() const noexcept { return support_end == 0 ? dim : support_end; }
  std::size_t support_size() const noexcept { return support_stop() - support_begin; }
};

/// Always returns `value`; used to check that a flat oracle yields no conflicts.
struct constant_task {
  double value = 0.5;
};

using evaluator_spec = std::variant<external_command, synthetic_linear_task, constant_task>;

struct eval_task {
  std::string task_id;
  evaluator_spec evaluator;
  bool higher_is_better = true;
};

struct eval_result {
  double value = 0.0;
  std::string checkpoint_fingerprint;
  std::string task_id;
  double wall_time = 0.0; ///< seconds; zero for cache hits
  bool cached = false;
};

// ----------------------------------------------------------------------------
// Built-in synthetic scorer
// ----------------------------------------------------------------------------

/// Standard normals from mt19937_64 via Box-Muller with explicit 53-bit
/// uniforms, so streams are bit-identical across standard libraries.
class gaussian_stream {
public:
  explicit gaussian_stream(std::uint64_t seed) : rng_(seed) {}

  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

private:
  double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

  std::mt19937_64 rng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Hidden optimum and probe matrix for a synthetic task, restricted to its support.
struct synthetic_probe_set {
  std::vector<double> optimum;      ///< support_size
  std::vector<double> probes;       ///< n_eval x support_size, row-major
  std::vector<std::int8_t> expected; ///< sign(<optimum, probe>)
};

namespace detail {
inline std::int8_t sign_of(double v) noexcept { return static_cast<std::int8_t>((v > 0) - (v < 0)); }
} // namespace detail

inline void validate_synthetic_task(const synthetic_linear_task& t) {
  if (t.dim == 0) throw usage_error("synthetic task: dim must be positive");
  if (t.n_eval == 0) throw usage_error("synthetic task: n_eval must be positive");
  if (t.targets.empty()) throw usage_error("synthetic task: no target tensor");
  if (t.support_begin >= t.support_stop() || t.support_stop() > t.dim) {
    throw usage_error("synthetic task: support [" + std::to_string(t.support_begin) + ", " +
                      std::to_string(t.support_stop()) + ") invalid for dim " + std::to_string(t.dim));
  }
}

inline synthetic_probe_set make_probe_set(const synthetic_linear_task& t) {
  validate_synthetic_task(t);
  const std::size_t m = t.support_size();
  synthetic_probe_set set;
  gaussian_stream g(t.seed);
  set.optimum.resize(m);
  for (auto& v : set.optimum) v = g.next();
  set.probes.resize(t.n_eval * m);
  for (auto& v : set.probes) v = g.next();
  set.expected.resize(t.n_eval);
  for (std::size_t i = 0; i < t.n_eval; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < m; ++j) dot += set.optimum[j] * set.probes[i * m + j];
    set.expected[i] = detail::sign_of(dot);
  }
  return set;
}

/// The task's hidden optimum as a full-length f32 vector (zero off-support).
inline std::vector<float> hidden_optimum(const synthetic_linear_task& t) {
  const auto set = make_probe_set(t);
  std::vector<float> w(t.dim, 0.0f);
  for (std::size_t j = 0; j < set.optimum.size(); ++j) w[t.support_begin + j] = static_cast<float>(set.optimum[j]);
  return w;
}

/// Summed target weights restricted to the task's support.
inline std::vector<double> synthetic_weights(const checkpoint& cp, const synthetic_linear_task& t) {
  std::vector<double> w(t.support_size(), 0.0);
  for (const auto& name : t.targets) {
    if (!cp.contains(name)) throw eval_error("synthetic task: missing target tensor '" + name + "'");
    const auto& rec = cp.at(name);
    if (rec.shape.size() != 1 || rec.shape[0] != t.dim) {
      throw eval_error("synthetic task: target tensor '" + name + "' must be 1-D of length " +
                       std::to_string(t.dim));
    }
    for (std::size_t j = 0; j < w.size(); ++j) w[j] += static_cast<double>(rec.value(t.support_begin + j));
  }
  return w;
}

inline double synthetic_linear_eval(const checkpoint& cp, const synthetic_linear_task& t,
                                    const synthetic_probe_set& set) {
  const auto w = synthetic_weights(cp, t);
  const std::size_t m = w.size();
  std::size_t agree = 0;
  for (std::size_t i = 0; i < t.n_eval; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < m; ++j) dot += w[j] * set.probes[i * m + j];
    agree += detail::sign_of(dot) == set.expected[i];
  }
  return static_cast<double>(agree) / static_cast<double>(t.n_eval);
}

inline double synthetic_linear_eval(const checkpoint& cp, const synthetic_linear_task& t) {
  return synthetic_linear_eval(cp, t, make_probe_set(t));
}

// ----------------------------------------------------------------------------
// External evaluator protocol
// ----------------------------------------------------------------------------

/// Parses evaluator stdout: exactly one JSON object with a finite numeric
/// "score", optionally surrounded by whitespace.
inline double parse_score_output(const std::string& out) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(out);
  } catch (const nlohmann::json::exception&) {
    throw eval_error("unparsable evaluator output: expected a single JSON object, got '" +
                     out.substr(0, 200) + "'");
  }
  if (!j.is_object() || !j.contains("score") || !j["score"].is_number()) {
    throw eval_error("unparsable evaluator output: no numeric \"score\" in '" + out.substr(0, 200) + "'");
  }
  const double v = j["score"].get<double>();
  if (!std::isfinite(v)) throw eval_error("evaluator returned a non-finite score");
  return v;
}

inline std::string substitute_checkpoint(const std::string& tmpl, const std::filesystem::path& path) {
  const std::string placeholder = "{checkpoint}";
  if (tmpl.find(placeholder) == std::string::npos) {
    throw usage_error("evaluator command '" + tmpl + "' has no {checkpoint} placeholder");
  }
  std::string out;
  std::size_t from = 0;
  for (auto at = tmpl.find(placeholder); at != std::string::npos; at = tmpl.find(placeholder, from)) {
    out.append(tmpl, from, at - from);
    out += shell_quote(path.string());
    from = at + placeholder.size();
  }
  out.append(tmpl, from);
  return out;
}

// ----------------------------------------------------------------------------
// Caching evaluator
// ----------------------------------------------------------------------------

struct evaluator_options {
  std::optional<std::filesystem::path> cache_file; ///< JSON-lines; in-memory only when unset
  std::filesystem::path scratch_dir = std::filesystem::temp_directory_path() / "himerge-scratch";
  bool keep_candidates = false;
  unsigned parallel = 1;
};

struct eval_request {
  const checkpoint* cp;
  const eval_task* task;
};

/// Per-request outcome when errors are collected instead of thrown.
struct eval_outcome {
  std::optional<eval_result> result;
  std::string error;
  error_kind kind = error_kind::evaluator;
};

class evaluator {
public:
  explicit evaluator(evaluator_options opts = {}) : opts_(std::move(opts)) {
    if (opts_.parallel == 0) opts_.parallel = 1;
    if (opts_.cache_file) load_cache(*opts_.cache_file);
  }

  evaluator(const evaluator&) = delete;
  evaluator& operator=(const evaluator&) = delete;

  const evaluator_options& options() const noexcept { return opts_; }

  eval_result evaluate(const checkpoint& cp, const eval_task& task) {
    const eval_request req{&cp, &task};
    return evaluate_all(std::span(&req, 1)).front();
  }

  /// Evaluates all requests with up to `parallel` concurrent workers; throws
  /// the first failure after every worker has stopped.
  std::vector<eval_result> evaluate_all(std::span<const eval_request> reqs) {
    auto outcomes = evaluate_settled(reqs);
    std::vector<eval_result> out;
    out.reserve(outcomes.size());
    for (auto& o : outcomes) {
      if (!o.result) {
        if (o.kind == error_kind::usage) throw usage_error(o.error);
        if (o.kind == error_kind::data) throw data_error(o.error);
        throw eval_error(o.error);
      }
      out.push_back(std::move(*o.result));
    }
    return out;
  }

  std::vector<eval_outcome> evaluate_settled(std::span<const eval_request> reqs) {
    std::vector<eval_outcome> out(reqs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < reqs.size(); i = next++) {
        try {
          out[i].result = evaluate_one(*reqs[i].cp, *reqs[i].task);
        } catch (const error& e) {
          out[i].error = e.what();
          out[i].kind = e.kind();
        } catch (const std::exception& e) {
          out[i].error = e.what();
        }
      }
    };
    const unsigned n = std::min<std::size_t>(opts_.parallel, reqs.size());
    if (n <= 1) {
      worker();
    } else {
      std::vector<std::jthread> pool;
      for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
    }
    return out;
  }

  /// Evaluator invocations (cache misses) since construction or reset.
  std::size_t invocations() const {
    std::lock_guard lock(mu_);
    return misses_;
  }
  std::size_t cache_hits() const {
    std::lock_guard lock(mu_);
    return hits_;
  }
  std::size_t invocations_for(const std::string& task_id) const {
    std::lock_guard lock(mu_);
    auto it = misses_by_task_.find(task_id);
    return it == misses_by_task_.end() ? 0 : it->second;
  }
  /// Distinct checkpoints that required at least one invocation.
  std::size_t distinct_candidates() const {
    std::lock_guard lock(mu_);
    return missed_fingerprints_.size();
  }
  void reset_counters() {
    std::lock_guard lock(mu_);
    misses_ = hits_ = 0;
    misses_by_task_.clear();
    missed_fingerprints_.clear();
  }

private:
  static std::string key(const std::string& fp, const std::string& task_id) { return fp + '\n' + task_id; }

  eval_result evaluate_one(const checkpoint& cp, const eval_task& task) {
    const auto bytes = serialize_checkpoint(cp);
    const auto fp = sha256_hex(bytes);
    {
      std::lock_guard lock(mu_);
      if (auto it = cache_.find(key(fp, task.task_id)); it != cache_.end()) {
        ++hits_;
        return {it->second, fp, task.task_id, 0.0, true};
      }
    }

    const auto t0 = std::chrono::steady_clock::now();
    const double value = std::visit(
        [&](const auto& spec) -> double {
          using T = std::decay_t<decltype(spec)>;
          if constexpr (std::is_same_v<T, constant_task>) {
            return spec.value;
          } else if constexpr (std::is_same_v<T, synthetic_linear_task>) {
            return synthetic_linear_eval(cp, spec, *probes_for(spec));
          } else {
            return run_external(spec, bytes, fp, task.task_id);
          }
        },
        task.evaluator);
    if (!std::isfinite(value)) throw eval_error("task '" + task.task_id + "' produced a non-finite score");
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::lock_guard lock(mu_);
    ++misses_;
    ++misses_by_task_[task.task_id];
    missed_fingerprints_.insert(fp);
    cache_[key(fp, task.task_id)] = value;
    append_cache_line(fp, task.task_id, value);
    return {value, fp, task.task_id, elapsed, false};
  }

  double run_external(const external_command& spec, const std::vector<std::byte>& bytes,
                      const std::string& fp, const std::string& task_id) {
    std::filesystem::create_directories(opts_.scratch_dir);
    // one file per (fingerprint, worker) so concurrent runs never share a path
    const auto path = opts_.scratch_dir /
                      (fp.substr(0, 32) + "-" + std::to_string(scratch_counter_++) + ".safetensors");
    write_file_bytes(path, bytes);
    struct cleanup {
      const std::filesystem::path& p;
      bool keep;
      ~cleanup() {
        std::error_code ec;
        if (!keep) std::filesystem::remove(p, ec);
      }
    } guard{path, opts_.keep_candidates};

    const auto cmd = substitute_checkpoint(spec.command_template, path);
    process_result res;
    try {
      res = run_shell(cmd, spec.timeout);
    } catch (const std::exception& e) {
      throw eval_error("task '" + task_id + "': cannot start evaluator: " + e.what());
    }
    if (res.timed_out) {
      throw eval_error("task '" + task_id + "': evaluator timed out after " +
                       std::to_string(spec.timeout.count()) + " ms; stderr: " + res.err);
    }
    if (res.exit_code != 0) {
      throw eval_error("task '" + task_id + "': evaluator exited with status " +
                       std::to_string(res.exit_code) + "; stderr: " + res.err);
    }
    try {
      return parse_score_output(res.out);
    } catch (const eval_error& e) {
      throw eval_error("task '" + task_id + "': " + e.what() + "; stderr: " + res.err);
    }
  }

  std::shared_ptr<const synthetic_probe_set> probes_for(const synthetic_linear_task& t) {
    std::string k = std::to_string(t.seed) + '/' + std::to_string(t.dim) + '/' + std::to_string(t.n_eval) + '/' +
                    std::to_string(t.support_begin) + '/' + std::to_string(t.support_stop());
    {
      std::lock_guard lock(mu_);
      if (auto it = probes_.find(k); it != probes_.end()) return it->second;
    }
    auto set = std::make_shared<const synthetic_probe_set>(make_probe_set(t));
    std::lock_guard lock(mu_);
    return probes_.try_emplace(k, std::move(set)).first->second;
  }

  void load_cache(const std::filesystem::path& path) {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      // a torn final line from an interrupted run is skipped
      auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object() || !j.contains("fingerprint") || !j.contains("task_id") ||
          !j.contains("score") || !j["score"].is_number()) {
        continue;
      }
      cache_[key(j["fingerprint"].get<std::string>(), j["task_id"].get<std::string>())] = j["score"].get<double>();
    }
  }

  void append_cache_line(const std::string& fp, const std::string& task_id, double value) {
    if (!opts_.cache_file) return;
    if (opts_.cache_file->has_parent_path()) std::filesystem::create_directories(opts_.cache_file->parent_path());
    std::ofstream out(*opts_.cache_file, std::ios::app);
    out << nlohmann::json{{"fingerprint", fp}, {"task_id", task_id}, {"score", value}}.dump() << '\n';
  }

  evaluator_options opts_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, double> cache_;
  std::map<std::string, std::shared_ptr<const synthetic_probe_set>> probes_;
  std::size_t misses_ = 0;
  std::size_t hits_ = 0;
  std::map<std::string, std::size_t> misses_by_task_;
  std::set<std::string> missed_fingerprints_;
  std::atomic<std::uint64_t> scratch_counter_{0};
};

} // namespace himerge
