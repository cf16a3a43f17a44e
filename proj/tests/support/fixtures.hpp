#pragma once

// Shared test fixtures: temporary directories, random checkpoints and the two
// synthetic merging instances.

#include "himerge/himerge.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace himerge::testing {

class temp_dir {
public:
  explicit temp_dir(const std::string& tag = "t") {
    auto tmpl = (std::filesystem::temp_directory_path() / ("himerge-" + tag + "-XXXXXX")).string();
    if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~temp_dir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  temp_dir(const temp_dir&) = delete;
  temp_dir& operator=(const temp_dir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
  std::filesystem::path path_;
};

inline std::string layer_name(std::uint32_t l, const std::string& leaf) {
  return "model.layers." + std::to_string(l) + "." + leaf;
}

/// Random model: embed (PRE), `layers` blocks of two tensors, head (POST).
/// Values are drawn with mixed magnitudes and a share of exact duplicates.
inline checkpoint random_checkpoint(std::mt19937_64& rng, std::uint32_t layers, std::size_t width,
                                    dtype type = dtype::f32) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::uniform_int_distribution<int> pick(0, 9);
  auto fill = [&](std::size_t count) {
    std::vector<float> v(count);
    for (auto& x : v) {
      const int k = pick(rng);
      x = k == 0 ? 0.25f : k == 1 ? -0.25f : n(rng) * (k < 5 ? 1e-3f : 1.0f);
    }
    return v;
  };
  checkpoint cp;
  cp.insert("embed.weight", tensor_record::from_f32(type, {width}, fill(width)));
  for (std::uint32_t l = 0; l < layers; ++l) {
    cp.insert(layer_name(l, "attn.weight"), tensor_record::from_f32(type, {2, width}, fill(2 * width)));
    cp.insert(layer_name(l, "mlp.bias"), tensor_record::from_f32(type, {width}, fill(width)));
  }
  cp.insert("zz_head.weight", tensor_record::from_f32(type, {width}, fill(width)));
  return cp;
}

/// Same layout as `like` with small perturbations added (a "fine-tune").
inline checkpoint perturbed(const checkpoint& like, std::mt19937_64& rng, float sigma) {
  std::normal_distribution<float> n(0.0f, sigma);
  checkpoint out;
  for (const auto& [name, rec] : like.tensors()) {
    auto v = rec.to_f32();
    for (auto& x : v) x += n(rng);
    out.insert(name, tensor_record::from_f32(rec.type, rec.shape, v));
  }
  return out;
}

/// A base model, two fine-tunes and their synthetic tasks.
struct synthetic_instance {
  checkpoint base;
  checkpoint model_a;
  checkpoint model_b;
  eval_task task_a;
  eval_task task_b;
  std::uint32_t layers = 0;
  std::uint32_t injected = 0; ///< interference layer, when there is one
};

inline std::vector<std::string> scoring_tensors(std::uint32_t layers) {
  std::vector<std::string> names;
  for (std::uint32_t l = 0; l < layers; ++l) names.push_back(layer_name(l, "attn.weight"));
  return names;
}

inline double norm(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += double(x) * x;
  return std::sqrt(s);
}

/// Destructive interference: task A's support is [0, d), B's is [d, 2d) of a
/// 2d-wide scoring tensor per layer, summed over layers. The models split the
/// non-injected layers between them. At layer k, B's delta cancels A's
/// contribution on A's support and adds heavy noise there; A's layer k adds a
/// little noise on B's support. Each layer also carries an unscored tensor.
inline synthetic_instance interference_instance(std::uint64_t seed, std::uint32_t L = 8, std::size_t d = 64,
                                                std::size_t n_eval = 2000) {
  constexpr double a_k = 0.3, lambda = 1.0, nu_a = 0.5, nu_b = 0.08, rho = 0.3;
  constexpr std::size_t mlp = 256;

  synthetic_instance inst;
  inst.layers = L;
  inst.injected = static_cast<std::uint32_t>(seed % L);
  const auto k = inst.injected;
  const auto targets = scoring_tensors(L);
  inst.task_a = {"A", synthetic_linear_task{2 * seed + 1, 2 * d, n_eval, targets, 0, d}, true};
  inst.task_b = {"B", synthetic_linear_task{2 * seed + 2, 2 * d, n_eval, targets, d, 2 * d}, true};
  const auto w_a = hidden_optimum(std::get<synthetic_linear_task>(inst.task_a.evaluator));
  const auto w_b = hidden_optimum(std::get<synthetic_linear_task>(inst.task_b.evaluator));
  const double na = norm(w_a), nb = norm(w_b);

  gaussian_stream g(1000 + seed);
  auto unit = [&](std::size_t n) {
    std::vector<double> v(n);
    double s = 0.0;
    for (auto& x : v) {
      x = g.next();
      s += x * x;
    }
    for (auto& x : v) x /= std::sqrt(s);
    return v;
  };

  std::vector<std::uint32_t> owned_a, owned_b;
  {
    std::vector<std::uint32_t> rest;
    for (std::uint32_t l = 0; l < L; ++l)
      if (l != k) rest.push_back(l);
    for (std::size_t i = 0; i < rest.size(); ++i) (i % 2 == 0 ? owned_a : owned_b).push_back(rest[i]);
  }
  const double base_scale = rho * na / std::sqrt(double(2 * d * L)) * std::sqrt(2.0);

  std::vector<float> embed(32);
  for (auto& x : embed) x = static_cast<float>(g.next());
  inst.base.insert("embed.weight", tensor_record::from_f32(dtype::f32, {32}, embed));
  inst.model_a.insert("embed.weight", tensor_record::from_f32(dtype::f32, {32}, embed));
  inst.model_b.insert("embed.weight", tensor_record::from_f32(dtype::f32, {32}, embed));

  for (std::uint32_t l = 0; l < L; ++l) {
    std::vector<double> f(2 * d), da(2 * d, 0.0), db(2 * d, 0.0);
    for (auto& x : f) x = g.next() * base_scale;
    if (std::find(owned_a.begin(), owned_a.end(), l) != owned_a.end()) {
      for (std::size_t j = 0; j < d; ++j) da[j] = (1 - a_k) / owned_a.size() * w_a[j];
    }
    if (std::find(owned_b.begin(), owned_b.end(), l) != owned_b.end()) {
      for (std::size_t j = 0; j < d; ++j) db[d + j] = 1.0 / owned_b.size() * w_b[d + j];
    }
    if (l == k) {
      const auto junk_b = unit(d);
      const auto junk_a = unit(d);
      for (std::size_t j = 0; j < d; ++j) {
        da[j] = a_k * w_a[j];
        da[d + j] = junk_b[j] * nu_b * nb;
        db[j] = -lambda * a_k * w_a[j] + junk_a[j] * nu_a * na;
      }
    }
    std::vector<float> fb(2 * d), fa(2 * d), fbm(2 * d);
    for (std::size_t j = 0; j < 2 * d; ++j) {
      fb[j] = static_cast<float>(f[j]);
      fa[j] = static_cast<float>(f[j] + da[j]);
      fbm[j] = static_cast<float>(f[j] + db[j]);
    }
    const auto attn = layer_name(l, "attn.weight");
    inst.base.insert(attn, tensor_record::from_f32(dtype::f32, {2 * d}, fb));
    inst.model_a.insert(attn, tensor_record::from_f32(dtype::f32, {2 * d}, fa));
    inst.model_b.insert(attn, tensor_record::from_f32(dtype::f32, {2 * d}, fbm));

    std::vector<float> m(mlp), ma(mlp), mb(mlp);
    for (std::size_t j = 0; j < mlp; ++j) {
      m[j] = static_cast<float>(g.next());
      ma[j] = static_cast<float>(m[j] + 0.01 * g.next());
      mb[j] = static_cast<float>(m[j] + 0.01 * g.next());
    }
    const auto mlp_name = layer_name(l, "mlp.weight");
    inst.base.insert(mlp_name, tensor_record::from_f32(dtype::f32, {mlp}, m));
    inst.model_a.insert(mlp_name, tensor_record::from_f32(dtype::f32, {mlp}, ma));
    inst.model_b.insert(mlp_name, tensor_record::from_f32(dtype::f32, {mlp}, mb));
  }
  return inst;
}

/// Two specialists on disjoint coordinates: A learns its optimum on [0, d),
/// B on [d, 2d), spread evenly over the layers. With drift > 0 each also
/// moves by Gaussian noise on the other's coordinates (relative scale).
inline synthetic_instance retention_instance(std::uint64_t seed, std::uint32_t L = 6, std::size_t d = 48,
                                             std::size_t n_eval = 2000, double drift = 0.0) {
  synthetic_instance inst;
  inst.layers = L;
  const auto targets = scoring_tensors(L);
  inst.task_a = {"A", synthetic_linear_task{7000 + 2 * seed, 2 * d, n_eval, targets, 0, d}, true};
  inst.task_b = {"B", synthetic_linear_task{7001 + 2 * seed, 2 * d, n_eval, targets, d, 2 * d}, true};
  const auto w_a = hidden_optimum(std::get<synthetic_linear_task>(inst.task_a.evaluator));
  const auto w_b = hidden_optimum(std::get<synthetic_linear_task>(inst.task_b.evaluator));
  const double scale_a = norm(w_a) / std::sqrt(double(d)), scale_b = norm(w_b) / std::sqrt(double(d));

  gaussian_stream g(9000 + seed);
  for (std::uint32_t l = 0; l < L; ++l) {
    std::vector<float> f(2 * d), a(2 * d), b(2 * d);
    for (std::size_t j = 0; j < 2 * d; ++j) {
      const double base = 0.3 * g.next() / L;
      const double da = j < d ? w_a[j] / L : drift * scale_b * g.next() / L;
      const double db = j >= d ? w_b[j] / L : drift * scale_a * g.next() / L;
      f[j] = static_cast<float>(base);
      a[j] = static_cast<float>(base + da);
      b[j] = static_cast<float>(base + db);
    }
    const auto name = layer_name(l, "attn.weight");
    inst.base.insert(name, tensor_record::from_f32(dtype::f32, {2 * d}, f));
    inst.model_a.insert(name, tensor_record::from_f32(dtype::f32, {2 * d}, a));
    inst.model_b.insert(name, tensor_record::from_f32(dtype::f32, {2 * d}, b));
  }
  return inst;
}

inline hi_merge_config instance_config(const synthetic_instance& inst, prune_scale_params pa = {},
                                       prune_scale_params pb = {}) {
  hi_merge_config cfg;
  cfg.params_a = pa;
  cfg.params_b = pb;
  cfg.task_a = inst.task_a;
  cfg.task_b = inst.task_b;
  return cfg;
}

inline double score(const checkpoint& cp, const eval_task& t) {
  return synthetic_linear_eval(cp, std::get<synthetic_linear_task>(t.evaluator));
}

} // namespace himerge::testing
