#include "support/fixtures.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>

using namespace himerge;
using namespace himerge::testing;

namespace {

analysis_context context_for(const synthetic_instance& inst, evaluator& ev, prune_scale_params pa = {},
                             prune_scale_params pb = {}) {
  return analysis_context::make(inst.base, inst.model_a, inst.model_b,
                                model_wise_process(compute_delta(inst.model_a, inst.base, "A"), pa),
                                model_wise_process(compute_delta(inst.model_b, inst.base, "B"), pb),
                                partition_layers(inst.base), inst.task_a, inst.task_b, ev);
}

void expect_identities(const conflict_profile& prof) {
  for (const auto& lc : prof.layers) {
    for (const auto& e : lc.entries) EXPECT_EQ(e.c, e.alpha + e.beta);
    EXPECT_EQ(lc.gamma_a, lc.at(model_id::A, model_id::A).c - lc.at(model_id::A, model_id::G).c);
    EXPECT_EQ(lc.gamma_b, lc.at(model_id::B, model_id::B).c - lc.at(model_id::B, model_id::G).c);
    EXPECT_EQ(lc.gamma, lc.gamma_a + lc.gamma_b);
  }
}

/// Three layers, one 8-wide scoring tensor each. Task signal only in layer 0.
synthetic_instance single_layer_signal() {
  synthetic_instance inst;
  inst.layers = 3;
  const auto targets = scoring_tensors(3);
  inst.task_a = {"A", synthetic_linear_task{77, 8, 400, targets, 0, 0}, true};
  inst.task_b = {"B", constant_task{0.5}, true};
  const auto opt = hidden_optimum(std::get<synthetic_linear_task>(inst.task_a.evaluator));
  gaussian_stream g(5);
  std::vector<std::vector<float>> f(3, std::vector<float>(8));
  for (auto& layer : f)
    for (auto& x : layer) x = static_cast<float>(0.05 * g.next());
  for (std::uint32_t l = 0; l < 3; ++l) {
    std::vector<float> a = f[l], b = f[l];
    for (std::size_t j = 0; j < 8; ++j) {
      // A's layer 0 moves the summed weights exactly onto the optimum
      if (l == 0) a[j] = opt[j] - f[1][j] - f[2][j];
      else a[j] += static_cast<float>(0.01 * g.next());
      b[j] += static_cast<float>(0.01 * g.next());
    }
    inst.base.insert(layer_name(l, "attn.weight"), tensor_record::from_f32(dtype::f32, {8}, f[l]));
    inst.model_a.insert(layer_name(l, "attn.weight"), tensor_record::from_f32(dtype::f32, {8}, a));
    inst.model_b.insert(layer_name(l, "attn.weight"), tensor_record::from_f32(dtype::f32, {8}, b));
  }
  return inst;
}

} // namespace

TEST(Contribution, IdentitiesHoldExactly) {
  const auto inst = interference_instance(3);
  evaluator ev;
  auto ctx = context_for(inst, ev, {0.8, 0.9}, {0.7, 1.0});
  const auto layers = ctx.partition.layers(false);
  const auto prof = compute_conflict_profile(ctx, layers);
  ASSERT_EQ(prof.layers.size(), inst.layers);
  expect_identities(prof);
}

TEST(Contribution, SingleImpactsAgreeWithProfile) {
  const auto inst = interference_instance(2);
  evaluator ev;
  auto ctx = context_for(inst, ev);
  const layer_id l[] = {layer_id::block(2)};
  const auto prof = compute_conflict_profile(ctx, l);
  for (auto [cap, src] : contribution_pairs) {
    EXPECT_EQ(deletion_impact(ctx, cap, src, l[0]), prof.layers[0].at(cap, src).alpha);
    EXPECT_EQ(addition_impact(ctx, cap, src, l[0]), prof.layers[0].at(cap, src).beta);
    EXPECT_EQ(contribution(ctx, cap, src, l[0]), prof.layers[0].at(cap, src).c);
  }
}

TEST(Contribution, ConstantEvaluatorGivesZeros) {
  auto inst = interference_instance(1);
  inst.task_a = {"const-a", constant_task{0.5}, true};
  inst.task_b = {"const-b", constant_task{0.5}, true};
  evaluator ev;
  auto ctx = context_for(inst, ev);
  const auto prof = compute_conflict_profile(ctx, ctx.partition.layers(true));
  for (const auto& lc : prof.layers) {
    for (const auto& e : lc.entries) {
      EXPECT_EQ(e.alpha, 0.0);
      EXPECT_EQ(e.beta, 0.0);
    }
    EXPECT_EQ(lc.gamma, 0.0);
  }
}

TEST(Contribution, ZeroDeltasGiveZeros) {
  auto inst = interference_instance(4);
  inst.model_a = inst.base;
  inst.model_b = inst.base;
  evaluator ev;
  auto ctx = context_for(inst, ev);
  const auto prof = compute_conflict_profile(ctx, ctx.partition.layers(false));
  for (const auto& lc : prof.layers) {
    for (const auto& e : lc.entries) EXPECT_EQ(e.c, 0.0);
    EXPECT_EQ(lc.gamma_a, 0.0);
    EXPECT_EQ(lc.gamma_b, 0.0);
  }
  // every candidate equals theta_F, so only the baseline is ever evaluated
  EXPECT_EQ(ev.invocations(), 2u);
}

TEST(Contribution, ZeroLayerIsNeutralAndCached) {
  auto inst = interference_instance(6);
  // give layer 5 no delta in either model
  for (auto* m : {&inst.model_a, &inst.model_b}) {
    checkpoint patched;
    for (const auto& [name, rec] : m->tensors())
      patched.insert(name, name.find(".layers.5.") != std::string::npos ? inst.base.at(name) : rec);
    *m = patched;
  }
  evaluator ev;
  auto ctx = context_for(inst, ev);
  const layer_id l[] = {layer_id::block(5)};
  const auto before = ev.invocations();
  const auto prof = compute_conflict_profile(ctx, l);
  EXPECT_EQ(prof.layers[0].gamma_a, 0.0);
  EXPECT_EQ(prof.layers[0].gamma_b, 0.0);
  for (const auto& e : prof.layers[0].entries) {
    EXPECT_EQ(e.alpha, 0.0);
    EXPECT_EQ(e.beta, 0.0);
  }
  // only the four baselines per task were new
  EXPECT_EQ(ev.invocations() - before, 8u);
}

TEST(Contribution, RemovingTheSignalLayerHurts) {
  const auto inst = single_layer_signal();
  evaluator ev;
  auto ctx = context_for(inst, ev);
  const auto prof = compute_conflict_profile(ctx, ctx.partition.layers(false));
  EXPECT_LT(prof.layers[0].at(model_id::A, model_id::A).alpha, 0.0);
  const double beta0 = prof.layers[0].at(model_id::A, model_id::A).beta;
  EXPECT_GT(beta0, 0.0);
  for (const auto& lc : prof.layers) EXPECT_LE(lc.at(model_id::A, model_id::A).beta, beta0);
  EXPECT_GT(prof.baselines.of(model_id::A, model_id::A), 0.99);
}

TEST(Contribution, InjectedLayerHasLargestConflict) {
  for (std::uint64_t seed : {0u, 5u, 10u}) {
    const auto inst = interference_instance(seed);
    evaluator ev;
    auto ctx = context_for(inst, ev);
    const auto prof = compute_conflict_profile(ctx, ctx.partition.layers(false));
    const auto best = std::max_element(prof.layers.begin(), prof.layers.end(),
                                       [](const auto& x, const auto& y) { return x.gamma < y.gamma; });
    EXPECT_EQ(best->layer, layer_id::block(inst.injected)) << "seed " << seed;
    EXPECT_GT(best->gamma, 0.0);
  }
}

TEST(Contribution, CallBudgetAndWarmRerun) {
  const auto inst = interference_instance(7);
  temp_dir dir("budget");
  const auto cache = dir / "cache.jsonl";
  {
    evaluator ev({cache});
    auto ctx = context_for(inst, ev);
    compute_conflict_profile(ctx, ctx.partition.layers(false));
    EXPECT_LE(ev.invocations_for("A"), 6u * inst.layers + 4);
    EXPECT_LE(ev.invocations_for("B"), 6u * inst.layers + 4);
    EXPECT_LE(ev.distinct_candidates(), 6u * inst.layers + 4);
  }
  evaluator warm({cache});
  auto ctx = context_for(inst, warm);
  compute_conflict_profile(ctx, ctx.partition.layers(false));
  EXPECT_EQ(warm.invocations(), 0u);
}

TEST(Contribution, FailureIsResumableFromCache) {
  auto inst = interference_instance(0, 3, 8, 50);
  temp_dir dir("fail");
  // succeeds for the first five candidates, then fails
  const auto counter = shell_quote((dir / "n").string());
  const std::string flaky = "n=$(cat " + counter + " 2>/dev/null || echo 0); n=$((n+1)); echo $n > " + counter +
                            "; [ $n -le 5 ] || exit 9; echo '{\"score\": 0.5}' # {checkpoint}";
  inst.task_b = {"flaky", external_command{flaky, std::chrono::seconds(20)}, true};
  {
    evaluator ev({dir / "cache.jsonl", dir / "scratch"});
    auto ctx = context_for(inst, ev);
    EXPECT_THROW(compute_conflict_profile(ctx, ctx.partition.layers(false)), eval_error);
  }
  // same task id, now healthy
  inst.task_b.evaluator = external_command{"echo '{\"score\": 0.5}' # {checkpoint}", std::chrono::seconds(20)};
  evaluator ev({dir / "cache.jsonl", dir / "scratch"});
  auto ctx = context_for(inst, ev);
  compute_conflict_profile(ctx, ctx.partition.layers(false));
  EXPECT_EQ(ev.invocations_for("flaky"), 6u * 3 + 4 - 5);
}

TEST(Reports, CsvAndJsonShape) {
  const auto inst = interference_instance(1);
  evaluator ev;
  auto ctx = context_for(inst, ev);
  const auto prof = compute_conflict_profile(ctx, ctx.partition.layers(false));
  std::ostringstream csv;
  write_profile_csv(csv, prof);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 21);
  EXPECT_EQ(line.substr(0, 19), "layer,alpha_A_A,alp");
  EXPECT_NE(line.find("beta_B_G"), std::string::npos);
  EXPECT_EQ(line.substr(line.size() - 21), "gamma_A,gamma_B,Gamma");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 21);
  }
  EXPECT_EQ(rows, inst.layers);

  const auto j = profile_to_json(prof);
  ASSERT_EQ(j["layers"].size(), inst.layers);
  for (const auto& row : j["layers"]) {
    EXPECT_EQ(row["c"]["A_G"].get<double>(), row["alpha"]["A_G"].get<double>() + row["beta"]["A_G"].get<double>());
    EXPECT_EQ(row["Gamma"].get<double>(), row["gamma_A"].get<double>() + row["gamma_B"].get<double>());
  }
  EXPECT_TRUE(j["baselines"].contains("P_A(F)"));
}
