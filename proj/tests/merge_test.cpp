#include "support/fixtures.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace himerge;

namespace {

checkpoint single(std::vector<float> v) {
  checkpoint cp;
  cp.insert("w", tensor_record::from_f32(dtype::f32, {v.size()}, v));
  return cp;
}

using cref = std::reference_wrapper<const checkpoint>;

} // namespace

TEST(Soups, IdenticalModels) {
  std::mt19937_64 rng(1);
  const auto m = himerge::testing::random_checkpoint(rng, 2, 6);
  const cref ms[] = {m, m};
  EXPECT_EQ(weighted_average_merge(ms, {{0.3, 0.7}}), m);
}

TEST(Soups, Midpoint) {
  const auto a = single({2}), b = single({4});
  const cref ms[] = {a, b};
  EXPECT_EQ(weighted_average_merge(ms, {{0.5, 0.5}}).at("w").to_f32(), std::vector<float>({3}));
}

TEST(Soups, WeightViolations) {
  const auto a = single({2}), b = single({4});
  const cref ms[] = {a, b};
  EXPECT_THROW(weighted_average_merge(ms, {{0.5, 0.6}}), usage_error);
  EXPECT_THROW(weighted_average_merge(ms, {{1.0, 0.0}}), usage_error);
  EXPECT_THROW(weighted_average_merge(ms, {{1.0}}), usage_error);
  const auto c = single({1, 2});
  const cref bad[] = {a, c};
  EXPECT_THROW(weighted_average_merge(bad, {{0.5, 0.5}}), data_error);
}

TEST(Soups, PermutationInvarianceAndConvexity) {
  std::mt19937_64 rng(2);
  const auto f = himerge::testing::random_checkpoint(rng, 2, 20);
  const auto a = himerge::testing::perturbed(f, rng, 0.5f), b = himerge::testing::perturbed(f, rng, 0.5f);
  const cref ab[] = {a, b}, ba[] = {b, a};
  const auto m1 = weighted_average_merge(ab, {{0.25, 0.75}});
  EXPECT_EQ(m1, weighted_average_merge(ba, {{0.75, 0.25}}));
  for (const auto& [name, rec] : m1.tensors()) {
    const auto va = a.at(name).to_f32(), vb = b.at(name).to_f32(), vm = rec.to_f32();
    for (std::size_t i = 0; i < vm.size(); ++i) {
      EXPECT_GE(vm[i], std::min(va[i], vb[i]));
      EXPECT_LE(vm[i], std::max(va[i], vb[i]));
    }
  }
}

TEST(TaskArithmetic, Examples) {
  const auto base = single({0});
  auto da = zero_delta_like(base, fingerprint(base)), db = da;
  da.values = {1};
  db.values = {-1};
  const delta_vector* ds[] = {&da, &db};
  EXPECT_EQ(delta_weighted_merge(base, ds, {{0.5, 0.5}}).at("w").to_f32(), std::vector<float>({0}));

  const delta_vector* one[] = {&da};
  EXPECT_EQ(delta_weighted_merge(base, one, {{1.0}}), apply_delta(base, da));

  const auto z = zero_delta_like(base, fingerprint(base));
  const delta_vector* zs[] = {&z, &z};
  EXPECT_EQ(delta_weighted_merge(base, zs, {{0.3, 2.0}}), base);
  EXPECT_THROW(delta_weighted_merge(base, zs, {{0.0, 0.0}}), usage_error);
}

TEST(TaskArithmetic, PermutationInvariance) {
  std::mt19937_64 rng(4);
  const auto f = himerge::testing::random_checkpoint(rng, 3, 10);
  const auto da = compute_delta(himerge::testing::perturbed(f, rng, 0.2f), f, "A");
  const auto db = compute_delta(himerge::testing::perturbed(f, rng, 0.2f), f, "B");
  const delta_vector* ab[] = {&da, &db};
  const delta_vector* ba[] = {&db, &da};
  EXPECT_EQ(delta_weighted_merge(f, ab, {{0.4, 0.9}}), delta_weighted_merge(f, ba, {{0.9, 0.4}}));
}

TEST(Equivalence, SoupsEqualsTaskArithmeticUnderConvexWeights) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int i = 0; i < 10; ++i) {
    const auto f = himerge::testing::random_checkpoint(rng, 2, 40);
    const auto a = himerge::testing::perturbed(f, rng, 0.3f), b = himerge::testing::perturbed(f, rng, 0.3f);
    const double wa = u(rng);
    const merge_weights w{{wa, 1.0 - wa}};
    const cref ms[] = {a, b};
    const auto soup = weighted_average_merge(ms, w);
    const auto da = compute_delta(a, f, "A"), db = compute_delta(b, f, "B");
    const delta_vector* ds[] = {&da, &db};
    const auto arith = delta_weighted_merge(f, ds, w);
    for (const auto& [name, rec] : soup.tensors()) {
      const auto x = rec.to_f32(), y = arith.at(name).to_f32();
      for (std::size_t j = 0; j < x.size(); ++j) EXPECT_LE(std::abs(x[j] - y[j]), 1e-6f);
    }
  }
}

TEST(AssembleFinal, Cases) {
  std::mt19937_64 rng(8);
  const auto f = himerge::testing::random_checkpoint(rng, 2, 12);
  const auto z = zero_delta_like(f, fingerprint(f));
  EXPECT_EQ(assemble_final(f, z, z), f);
  const auto da = compute_delta(himerge::testing::perturbed(f, rng, 0.2f), f, "A");
  const auto db = compute_delta(himerge::testing::perturbed(f, rng, 0.2f), f, "B");
  EXPECT_EQ(assemble_final(f, da, z), apply_delta(f, da));
  const delta_vector* ds[] = {&da, &db};
  EXPECT_EQ(assemble_final(f, da, db), delta_weighted_merge(f, ds, {{1.0, 1.0}}));
}

TEST(AssembleFinal, FingerprintMismatch) {
  const auto f = single({1});
  const auto other = single({2});
  const auto d = zero_delta_like(other, fingerprint(other));
  EXPECT_THROW(assemble_final(f, d, d), data_error);
}
