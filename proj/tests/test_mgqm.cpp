#include <gtest/gtest.h>

#include "model_fixture.hpp"

using namespace dgn;
using namespace dgn::testing;

namespace {

struct QueryFixture {
  StageConfig stages = narrow_stages();
  ParameterStore store;
  Rng rng{21};
  QueryModuleWeights weights;
  explicit QueryFixture(std::size_t k = 1) { weights = QueryModuleWeights::create(store, stages, k, rng); }
};

Tensor rows_permuted(const Tensor& t, const std::vector<std::size_t>& perm) {
  const std::size_t D = t.size(1);
  std::vector<Real> out;
  for (auto p : perm) out.insert(out.end(), t.values().begin() + p * D, t.values().begin() + (p + 1) * D);
  return Tensor::from(t.shape(), std::move(out));
}

}  // namespace

TEST(PropagateQueryTest, TopStageReturnsInitialQuery) {
  QueryFixture fx;
  const Tensor q = propagate_query(Tensor(), 4, fx.weights);
  EXPECT_TRUE(q.same(fx.weights.initial));
}

TEST(PropagateQueryTest, ZeroWeightsGiveZeroAndWidthHalves) {
  QueryFixture fx(3);
  Rng rng(1);
  const Tensor deeper = random_tensor({3, 64}, rng);
  const Tensor q = propagate_query(deeper, 3, fx.weights);
  EXPECT_EQ(q.shape(), (Shape{3, 32}));
  fill(fx.weights.adapt[2].weight, 0);
  fill(fx.weights.adapt[2].bias, 0);
  for (Real v : values_of(propagate_query(deeper, 3, fx.weights))) EXPECT_EQ(v, 0);
  EXPECT_THROW(propagate_query(deeper, 0, fx.weights), DimensionError);
  EXPECT_THROW(propagate_query(deeper, 5, fx.weights), DimensionError);
  EXPECT_THROW(propagate_query(random_tensor({3, 16}, rng), 3, fx.weights), DimensionError);
}

TEST(PropagateQueryTest, DefaultPyramidWidths) {
  ParameterStore store;
  Rng rng(2);
  const QueryModuleWeights w = QueryModuleWeights::create(store, StageConfig{}, 1, rng);
  EXPECT_EQ(w.initial.shape(), (Shape{1, 256}));
  EXPECT_EQ(propagate_query(w.initial, 3, w).shape(), (Shape{1, 128}));
}

TEST(MhcaTest, IdenticalTokensGiveUniformAttention) {
  QueryFixture fx(2);
  Rng rng(3);
  const CrossAttentionWeights& w = fx.weights.attend[1];  // stage 2: D=16, 2 heads
  const Tensor v = random_tensor({1, 16}, rng);
  std::vector<Real> rows;
  for (int i = 0; i < 10; ++i) rows.insert(rows.end(), v.values().begin(), v.values().end());
  const Tensor F = Tensor::from({10, 16}, rows);
  const auto a = mhca(random_tensor({2, 16}, rng), F, w);
  for (Real x : a.trace.weights) EXPECT_NEAR(x, 0.1, 1e-15);
  // The update is the projection of v for any pseudo-query.
  const auto b = mhca(random_tensor({2, 16}, rng), F, w);
  const Tensor expect = w.out(w.value(v));
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 16; ++c) {
      EXPECT_NEAR(a.update.values()[r * 16 + c], expect.values()[c], 1e-12);
      EXPECT_NEAR(b.update.values()[r * 16 + c], expect.values()[c], 1e-12);
    }
  }
}

TEST(MhcaTest, SingleKeyHasUnitWeight) {
  QueryFixture fx;
  Rng rng(4);
  const auto a = mhca(random_tensor({1, 64}, rng), random_tensor({1, 64}, rng), fx.weights.attend[3]);
  ASSERT_EQ(a.trace.weights.size(), 4u);  // 4 heads x 1 row x 1 key
  for (Real x : a.trace.weights) EXPECT_EQ(x, 1.0);
}

TEST(MhcaTest, KeyPermutationInvarianceIsBitExact) {
  QueryFixture fx(3);
  Rng rng(5);
  set_deterministic(true);
  const Tensor q = random_tensor({3, 32}, rng);
  const Tensor F = random_tensor({16, 32}, rng);
  std::vector<std::size_t> perm(16);
  for (std::size_t i = 0; i < 16; ++i) perm[i] = (i * 7 + 3) % 16;
  const auto a = mhca(q, F, fx.weights.attend[2]);
  const auto b = mhca(q, rows_permuted(F, perm), fx.weights.attend[2]);
  EXPECT_EQ(values_of(a.output), values_of(b.output));
}

TEST(MhcaTest, ZeroOutputProjectionGivesLayerNormOfInput) {
  QueryFixture fx(2);
  Rng rng(6);
  CrossAttentionWeights& w = fx.weights.attend[0];
  fill(w.out.weight, 0);
  fill(w.out.bias, 0);
  const Tensor q = random_tensor({2, 8}, rng);
  const auto a = mhca(q, random_tensor({64, 8}, rng), w);
  EXPECT_EQ(values_of(a.output), values_of(w.norm(q)));
}

TEST(MhcaTest, RowsSumToOneAndShapes) {
  QueryFixture fx(5);
  Rng rng(7);
  const auto a = mhca(random_tensor({5, 64}, rng), random_tensor({4, 64}, rng), fx.weights.attend[3]);
  EXPECT_EQ(a.output.shape(), (Shape{5, 64}));
  for (std::size_t h = 0; h < a.trace.heads; ++h) {
    for (std::size_t r = 0; r < a.trace.rows; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < a.trace.keys; ++k) s += a.trace.at(h, r, k);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(MhcaTest, NonIntegralHeadWidthIsConfigError) {
  ParameterStore store;
  Rng rng(8);
  EXPECT_THROW(CrossAttentionWeights::create(store, "x", 10, 3, rng), ConfigError);
  QueryFixture fx;
  EXPECT_THROW(mhca(random_tensor({1, 16}, rng), random_tensor({4, 32}, rng), fx.weights.attend[2]), DimensionError);
}

TEST(MhcaTest, GradientMatchesFiniteDifferences) {
  QueryFixture fx(2);
  Rng rng(9);
  Tensor q = tracked(random_tensor({2, 16}, rng));
  Tensor F = tracked(random_tensor({6, 16}, rng));
  const CrossAttentionWeights& w = fx.weights.attend[1];
  Tensor Wq = w.query.weight, Wo = w.out.weight;
  Wq.set_requires_grad(true);
  Wo.set_requires_grad(true);
  EXPECT_LT(check_gradients([&] { return project(mhca(q, F, w).output); }, {q, F, Wq, Wo}), 1e-4);
}

TEST(QueryCascadeTest, WidthsTopDownAndTraces) {
  QueryFixture fx(2);
  Rng rng(10);
  const PyramidFeatures f = random_pyramid(fx.stages, 64, 64, rng);
  const QueryCascade c = run_query_cascade(f, fx.weights);
  const std::size_t widths[] = {8, 16, 32, 64};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(c.queries[i].shape(), (Shape{2, widths[i]}));
    EXPECT_EQ(c.traces[i].keys, f.levels[i].count());
    EXPECT_EQ(c.traces[i].rows, 2u);
  }
  EXPECT_TRUE(c.pseudo[3].same(fx.weights.initial));
}

TEST(QueryCascadeTest, PartialCascadeStopsAtLowest) {
  StageConfig s = narrow_stages();
  ParameterStore store;
  Rng rng(11);
  const QueryModuleWeights w = QueryModuleWeights::create(store, s, 1, rng, 3);
  EXPECT_EQ(store.find("mgqm.mhca2.query.weight"), nullptr);
  const PyramidFeatures f = random_pyramid(s, 32, 32, rng);
  const QueryCascade c = run_query_cascade(f, w, 3);
  EXPECT_TRUE(c.queries[2].defined());
  EXPECT_FALSE(c.queries[1].defined());
  EXPECT_THROW(run_query_cascade(f, w, 1), DimensionError);
}
