#include <gtest/gtest.h>

#include "model_fixture.hpp"

using namespace dgn;
using namespace dgn::testing;

namespace {

struct ReconFixture {
  StageConfig stages = narrow_stages();
  ParameterStore store;
  Rng rng{31};
  ReconstructionWeights weights;
  ReconFixture() { weights = ReconstructionWeights::create(store, stages, 4, 1, rng); }
};

}  // namespace

TEST(FuseUpTest, ZeroDeeperMapLeavesCurrentUnchanged) {
  ReconFixture fx;
  Rng rng(1);
  const FeatureMap deeper{Tensor::zeros({16, 16}), 4, 4};
  const FeatureMap current{random_tensor({64, 8}, rng), 8, 8};
  EXPECT_EQ(values_of(fuse_up(deeper, current, fx.weights.up[0])), values_of(current.tokens));
}

TEST(FuseUpTest, ConstantMapWithIdentityProjection) {
  ReconFixture fx;
  Rng rng(2);
  Linear& up = fx.weights.up[0];  // 16 -> 8
  fill(up.weight, 0);
  for (std::size_t c = 0; c < 8; ++c) up.weight.mutable_data()[c * 8 + c] = 1;
  std::vector<Real> v(16);
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-1, 1));
  std::vector<Real> tokens;
  for (int i = 0; i < 16; ++i) tokens.insert(tokens.end(), v.begin(), v.end());
  const FeatureMap deeper{Tensor::from({16, 16}, tokens), 4, 4};
  const FeatureMap current{random_tensor({64, 8}, rng), 8, 8};
  const Tensor fused = fuse_up(deeper, current, up);
  for (std::size_t t = 0; t < 64; ++t) {
    for (std::size_t c = 0; c < 8; ++c) {
      EXPECT_NEAR(fused.values()[t * 8 + c], current.tokens.values()[t * 8 + c] + v[c], 1e-12);
    }
  }
}

TEST(FuseUpTest, GridMismatchThrows) {
  ReconFixture fx;
  Rng rng(3);
  const FeatureMap deeper{random_tensor({9, 16}, rng), 3, 3};
  const FeatureMap current{random_tensor({64, 8}, rng), 8, 8};
  EXPECT_THROW(fuse_up(deeper, current, fx.weights.up[0]), DimensionError);
}

TEST(MrcaTest, SingleQueryTokenForcesUnitWeightsAndIdenticalRows) {
  ReconFixture fx;
  Rng rng(4);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t D = fx.stages.dims[i];
    const auto a = mrca(random_tensor({25, D}, rng), random_tensor({1, D}, rng), fx.weights.attend[i]);
    for (Real w : a.trace.weights) EXPECT_EQ(w, 1.0);
    for (std::size_t r = 1; r < 25; ++r) {
      for (std::size_t c = 0; c < D; ++c) EXPECT_NEAR(a.update.values()[r * D + c], a.update.values()[c], 1e-6);
    }
  }
}

TEST(MrcaTest, ZeroOutputProjectionGivesLayerNorm) {
  ReconFixture fx;
  Rng rng(5);
  CrossAttentionWeights& w = fx.weights.attend[1];
  fill(w.out.weight, 0);
  fill(w.out.bias, 0);
  const Tensor f = random_tensor({16, 16}, rng);
  EXPECT_EQ(values_of(mrca(f, random_tensor({3, 16}, rng), w).output), values_of(w.norm(f)));
}

TEST(MrcaTest, TwoEqualKeysSplitEvenly) {
  ReconFixture fx;
  Rng rng(6);
  const Tensor q = random_tensor({1, 32}, rng);
  std::vector<Real> two(q.values().begin(), q.values().end());
  two.insert(two.end(), q.values().begin(), q.values().end());
  const auto a = mrca(random_tensor({12, 32}, rng), Tensor::from({2, 32}, two), fx.weights.attend[2]);
  for (Real w : a.trace.weights) EXPECT_EQ(w, 0.5);
}

TEST(MrcaTest, GradientMatchesFiniteDifferences) {
  ReconFixture fx;
  Rng rng(7);
  Tensor f = tracked(random_tensor({6, 16}, rng));
  Tensor q = tracked(random_tensor({3, 16}, rng));
  const CrossAttentionWeights& w = fx.weights.attend[1];
  Tensor Wk = w.key.weight, Wv = w.value.weight;
  Wk.set_requires_grad(true);
  Wv.set_requires_grad(true);
  EXPECT_LT(check_gradients([&] { return project(mrca(f, q, w).output); }, {f, q, Wk, Wv}), 1e-4);
}

TEST(ReconstructionTest, GridsPreservedAndFinestAtStrideFour) {
  ReconFixture fx;
  Rng rng(8);
  const PyramidFeatures f = random_pyramid(fx.stages, 64, 96, rng);
  std::vector<Tensor> queries;
  for (std::size_t i = 0; i < 4; ++i) queries.push_back(random_tensor({1, fx.stages.dims[i]}, rng));
  const ReconstructionResult r = run_reconstruction(f, queries, fx.weights);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(r.refined[i].height, f.levels[i].height);
    EXPECT_EQ(r.refined[i].width, f.levels[i].width);
    EXPECT_EQ(r.refined[i].tokens.shape(), f.levels[i].tokens.shape());
  }
  EXPECT_EQ(r.refined[0].height, 16u);
  EXPECT_EQ(r.refined[0].width, 24u);
  // Top stage: no upsampling, the fused input is F_4 itself.
  EXPECT_TRUE(r.fused[3].same(f.levels[3].tokens));
}

TEST(ReconstructionTest, GradientReachesInitialQueryThroughFullChain) {
  DualGazeNet net(narrow_model(), 9);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(total_loss(net.logits(random_image(32, 32, 10)), random_mask(32, 32, 11)).objective);
  }
  double norm = 0;
  for (Real g : net.query_module().initial.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}
