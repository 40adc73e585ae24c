#include <gtest/gtest.h>

#include <cmath>

#include "clipad/sdp/sdp_plus.hpp"
#include "test_support.hpp"
#include "toy_problem.hpp"

namespace clipad::sdp {
namespace {

using numerics::Rng;
using testing::TempDir;

rvs::RepresentativePair axis_pair() {
  rvs::RepresentativePair pair;
  pair.t_normal = Tensor({2}, {1, 0});
  pair.t_abnormal = Tensor({2}, {0, 1});
  return pair;
}

StageProjection identity_projection(std::size_t n) {
  StageProjection p{TensorD({n, n}), TensorD({n})};
  for (std::size_t i = 0; i < n; ++i) p.weight(i, i) = 1.0;
  return p;
}

TEST(MappedMap, IdenticalTextVectorsGiveHalfPerStage) {
  Rng rng(1);
  const std::vector<Tensor> tokens{testing::random_tensor(rng, {9, 5}), testing::random_tensor(rng, {9, 5}),
                                   testing::random_tensor(rng, {9, 5})};
  rvs::RepresentativePair pair;
  pair.t_normal = testing::unit_vector(rng, 3);
  pair.t_abnormal = pair.t_normal;
  const auto proj = init_projections([] {
    backbone::ModelConfig c;
    c.width = 5;
    c.embed_dim = 3;
    c.stages = 3;
    return c;
  }(), 2);
  const TensorD m = mapped_anomaly_map(tokens, proj, pair);
  EXPECT_EQ(m.shape(), (numerics::Shape{3, 3}));
  for (double v : m.values()) EXPECT_DOUBLE_EQ(v, 1.5);
}

TEST(MappedMap, ZeroProjectionFlagsRowsAndGivesHalf) {
  Rng rng(2);
  const Tensor tokens = testing::random_tensor(rng, {4, 3});
  const StageProjection zero{TensorD({3, 2}), TensorD({2})};
  const auto act = map_stage(tokens, zero, axis_pair().stacked().cast<double>(), 0.01);
  EXPECT_EQ(act.zero_rows, 4u);
  for (double p : act.probability) EXPECT_EQ(p, 0.5);
}

TEST(MappedMap, HandComputedTwoTokens) {
  const Tensor tokens({2, 2}, {1, 0, 0, 1});
  const auto act = map_stage(tokens, identity_projection(2), axis_pair().stacked().cast<double>(), 1.0);
  EXPECT_NEAR(act.probability[0], 1.0 / (1.0 + std::exp(1.0)), 1e-12);
  EXPECT_NEAR(act.probability[1], std::exp(1.0) / (1.0 + std::exp(1.0)), 1e-12);
}

TEST(MappedMap, StageCountMismatchRejected) {
  const std::vector<Tensor> tokens{Tensor({4, 2})};
  EXPECT_THROW(mapped_anomaly_map(tokens, Projections{}, axis_pair()), DimensionError);
}

TEST(Combine, SumIdentityAndCommutativity) {
  Rng rng(3);
  const Tensor m = testing::random_tensor(rng, {3, 3});
  const Tensor ft = testing::random_tensor(rng, {3, 3});
  EXPECT_EQ(combine(m, Tensor({3, 3})), m);
  EXPECT_EQ(combine(m, ft), combine(ft, m));
  EXPECT_FLOAT_EQ(combine(m, ft)(1, 2), m(1, 2) + ft(1, 2));
  EXPECT_THROW(combine(m, Tensor({2, 3})), DimensionError);
}

TEST(Loss, PerfectPredictionHasNoDice) {
  const TensorD g({2, 2}, {1, 0, 0, 1});
  EXPECT_NEAR(loss(g, g).dice, 0.0, 1e-6);
}

TEST(Loss, AlphaOneIgnoresBackground) {
  Rng rng(4);
  const TensorD pred = testing::random_tensor_d(rng, {4, 4}, 0.01, 0.99);
  EXPECT_DOUBLE_EQ(loss(pred, TensorD({4, 4})).focal, 0.0);
}

TEST(Loss, HalfPredictionOnForeground) {
  const auto v = loss(TensorD({3, 3}, 0.5), TensorD({3, 3}, 1.0));
  EXPECT_NEAR(v.focal, 0.25 * std::log(2.0), 1e-12);
  EXPECT_NEAR(v.focal, 0.17329, 1e-5);
}

TEST(Loss, NonBinaryMaskRejected) {
  EXPECT_THROW(loss(TensorD({2}, 0.5), TensorD({2}, {0.0, 0.5})), ValidationError);
  EXPECT_THROW(loss(TensorD({2}, 0.5), TensorD({3}, 0.0)), DimensionError);
}

TEST(Loss, RangesOnRandomInstances) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const TensorD pred = testing::random_tensor_d(rng, {5, 5}, 0.0, 1.0);
    TensorD mask({5, 5});
    for (double& v : mask.data()) v = rng.below(2);
    const auto v = loss(pred, mask);
    EXPECT_GE(v.focal, 0.0);
    EXPECT_GE(v.dice, 0.0);
    EXPECT_LT(v.dice, 1.0);
    EXPECT_DOUBLE_EQ(v.total, v.focal + v.dice);
  }
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const TensorD pred = testing::random_tensor_d(rng, {4, 4}, 0.05, 0.95);
    TensorD mask({4, 4});
    for (double& v : mask.data()) v = rng.below(2);
    const std::function<double(const TensorD&)> f = [&](const TensorD& p) { return loss(p, mask).total; };
    const auto r = numerics::compare_gradients(loss(pred, mask).grad, numerics::finite_diff_grad(f, pred, 1e-6), 1e-5);
    EXPECT_EQ(r.failures, 0u) << "seed " << seed;
  }
}

TEST(Loss, ClampedEntriesHaveZeroGradient) {
  const auto v = loss(TensorD({2}, {0.0, 1.0}), TensorD({2}, {1.0, 0.0}));
  EXPECT_EQ(v.grad[0], 0.0);
  EXPECT_EQ(v.grad[1], 0.0);
  EXPECT_TRUE(std::isfinite(v.total));
}

TEST(ProjectionGradient, MatchesFiniteDifferencesOnToyModel) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto p = testing::toy_problem(seed, 6, 4, 0.1);
    const auto r = testing::check_projection_gradient(p, 1e-4, 1e-3);
    EXPECT_EQ(r.failures, 0u) << "seed " << seed << " worst " << r.max_relative_error;
  }
}

TEST(ProjectionGradient, MatchesAtDefaultTemperatureWithFinerStep) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto p = testing::toy_problem(seed, 6, 4, 0.01);
    const auto r = testing::check_projection_gradient(p, 1e-5, 1e-3);
    EXPECT_EQ(r.failures, 0u) << "seed " << seed << " worst " << r.max_relative_error;
  }
}

TEST(Projections, InitAndRoundTrip) {
  TempDir dir;
  const auto cfg = testing::tiny_config();
  const auto proj = init_projections(cfg, 5);
  ASSERT_EQ(proj.size(), cfg.stages);
  for (const auto& p : proj) {
    EXPECT_EQ(p.weight.shape(), (numerics::Shape{cfg.width, cfg.embed_dim}));
    for (double v : p.weight.values()) EXPECT_LE(std::abs(v), 1.0 / static_cast<double>(cfg.width));
    for (double v : p.bias.values()) EXPECT_EQ(v, 0.0);
  }
  EXPECT_EQ(init_projections(cfg, 5), proj);
  save_projections(proj, dir / "p.ntc");
  EXPECT_EQ(load_projections(dir / "p.ntc"), proj);
}

TEST(Projections, ShapeMismatchRejected) {
  auto c = to_container(init_projections(testing::tiny_config(), 5));
  c.put("proj.1.bias", TensorD({3}));
  EXPECT_THROW(projections_from_container(c), ShapeMismatchError);
  EXPECT_THROW(projections_from_container(backbone::TensorContainer{}), MissingTensorError);
}

std::vector<TrainSample> separable_samples(std::size_t count) {
  // Stage tokens carry the mask in their first channel, so a projection that
  // reads channel 0 separates defect patches from the rest.
  std::vector<TrainSample> out;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(100 + i);
    TrainSample s;
    s.mask = TensorD({8, 8});
    const std::size_t gy = rng.below(3), gx = rng.below(3);
    Tensor tokens = testing::random_tensor(rng, {16, 4}, -0.2, 0.2);
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 4; ++x) {
        const bool defect = i % 2 == 0 && y >= gy && y < gy + 2 && x >= gx && x < gx + 2;
        tokens(y * 4 + x, 0) = defect ? 1.0f : -1.0f;
      }
    }
    if (i % 2 == 0) {
      for (std::size_t y = 2 * gy + 1; y < 2 * gy + 4; ++y)
        for (std::size_t x = 2 * gx + 1; x < 2 * gx + 4; ++x) s.mask(y, x) = 1.0;
    }
    s.stage_tokens = {tokens, tokens};
    out.push_back(std::move(s));
  }
  return out;
}

Projections small_projections(std::uint64_t seed) {
  backbone::ModelConfig c;
  c.width = 4;
  c.embed_dim = 2;
  c.stages = 2;
  return init_projections(c, seed);
}

TEST(Train, ZeroLearningRateKeepsProjections) {
  const auto samples = separable_samples(6);
  const auto initial = small_projections(1);
  TrainConfig tc;
  tc.learning_rate = 0.0;
  tc.epochs = 3;
  tc.batch_size = 4;
  const auto r = train(samples, initial, axis_pair(), tc);
  EXPECT_EQ(r.projections, initial);
  ASSERT_EQ(r.epoch_loss.size(), 3u);
  // Batches are reshuffled each epoch, so only the summation order changes.
  EXPECT_NEAR(r.epoch_loss[1], r.epoch_loss[0], 1e-12);
  EXPECT_NEAR(r.epoch_loss[2], r.epoch_loss[0], 1e-12);
}

TEST(Train, DeterministicAndSnapshotsPerEpoch) {
  const auto samples = separable_samples(7);
  TrainConfig tc;
  tc.learning_rate = 1e-2;
  tc.epochs = 2;
  tc.batch_size = 3;
  const auto a = train(samples, small_projections(2), axis_pair(), tc);
  const auto b = train(samples, small_projections(2), axis_pair(), tc);
  EXPECT_EQ(a.projections, b.projections);
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  ASSERT_EQ(a.snapshots.size(), 2u);
  EXPECT_EQ(a.snapshots.back(), a.projections);
}

TEST(Train, LossDecreasesOnSeparableData) {
  const auto samples = separable_samples(16);
  TrainConfig tc;
  tc.learning_rate = 1e-2;
  tc.epochs = 8;
  tc.batch_size = 4;
  tc.temperature = 0.1;
  const auto r = train(samples, small_projections(3), axis_pair(), tc);
  for (std::size_t e = 1; e < r.epoch_loss.size(); ++e) EXPECT_LE(r.epoch_loss[e], r.epoch_loss[e - 1] * 1.05);
  EXPECT_LT(r.epoch_loss.back(), r.epoch_loss.front());
}

TEST(Train, RejectsBadInput) {
  TrainConfig tc;
  EXPECT_THROW(train({}, small_projections(1), axis_pair(), tc), ValidationError);
  tc.epochs = 0;
  EXPECT_THROW(train(separable_samples(2), small_projections(1), axis_pair(), tc), ValidationError);
}

TEST(Train, DefaultsFollowSettings) {
  const TrainConfig tc;
  EXPECT_EQ(tc.learning_rate, 1e-4);
  EXPECT_EQ(tc.epochs, 5u);
  EXPECT_EQ(tc.batch_size, 8u);
  const LossConfig lc;
  EXPECT_EQ(lc.alpha, 1.0);
  EXPECT_EQ(lc.gamma, 2.0);
  EXPECT_EQ(lc.epsilon, 1.0);
}

}  // namespace
}  // namespace clipad::sdp
