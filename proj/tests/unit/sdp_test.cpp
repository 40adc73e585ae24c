#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "clipad/numerics/ops.hpp"
#include "clipad/rvs/rvs.hpp"
#include "clipad/sdp/sdp.hpp"
#include "test_support.hpp"

namespace clipad::sdp {
namespace {

using numerics::Rng;
using numerics::TensorD;
using testing::tiny_config;

struct Fixture {
  EncoderWeights weights = backbone::init_weights(tiny_config(), 11);
  Tensor image;
  rvs::RepresentativePair pair;
  explicit Fixture(std::uint64_t seed) {
    Rng rng(seed);
    image = backbone::preprocess(testing::random_image(rng, 32, 32), weights.config, weights.preprocessing);
    pair = testing::random_pair(rng, weights.config.embed_dim);
  }
};

TEST(Upsample, ConstantGridStaysConstant) {
  const Tensor grid({3, 3}, 0.25f);
  const Tensor out = upsample(grid, 7, 5);
  for (float v : out.values()) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Upsample, CheckerboardHandValues) {
  const TensorD grid({2, 2}, {1, 0, 0, 1});
  const TensorD out = upsample(grid, 4, 4);
  // Sample positions 0, 1/3, 2/3, 1 along each axis.
  const double expected[4][4] = {{1, 2.0 / 3, 1.0 / 3, 0},
                                 {2.0 / 3, 5.0 / 9, 4.0 / 9, 1.0 / 3},
                                 {1.0 / 3, 4.0 / 9, 5.0 / 9, 2.0 / 3},
                                 {0, 1.0 / 3, 2.0 / 3, 1}};
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) EXPECT_NEAR(out(y, x), expected[y][x], 1e-12);
}

TEST(Upsample, BoundedByInputRange) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor grid = testing::random_tensor(rng, {4, 4}, -2.0, 3.0);
    const Tensor out = upsample(grid, 13, 29);
    const auto [lo, hi] = std::minmax_element(grid.values().begin(), grid.values().end());
    for (float v : out.values()) {
      EXPECT_GE(v, *lo - 1e-6f);
      EXPECT_LE(v, *hi + 1e-6f);
    }
    EXPECT_FLOAT_EQ(out(0, 0), grid(0, 0));
    EXPECT_FLOAT_EQ(out(12, 28), grid(3, 3));
  }
}

TEST(Upsample, BackwardIsTranspose) {
  Rng rng(3);
  const TensorD x = testing::random_tensor_d(rng, {4, 4});
  const TensorD y = testing::random_tensor_d(rng, {9, 11});
  const TensorD ux = upsample(x, 9, 11);
  const TensorD uty = upsample_backward(y, 4, 4);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < ux.size(); ++i) lhs += ux[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * uty[i];
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(GaussianSmooth, PreservesConstantsAndIsOffForZeroSigma) {
  const Tensor flat({6, 6}, 2.0f);
  const Tensor smooth = gaussian_smooth(flat, 1.5);
  for (float v : smooth.values()) EXPECT_NEAR(v, 2.0f, 1e-5);
  Tensor spike({9, 9});
  spike(4, 4) = 1.0f;
  const Tensor blurred = gaussian_smooth(spike, 1.0);
  EXPECT_LT(blurred(4, 4), 1.0f);
  EXPECT_GT(blurred(4, 5), 0.0f);
  EXPECT_FLOAT_EQ(blurred(4, 5), blurred(5, 4));
}

TEST(AnomalyScore, Extremes) {
  EXPECT_DOUBLE_EQ(anomaly_score(rvs::ClassProbabilities{{0.5, 0.5}}, 0.0), 0.5);
  EXPECT_DOUBLE_EQ(anomaly_score(rvs::ClassProbabilities{{0.0, 1.0}}, 1.0), 2.0);
}

TEST(AnomalyScore, MonotoneInBothInputs) {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const double a = rng.uniform(), m = rng.uniform(), d = rng.uniform(0.0, 0.5);
    const double base = anomaly_score(rvs::ClassProbabilities{{1 - a, a}}, m);
    EXPECT_LE(base, anomaly_score(rvs::ClassProbabilities{{1 - a, a}}, m + d));
    EXPECT_LE(base, anomaly_score(rvs::ClassProbabilities{{std::max(0.0, 1 - a - d), std::min(1.0, a + d)}}, m));
  }
}

TEST(FuseScores, MatchesBruteForceRecomputation) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t n = 2 + rng.below(8);
    std::vector<double> s(n);
    std::vector<Tensor> maps;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.uniform();
      maps.push_back(testing::random_tensor(rng, {5, 6}, -1.0, rng.uniform(0.0, 4.0)));
    }
    double lo = 1e300, hi = -1e300;
    for (const auto& m : maps)
      for (float v : m.values()) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
      }
    const auto fused = fuse_scores(s, maps);
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -1e300;
      for (float v : maps[i].values()) mx = std::max(mx, (static_cast<double>(v) - lo) / (hi - lo));
      EXPECT_NEAR(fused[i], s[i] + mx, 1e-9);
    }
  }
  const auto flat = fuse_scores({0.3, 0.6}, {Tensor({2, 2}, 1.0f), Tensor({2, 2}, 1.0f)});
  EXPECT_DOUBLE_EQ(flat[0], 0.3);
  EXPECT_DOUBLE_EQ(flat[1], 0.6);
}

TEST(Sdp, IdenticalTextVectorsGiveZeroMap) {
  Fixture f(1);
  f.pair.t_abnormal = f.pair.t_normal;
  const auto r = sdp_forward(f.image, f.weights, f.pair);
  for (float v : r.map.grid.values()) EXPECT_LT(std::abs(v), 1e-6);
}

TEST(Sdp, MapIsSumOfStageMaps) {
  Fixture f(2);
  const auto r = sdp_forward(f.image, f.weights, f.pair);
  ASSERT_EQ(r.stage_maps.size(), f.weights.config.stages);
  EXPECT_EQ(r.map.grid.shape(), (numerics::Shape{4, 4}));
  EXPECT_EQ(r.map.pixel.shape(), (numerics::Shape{32, 32}));
  for (std::size_t i = 0; i < r.map.grid.size(); ++i) {
    double sum = 0.0;
    for (const auto& m : r.stage_maps) sum += m[i];
    EXPECT_NEAR(r.map.grid[i], sum, 1e-6);
  }
}

TEST(Sdp, SingleStageEqualsFeatureSurgeryOfThatStage) {
  Fixture f(3);
  SdpOptions opts;
  opts.stages = {1};
  const auto r = sdp_forward(f.image, f.weights, f.pair, opts);
  const auto fwd = surgery::forward_dual_path(f.image, f.weights);
  const auto s = rvs::classify(fwd.class_embedding, f.pair, opts.temperature);
  const Tensor expected = stage_map(fwd.surgery_stages[1], f.weights, f.pair.stacked(), s);
  EXPECT_EQ(r.map.grid, expected);
  EXPECT_EQ(r.stage_maps.size(), 1u);
  opts.stages = {5};
  EXPECT_THROW(sdp_forward(f.image, f.weights, f.pair, opts), ValidationError);
}

TEST(Sdp, DefaultConfigSumsFourStageMaps) {
  const auto weights = backbone::init_weights(backbone::ModelConfig{}, 0);
  Rng rng(7);
  const Tensor image = backbone::preprocess(testing::random_image(rng, 240, 240), weights.config, weights.preprocessing);
  const auto r = sdp_forward(image, weights, testing::random_pair(rng, weights.config.embed_dim));
  EXPECT_EQ(r.stage_maps.size(), 4u);
  EXPECT_EQ(r.map.grid.shape(), (numerics::Shape{15, 15}));
  EXPECT_EQ(r.map.pixel.shape(), (numerics::Shape{240, 240}));
}

TEST(Sdp, Deterministic) {
  Fixture f(4);
  const auto a = sdp_forward(f.image, f.weights, f.pair);
  const auto b = sdp_forward(f.image, f.weights, f.pair);
  EXPECT_EQ(a.map.pixel, b.map.pixel);
  EXPECT_EQ(a.map.image_score, b.map.image_score);
}

TEST(Baseline, IdenticalTextVectorsGiveHalf) {
  Fixture f(5);
  f.pair.t_abnormal = f.pair.t_normal;
  const auto m = direct_similarity_baseline(f.image, f.weights, f.pair);
  EXPECT_EQ(m.grid.shape(), (numerics::Shape{4, 4}));
  for (float v : m.grid.values()) EXPECT_FLOAT_EQ(v, 0.5f);
}

TEST(Baseline, ValuesAreProbabilities) {
  Fixture f(6);
  const auto m = direct_similarity_baseline(f.image, f.weights, f.pair);
  for (float v : m.grid.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

}  // namespace
}  // namespace clipad::sdp
