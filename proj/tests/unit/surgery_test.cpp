#include <gtest/gtest.h>

#include <cmath>

#include "clipad/numerics/ops.hpp"
#include "clipad/surgery/surgery.hpp"
#include "test_support.hpp"

namespace clipad::surgery {
namespace {

using numerics::Rng;
using testing::random_tensor;
using testing::tiny_config;

rvs::ClassProbabilities uniform_s(std::size_t n) {
  return rvs::ClassProbabilities{std::vector<double>(n, 1.0 / static_cast<double>(n))};
}

/// Surgery layer with identity value/output maps and no norm.
struct IdentityLayer {
  backbone::LayerNormWeights ln;
  Tensor wv, bv, wo, bo;
  explicit IdentityLayer(std::size_t width) : wv({width, width}), bv({width}), wo({width, width}), bo({width}) {
    ln.weight = Tensor({width}, 1.0f);
    ln.bias = Tensor({width});
    for (std::size_t i = 0; i < width; ++i) {
      wv(i, i) = 1.0f;
      wo(i, i) = 1.0f;
    }
  }
  SurgeryLayer layer() const { return {&ln, &wv, &bv, &wo, &bo}; }
};

TEST(VvAttention, SingleTokenAttendsToItself) {
  const auto w = backbone::init_weights(tiny_config(), 1);
  Rng rng(1);
  const Tensor x = random_tensor(rng, {1, 16});
  const auto layer = SurgeryLayer::borrow(w.layers[0]);
  const Tensor out = vv_attention(x, layer, 2);
  const Tensor normed = numerics::layer_norm(x, w.layers[0].ln1.weight.data(), w.layers[0].ln1.bias.data());
  Tensor v = numerics::matmul(normed, w.layers[0].attn.wv);
  numerics::add_row_bias(v, w.layers[0].attn.bv.data());
  Tensor proj = numerics::matmul(v, w.layers[0].attn.wo);
  numerics::add_row_bias(proj, w.layers[0].attn.bo.data());
  for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(out[c], x[c] + proj[c], 1e-5);
}

TEST(VvAttention, OrthonormalRowsSelfWeight) {
  const Tensor v({2, 2}, {1, 0, 0, 1});
  const auto p = vv_attention_probabilities(v, 2, true);
  // Two heads of width 1: each head sees values (1, 0) or (0, 1).
  const auto q = vv_attention_probabilities(v, 1, false);
  EXPECT_NEAR(q[0](0, 0), std::exp(1.0) / (std::exp(1.0) + 1.0), 1e-6);
  EXPECT_NEAR(q[0](1, 1), 0.7311, 1e-4);
  EXPECT_EQ(p.size(), 2u);
}

TEST(VvAttention, SelfWeightIsRowMaximumForUnitRows) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t m = 2 + rng.below(31);
    const Tensor v = testing::random_unit_rows(rng, m, 8);
    const auto p = vv_attention_probabilities(v, 1, false)[0];
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < m; ++c) {
        if (c != r) EXPECT_GT(p(r, r), p(r, c)) << "seed " << seed;
      }
    }
  }
}

TEST(VvAttention, PermutationEquivariant) {
  const auto w = backbone::init_weights(tiny_config(), 2);
  Rng rng(2);
  const Tensor x = random_tensor(rng, {7, 16});
  std::vector<std::size_t> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  Tensor xp(x.shape());
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t c = 0; c < 16; ++c) xp(r, c) = x(perm[r], c);
  const auto layer = SurgeryLayer::borrow(w.layers[1]);
  const Tensor a = vv_attention(x, layer, 2);
  const Tensor b = vv_attention(xp, layer, 2);
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(b(r, c), a(perm[r], c), 1e-5);
}

TEST(DualPath, OriginalStreamUntouched) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto w = backbone::init_weights(tiny_config(), seed);
    Rng rng(seed);
    const Tensor image = backbone::preprocess(testing::random_image(rng, 32, 32), w.config, w.preprocessing);
    const auto plain = backbone::forward_original(image, w);
    const auto dual = forward_dual_path(image, w);
    EXPECT_EQ(plain.stage_outputs, dual.original_stages);
    EXPECT_EQ(plain.class_embedding, dual.class_embedding);
    ASSERT_EQ(dual.surgery_stages.size(), 2u);
  }
}

TEST(DualPath, SingleLayerBlockTrace) {
  const auto w = backbone::init_weights(tiny_config(), 3);
  Rng rng(3);
  const Tensor x = random_tensor(rng, {5, 16});
  const auto layer = SurgeryLayer::borrow(w.layers[0]);
  const auto state = dual_path_block(x, std::span(w.layers).subspan(0, 1), std::span(&layer, 1), 2);
  // F_n^0 = arch(X), F_n^1 = F_n^0 + arch(F_o^0) with F_o^0 = X.
  const Tensor arch = vv_attention(x, layer, 2);
  for (std::size_t i = 0; i < arch.size(); ++i) EXPECT_FLOAT_EQ(state.surgery[i], arch[i] + arch[i]);
  EXPECT_EQ(state.original, backbone::run_layer(x, w.layers[0], 2));
}

TEST(DualPath, ZeroedSurgeryWeightsSumResiduals) {
  const auto w = backbone::init_weights(tiny_config(), 4);
  Rng rng(4);
  const Tensor x = random_tensor(rng, {6, 16});
  backbone::LayerNormWeights ln{Tensor({16}, 1.0f), Tensor({16})};
  const Tensor zero_w({16, 16}), zero_b({16});
  const SurgeryLayer zero{&ln, &zero_w, &zero_b, &zero_w, &zero_b};
  const std::vector<SurgeryLayer> layers{zero, zero};
  const auto state = dual_path_block(x, std::span(w.layers).subspan(0, 2), layers, 2);
  // arch reduces to the identity, so F_n^2 = X + X + F_o^1.
  const Tensor f1 = backbone::run_layer(x, w.layers[0], 2);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(state.surgery[i], 2 * x[i] + f1[i], 1e-5);
}

TEST(DualPath, LayerCountMismatchRejected) {
  const auto w = backbone::init_weights(tiny_config(), 4);
  const auto layer = SurgeryLayer::borrow(w.layers[0]);
  EXPECT_THROW(dual_path_block(Tensor({2, 16}), std::span(w.layers).subspan(0, 2), std::span(&layer, 1), 2),
               ValidationError);
}

TEST(DualPath, IdentityLayersKeepWidth) {
  IdentityLayer id(4);
  const Tensor x({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  SurgeryOptions opts;
  opts.pre_norm = false;
  const Tensor out = vv_attention(x, id.layer(), 1, opts);
  EXPECT_EQ(out.shape(), x.shape());
  // softmax([1, 0] / 2) on each row: self weight e^0.5 / (e^0.5 + 1).
  const double self = std::exp(0.5) / (std::exp(0.5) + 1.0);
  EXPECT_NEAR(out(0, 0), 1.0 + self, 1e-6);
  EXPECT_NEAR(out(0, 1), 1.0 - self, 1e-6);
}

TEST(FeatureSurgery, HandComputed) {
  const Tensor f({1, 2}, {1, 0});
  const Tensor t({2, 2}, {1, 0, 0, 1});
  const Tensor p = feature_surgery(f, t, uniform_s(2));
  EXPECT_NEAR(p(0, 0), 0.5, 1e-7);
  EXPECT_NEAR(p(0, 1), -0.5, 1e-7);
}

TEST(FeatureSurgery, SingleClassIsZero) {
  Rng rng(5);
  const Tensor f = testing::random_unit_rows(rng, 9, 6);
  const Tensor t = testing::random_unit_rows(rng, 1, 6);
  const Tensor p = feature_surgery(f, t, rvs::ClassProbabilities{{1.0}});
  for (float v : p.values()) EXPECT_LT(std::abs(v), 1e-6);
}

TEST(FeatureSurgery, IdenticalClassesAreZero) {
  Rng rng(6);
  const Tensor f = testing::random_unit_rows(rng, 9, 6);
  const Tensor row = testing::random_unit_rows(rng, 1, 6);
  Tensor t({3, 6});
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 6; ++c) t(n, c) = row(0, c);
  const Tensor p = feature_surgery(f, t, uniform_s(3));
  for (float v : p.values()) EXPECT_LT(std::abs(v), 1e-6);
}

TEST(FeatureSurgery, UniformWeightsRemoveCommonComponent) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const std::size_t n = 2 + rng.below(4);
    const Tensor f = testing::random_unit_rows(rng, 7, 5);
    const Tensor t = testing::random_unit_rows(rng, n, 5);
    const Tensor p = feature_surgery(f, t, uniform_s(n));
    for (std::size_t l = 0; l < 7; ++l) {
      double sum = 0.0;
      for (std::size_t k = 0; k < n; ++k) sum += p(l, k);
      EXPECT_NEAR(sum, 0.0, 1e-5);
    }
  }
}

TEST(FeatureSurgery, DimensionMismatchRejected) {
  EXPECT_THROW(feature_surgery(Tensor({2, 3}), Tensor({2, 4}), uniform_s(2)), DimensionError);
  EXPECT_THROW(feature_surgery(Tensor({2, 3}), Tensor({2, 3}), uniform_s(3)), DimensionError);
}

}  // namespace
}  // namespace clipad::surgery
