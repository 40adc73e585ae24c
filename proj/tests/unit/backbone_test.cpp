#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "clipad/backbone/container.hpp"
#include "clipad/backbone/vit.hpp"
#include "clipad/numerics/ops.hpp"
#include "test_support.hpp"

namespace clipad::backbone {
namespace {

using numerics::Rng;
using testing::TempDir;
using testing::tiny_config;

std::vector<std::uint8_t> bytes_of(const EncoderWeights& w) { return serialize(to_container(w)); }

Tensor tiny_input(std::uint64_t seed, const EncoderWeights& w) {
  Rng rng(seed);
  const Image img = testing::random_image(rng, 40, 36);
  return preprocess(img, w.config, w.preprocessing);
}

TEST(ModelConfig, DefaultGeometry) {
  const ModelConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.patch_tokens(), 225u);
  EXPECT_EQ(cfg.tokens(), 226u);
  EXPECT_EQ(cfg.stages, 4u);
}

TEST(ModelConfig, InconsistentPartitionRejected) {
  ModelConfig cfg;
  cfg.layers = 11;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = ModelConfig{};
  cfg.patch_size = 7;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = ModelConfig{};
  cfg.heads = 5;
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(Container, RoundTripKeepsOrderAndDtype) {
  TensorContainer c;
  c.put("b", Tensor({2}, {1.5f, -2.0f}));
  c.put("a", TensorD({1, 2}, {0.1, 0.2}));
  c.put("b", Tensor({1}, {3.0f}));
  const auto back = deserialize(serialize(c));
  EXPECT_EQ(back.names(), (std::vector<std::string>{"b", "a"}));
  EXPECT_EQ(back.dtype("a"), DType::F64);
  EXPECT_EQ(back.f64("a"), c.f64("a"));
  EXPECT_EQ(back.f32("b"), Tensor({1}, {3.0f}));
  EXPECT_THROW(back.f32("a"), FormatError);
  EXPECT_THROW(back.f32("zzz"), MissingTensorError);
}

TEST(Container, CorruptFilesGiveDistinctErrors) {
  TensorContainer c;
  c.put("x", Tensor({3}, {1, 2, 3}));
  auto bytes = serialize(c);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize(bad_magic), BadMagicError);
  auto bad_version = bytes;
  bad_version[3] = '9';
  EXPECT_THROW(deserialize(bad_version), BadMagicError);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 2);
  EXPECT_THROW(deserialize(truncated), TruncatedFileError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(deserialize(trailing), FormatError);
}

TEST(Container, RequireChecksShape) {
  TensorContainer c;
  c.put("x", Tensor({2, 3}));
  EXPECT_NO_THROW(c.require("x", {2, 3}));
  EXPECT_THROW(c.require("x", {3, 2}), ShapeMismatchError);
  EXPECT_THROW(c.require("y", {1}), MissingTensorError);
}

TEST(Weights, SeededInitIsDeterministic) {
  EXPECT_EQ(bytes_of(init_weights(tiny_config(), 7)), bytes_of(init_weights(tiny_config(), 7)));
  EXPECT_NE(bytes_of(init_weights(tiny_config(), 7)), bytes_of(init_weights(tiny_config(), 8)));
}

TEST(Weights, SaveLoadIsBitwise) {
  TempDir dir;
  const auto w = init_weights(tiny_config(), 3);
  save_weights(w, dir / "m.ntc");
  const auto back = load_weights(dir / "m.ntc");
  EXPECT_EQ(back.config, w.config);
  EXPECT_EQ(bytes_of(back), bytes_of(w));
}

TEST(Weights, MissingProjectionIsNamed) {
  const auto w = init_weights(tiny_config(), 3);
  const TensorContainer full = to_container(w);
  TensorContainer c;
  for (const auto& [name, entry] : full.entries()) {
    if (name != "visual_projection") c.put(name, std::get<Tensor>(entry));
  }
  try {
    from_container(c);
    FAIL() << "expected MissingTensorError";
  } catch (const MissingTensorError& e) {
    EXPECT_EQ(e.name(), "visual_projection");
  }
}

TEST(Weights, WrongShapeRejected) {
  auto c = to_container(init_weights(tiny_config(), 3));
  c.put("pos_embed", Tensor({3, 3}));
  EXPECT_THROW(from_container(c), ShapeMismatchError);
}

TEST(Weights, MissingFileIsIoError) { EXPECT_THROW(load_weights("/nonexistent/model.ntc"), IoError); }

TEST(Preprocess, ResizesAndNormalizes) {
  const auto cfg = tiny_config();
  const Preprocessing prep;
  Image gray(10, 10, 1, 255);
  const Tensor t = preprocess(gray, cfg, prep);
  ASSERT_EQ(t.shape(), (numerics::Shape{32, 32, 3}));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(t[c], (1.0f - prep.mean[c]) / prep.std[c], 1e-5);
  EXPECT_THROW(preprocess(Image(0, 0, 3), cfg, prep), ValidationError);
}

TEST(Forward, TokenCountsAndStages) {
  const auto w = init_weights(tiny_config(), 1);
  const auto out = forward_original(tiny_input(1, w), w);
  ASSERT_EQ(out.stage_outputs.size(), 2u);
  for (const auto& s : out.stage_outputs) EXPECT_EQ(s.shape(), (numerics::Shape{17, 16}));
  EXPECT_EQ(out.class_embedding.size(), 8u);
  EXPECT_THROW(forward_original(Tensor({8, 8, 3}), w), DimensionError);
}

TEST(Forward, IdenticalImagesGiveIdenticalOutputs) {
  const auto w = init_weights(tiny_config(), 1);
  const auto a = forward_original(tiny_input(4, w), w);
  const auto b = forward_original(tiny_input(4, w), w);
  EXPECT_EQ(a.class_embedding, b.class_embedding);
  EXPECT_EQ(a.stage_outputs, b.stage_outputs);
}

TEST(Forward, BatchEqualsPerImage) {
  const auto w = init_weights(tiny_config(), 2);
  std::vector<Tensor> images{tiny_input(1, w), tiny_input(2, w), tiny_input(3, w)};
  const auto batch = forward_original_batch(images, w);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto single = forward_original(images[i], w);
    EXPECT_EQ(batch[i].class_embedding, single.class_embedding);
    EXPECT_EQ(batch[i].stage_outputs, single.stage_outputs);
  }
}

TEST(Forward, ClassTokenProjectionMatchesClassEmbedding) {
  const auto w = init_weights(tiny_config(), 5);
  const auto out = forward_original(tiny_input(5, w), w);
  const Tensor cls = project_to_joint(out.stage_outputs.back().slice_rows(0, 1), w);
  for (std::size_t c = 0; c < cls.size(); ++c) EXPECT_EQ(cls[c], out.class_embedding[c]);
}

TEST(Forward, ProjectionRowsAreUnitAndZeroTokenFinite) {
  const auto w = init_weights(tiny_config(), 6);
  Rng rng(6);
  Tensor tokens = testing::random_tensor(rng, {12, 16}, -3.0, 3.0);
  for (std::size_t c = 0; c < 16; ++c) tokens(0, c) = 0.0f;
  const Tensor joint = project_to_joint(tokens, w);
  for (std::size_t r = 0; r < joint.rows(); ++r) {
    double norm = 0.0;
    for (float v : joint.row(r)) {
      EXPECT_TRUE(std::isfinite(v));
      norm += static_cast<double>(v) * v;
    }
    if (r > 0) EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-6);
  }
}

TEST(Forward, AttentionRowsSumToOne) {
  const auto w = init_weights(tiny_config(), 7);
  Rng rng(7);
  const Tensor x = testing::random_tensor(rng, {9, 16});
  std::vector<Tensor> probs;
  multi_head_attention(x, w.layers[0].attn, 2, &probs);
  ASSERT_EQ(probs.size(), 2u);
  for (const auto& p : probs) {
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double sum = 0.0;
      for (float v : p.row(r)) sum += v;
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(Forward, PatchPermutationLeavesClassEmbedding) {
  const auto w = init_weights(tiny_config(), 8);
  const Tensor tokens = embed_image(tiny_input(8, w), w);
  Rng rng(8);
  std::vector<std::size_t> perm(tokens.rows() - 1);
  std::iota(perm.begin(), perm.end(), 1);
  rng.shuffle(perm);
  Tensor permuted = tokens;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (std::size_t c = 0; c < tokens.cols(); ++c) permuted(i + 1, c) = tokens(perm[i], c);
  }
  const auto a = encode_tokens(tokens, w);
  const auto b = encode_tokens(permuted, w);
  for (std::size_t c = 0; c < a.class_embedding.size(); ++c) {
    EXPECT_NEAR(a.class_embedding[c], b.class_embedding[c], 1e-5);
  }
}

}  // namespace
}  // namespace clipad::backbone
