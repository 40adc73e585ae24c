#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "clipad/backbone/container.hpp"
#include "clipad/image.hpp"
#include "clipad/numerics/tensor.hpp"

namespace clipad::backbone {

/// Shape of the vision encoder and its stage partition.
struct ModelConfig {
  std::size_t image_size = 240;
  std::size_t patch_size = 16;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t layers = 12;
  std::size_t stages = 4;
  std::size_t layers_per_stage = 3;
  std::size_t embed_dim = 32;

  /// Throws ValidationError unless layers == stages * layers_per_stage,
  /// image_size % patch_size == 0 and width % heads == 0.
  void validate() const;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patch_tokens() const { return grid() * grid(); }
  std::size_t tokens() const { return patch_tokens() + 1; }
  std::size_t head_dim() const { return width / heads; }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerNormWeights {
  Tensor weight;
  Tensor bias;
};

struct AttentionWeights {
  Tensor wq, bq;
  Tensor wk, bk;
  Tensor wv, bv;
  Tensor wo, bo;
};

/// One pre-norm transformer layer: x + attn(ln1(x)), then + mlp(ln2(.)).
struct LayerWeights {
  LayerNormWeights ln1;
  AttentionWeights attn;
  LayerNormWeights ln2;
  Tensor fc1_weight, fc1_bias;
  Tensor fc2_weight, fc2_bias;
};

/// Per-channel input normalization applied after scaling pixels to [0, 1].
struct Preprocessing {
  std::array<float, 3> mean{0.48145466f, 0.4578275f, 0.40821073f};
  std::array<float, 3> std{0.26862954f, 0.26130258f, 0.27577711f};
};

struct EncoderWeights {
  ModelConfig config;
  Preprocessing preprocessing;
  /// [3*p*p, width]; input rows are ordered (dy, dx, channel).
  Tensor patch_embed;
  Tensor class_token;  ///< [width]
  Tensor pos_embed;    ///< [L+1, width]
  std::vector<LayerWeights> layers;
  LayerNormWeights ln_post;
  Tensor visual_projection;  ///< [width, embed_dim]
};

/// Seeded toy weights: matrices uniform in +-1/sqrt(fan_in), class and
/// positional embeddings uniform in +-1/sqrt(width), layer norms identity,
/// biases zero.
EncoderWeights init_weights(const ModelConfig& config, std::uint64_t seed);

TensorContainer to_container(const EncoderWeights& weights);
/// Validates every required name and shape against the stored config.
EncoderWeights from_container(const TensorContainer& container);

void save_weights(const EncoderWeights& weights, const std::filesystem::path& path);
EncoderWeights load_weights(const std::filesystem::path& path);

/// Bilinear resize to image_size x image_size (half-pixel centers), scale to
/// [0, 1], then per-channel normalization. Returns [H, W, 3].
Tensor preprocess(const Image& image, const ModelConfig& config, const Preprocessing& prep);

/// Patch embedding + class token + positional embedding: [(L+1), width].
Tensor embed_image(const Tensor& image, const EncoderWeights& weights);

/// Multi-head attention over already-normalized inputs, without the residual.
/// When `probabilities` is non-null it receives one [T, T] row-stochastic
/// matrix per head.
Tensor multi_head_attention(const Tensor& normed, const AttentionWeights& attn, std::size_t heads,
                            std::vector<Tensor>* probabilities = nullptr);

/// One unmodified encoder layer.
Tensor run_layer(const Tensor& tokens, const LayerWeights& layer, std::size_t heads);

struct OriginalForward {
  Tensor class_embedding;            ///< [embed_dim], unit norm
  std::vector<Tensor> stage_outputs;  ///< per stage, [(L+1), width]
};

/// Runs the plain encoder from embedded tokens.
OriginalForward encode_tokens(Tensor tokens, const EncoderWeights& weights);

/// Plain pre-norm ViT forward on a preprocessed [H, W, 3] image.
OriginalForward forward_original(const Tensor& image, const EncoderWeights& weights);

std::vector<OriginalForward> forward_original_batch(std::span<const Tensor> images,
                                                    const EncoderWeights& weights);

/// Final layer norm + visual projection + row normalization, applied to any
/// token rows. Returns [M, embed_dim].
Tensor project_to_joint(const Tensor& tokens, const EncoderWeights& weights);

/// Rows 1..L of a token tensor (drops the class token).
Tensor patch_rows(const Tensor& tokens);

}  // namespace clipad::backbone
