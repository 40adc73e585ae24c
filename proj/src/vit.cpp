#include "clipad/backbone/vit.hpp"

#include <algorithm>
#include <cmath>

#include "clipad/errors.hpp"
#include "clipad/numerics/ops.hpp"
#include "clipad/numerics/random.hpp"

namespace clipad::backbone {

using numerics::Rng;

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("model config: " + msg); };
  if (patch_size == 0 || image_size == 0) fail("image and patch size must be positive");
  if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
  if (heads == 0 || width == 0 || width % heads != 0) fail("width must be divisible by heads");
  if (stages == 0 || layers_per_stage == 0) fail("stages and layers_per_stage must be positive");
  if (layers != stages * layers_per_stage) fail("layers must equal stages * layers_per_stage");
  if (embed_dim == 0) fail("embed_dim must be positive");
}

namespace {

Tensor uniform(Rng& rng, const numerics::Shape& shape, double bound) {
  Tensor t(shape);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

Tensor matrix(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  return uniform(rng, {fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

LayerNormWeights identity_norm(std::size_t width) {
  return {Tensor({width}, 1.0f), Tensor({width}, 0.0f)};
}

// Container names --------------------------------------------------------

std::string layer_name(std::size_t i, const char* suffix) {
  return "layers." + std::to_string(i) + "." + suffix;
}

Tensor config_tensor(const ModelConfig& c) {
  return Tensor({8}, {static_cast<float>(c.image_size), static_cast<float>(c.patch_size),
                      static_cast<float>(c.width), static_cast<float>(c.heads),
                      static_cast<float>(c.layers), static_cast<float>(c.stages),
                      static_cast<float>(c.layers_per_stage), static_cast<float>(c.embed_dim)});
}

ModelConfig config_from_tensor(const Tensor& t) {
  if (t.shape() != numerics::Shape{8}) throw ShapeMismatchError("tensor 'config' must have 8 entries");
  auto get = [&](std::size_t i) {
    const float v = t[i];
    if (!(v >= 0.0f) || v != std::floor(v)) throw FormatError("tensor 'config' holds a non-integer extent");
    return static_cast<std::size_t>(v);
  };
  ModelConfig c{get(0), get(1), get(2), get(3), get(4), get(5), get(6), get(7)};
  return c;
}

}  // namespace

EncoderWeights init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t w = config.width;
  EncoderWeights out;
  out.config = config;
  out.patch_embed = matrix(rng, config.patch_dim(), w);
  const double embed_bound = 1.0 / std::sqrt(static_cast<double>(w));
  out.class_token = uniform(rng, {w}, embed_bound);
  out.pos_embed = uniform(rng, {config.tokens(), w}, embed_bound);
  out.layers.reserve(config.layers);
  for (std::size_t i = 0; i < config.layers; ++i) {
    LayerWeights l;
    l.ln1 = identity_norm(w);
    l.attn.wq = matrix(rng, w, w);
    l.attn.wk = matrix(rng, w, w);
    l.attn.wv = matrix(rng, w, w);
    l.attn.wo = matrix(rng, w, w);
    l.attn.bq = l.attn.bk = l.attn.bv = l.attn.bo = Tensor({w}, 0.0f);
    l.ln2 = identity_norm(w);
    l.fc1_weight = matrix(rng, w, 4 * w);
    l.fc1_bias = Tensor({4 * w}, 0.0f);
    l.fc2_weight = matrix(rng, 4 * w, w);
    l.fc2_bias = Tensor({w}, 0.0f);
    out.layers.push_back(std::move(l));
  }
  out.ln_post = identity_norm(w);
  out.visual_projection = matrix(rng, w, config.embed_dim);
  return out;
}

TensorContainer to_container(const EncoderWeights& weights) {
  TensorContainer c;
  c.put("config", config_tensor(weights.config));
  c.put("preprocess.mean", Tensor({3}, {weights.preprocessing.mean[0], weights.preprocessing.mean[1],
                                        weights.preprocessing.mean[2]}));
  c.put("preprocess.std", Tensor({3}, {weights.preprocessing.std[0], weights.preprocessing.std[1],
                                       weights.preprocessing.std[2]}));
  c.put("patch_embed", weights.patch_embed);
  c.put("class_token", weights.class_token);
  c.put("pos_embed", weights.pos_embed);
  for (std::size_t i = 0; i < weights.layers.size(); ++i) {
    const auto& l = weights.layers[i];
    c.put(layer_name(i, "ln1.weight"), l.ln1.weight);
    c.put(layer_name(i, "ln1.bias"), l.ln1.bias);
    c.put(layer_name(i, "attn.wq"), l.attn.wq);
    c.put(layer_name(i, "attn.bq"), l.attn.bq);
    c.put(layer_name(i, "attn.wk"), l.attn.wk);
    c.put(layer_name(i, "attn.bk"), l.attn.bk);
    c.put(layer_name(i, "attn.wv"), l.attn.wv);
    c.put(layer_name(i, "attn.bv"), l.attn.bv);
    c.put(layer_name(i, "attn.wo"), l.attn.wo);
    c.put(layer_name(i, "attn.bo"), l.attn.bo);
    c.put(layer_name(i, "ln2.weight"), l.ln2.weight);
    c.put(layer_name(i, "ln2.bias"), l.ln2.bias);
    c.put(layer_name(i, "mlp.fc1.weight"), l.fc1_weight);
    c.put(layer_name(i, "mlp.fc1.bias"), l.fc1_bias);
    c.put(layer_name(i, "mlp.fc2.weight"), l.fc2_weight);
    c.put(layer_name(i, "mlp.fc2.bias"), l.fc2_bias);
  }
  c.put("ln_post.weight", weights.ln_post.weight);
  c.put("ln_post.bias", weights.ln_post.bias);
  c.put("visual_projection", weights.visual_projection);
  return c;
}

EncoderWeights from_container(const TensorContainer& c) {
  EncoderWeights out;
  out.config = config_from_tensor(c.f32("config"));
  try {
    out.config.validate();
  } catch (const ValidationError& e) {
    throw FormatError(std::string("stored ") + e.what());
  }
  const ModelConfig& cfg = out.config;
  const std::size_t w = cfg.width;

  auto take = [&](const std::string& name, const numerics::Shape& shape) {
    c.require(name, shape);
    return c.f32(name);
  };
  const Tensor mean = take("preprocess.mean", {3});
  const Tensor stdev = take("preprocess.std", {3});
  for (std::size_t i = 0; i < 3; ++i) {
    out.preprocessing.mean[i] = mean[i];
    out.preprocessing.std[i] = stdev[i];
  }
  out.patch_embed = take("patch_embed", {cfg.patch_dim(), w});
  out.class_token = take("class_token", {w});
  out.pos_embed = take("pos_embed", {cfg.tokens(), w});
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    LayerWeights l;
    l.ln1 = {take(layer_name(i, "ln1.weight"), {w}), take(layer_name(i, "ln1.bias"), {w})};
    l.attn.wq = take(layer_name(i, "attn.wq"), {w, w});
    l.attn.bq = take(layer_name(i, "attn.bq"), {w});
    l.attn.wk = take(layer_name(i, "attn.wk"), {w, w});
    l.attn.bk = take(layer_name(i, "attn.bk"), {w});
    l.attn.wv = take(layer_name(i, "attn.wv"), {w, w});
    l.attn.bv = take(layer_name(i, "attn.bv"), {w});
    l.attn.wo = take(layer_name(i, "attn.wo"), {w, w});
    l.attn.bo = take(layer_name(i, "attn.bo"), {w});
    l.ln2 = {take(layer_name(i, "ln2.weight"), {w}), take(layer_name(i, "ln2.bias"), {w})};
    l.fc1_weight = take(layer_name(i, "mlp.fc1.weight"), {w, 4 * w});
    l.fc1_bias = take(layer_name(i, "mlp.fc1.bias"), {4 * w});
    l.fc2_weight = take(layer_name(i, "mlp.fc2.weight"), {4 * w, w});
    l.fc2_bias = take(layer_name(i, "mlp.fc2.bias"), {w});
    out.layers.push_back(std::move(l));
  }
  out.ln_post = {take("ln_post.weight", {w}), take("ln_post.bias", {w})};
  out.visual_projection = take("visual_projection", {w, cfg.embed_dim});
  return out;
}

void save_weights(const EncoderWeights& weights, const std::filesystem::path& path) {
  save_container(to_container(weights), path);
}

EncoderWeights load_weights(const std::filesystem::path& path) {
  return from_container(load_container(path));
}

Tensor preprocess(const Image& image, const ModelConfig& config, const Preprocessing& prep) {
  if (image.width == 0 || image.height == 0) throw ValidationError("empty image");
  if (image.channels != 1 && image.channels != 3) throw ValidationError("image must have 1 or 3 channels");
  const std::size_t n = config.image_size;
  Tensor out({n, n, 3});
  const double sx = static_cast<double>(image.width) / static_cast<double>(n);
  const double sy = static_cast<double>(image.height) / static_cast<double>(n);
  for (std::size_t y = 0; y < n; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(image.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < n; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(image.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t ic = image.channels == 1 ? 0 : c;
        const double v = (1 - wy) * ((1 - wx) * image.at(x0, y0, ic) + wx * image.at(x1, y0, ic)) +
                         wy * ((1 - wx) * image.at(x0, y1, ic) + wx * image.at(x1, y1, ic));
        out[(y * n + x) * 3 + c] = static_cast<float>((v / 255.0 - prep.mean[c]) / prep.std[c]);
      }
    }
  }
  return out;
}

Tensor embed_image(const Tensor& image, const EncoderWeights& weights) {
  const ModelConfig& cfg = weights.config;
  const std::size_t n = cfg.image_size, p = cfg.patch_size, g = cfg.grid();
  if (image.shape() != numerics::Shape{n, n, 3}) {
    throw DimensionError("encoder expects a preprocessed [" + std::to_string(n) + "x" + std::to_string(n) +
                         "x3] image, got " + numerics::shape_string(image.shape()));
  }
  Tensor patches({cfg.patch_tokens(), cfg.patch_dim()});
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      auto row = patches.row(gy * g + gx);
      std::size_t k = 0;
      for (std::size_t dy = 0; dy < p; ++dy) {
        const std::size_t y = gy * p + dy;
        for (std::size_t dx = 0; dx < p; ++dx) {
          const std::size_t x = gx * p + dx;
          for (std::size_t c = 0; c < 3; ++c) row[k++] = image[(y * n + x) * 3 + c];
        }
      }
    }
  }
  const Tensor embedded = numerics::matmul(patches, weights.patch_embed);
  Tensor tokens({cfg.tokens(), cfg.width});
  for (std::size_t c = 0; c < cfg.width; ++c) tokens(0, c) = weights.class_token[c] + weights.pos_embed(0, c);
  for (std::size_t t = 0; t < cfg.patch_tokens(); ++t) {
    for (std::size_t c = 0; c < cfg.width; ++c) {
      tokens(t + 1, c) = embedded(t, c) + weights.pos_embed(t + 1, c);
    }
  }
  return tokens;
}

namespace {

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor out = numerics::matmul(x, w);
  numerics::add_row_bias(out, b.data());
  return out;
}

Tensor head_columns(const Tensor& x, std::size_t head, std::size_t d) {
  Tensor out({x.rows(), d});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t j = 0; j < d; ++j) out(r, j) = x(r, head * d + j);
  }
  return out;
}

}  // namespace

Tensor multi_head_attention(const Tensor& normed, const AttentionWeights& attn, std::size_t heads,
                            std::vector<Tensor>* probabilities) {
  const Tensor q = affine(normed, attn.wq, attn.bq);
  const Tensor k = affine(normed, attn.wk, attn.bk);
  const Tensor v = affine(normed, attn.wv, attn.bv);
  const std::size_t width = q.cols();
  const std::size_t d = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor concat({q.rows(), width});
  if (probabilities) probabilities->clear();
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = head_columns(q, h, d);
    const Tensor kh = head_columns(k, h, d);
    const Tensor vh = head_columns(v, h, d);
    const Tensor probs = numerics::softmax(numerics::matmul_transposed(qh, kh), 1, 1.0 / scale);
    const Tensor out = numerics::matmul(probs, vh);
    for (std::size_t r = 0; r < out.rows(); ++r) {
      for (std::size_t j = 0; j < d; ++j) concat(r, h * d + j) = out(r, j);
    }
    if (probabilities) probabilities->push_back(probs);
  }
  return affine(concat, attn.wo, attn.bo);
}

Tensor run_layer(const Tensor& tokens, const LayerWeights& layer, std::size_t heads) {
  const Tensor n1 = numerics::layer_norm(tokens, layer.ln1.weight.data(), layer.ln1.bias.data());
  Tensor x = numerics::add(tokens, multi_head_attention(n1, layer.attn, heads));
  const Tensor n2 = numerics::layer_norm(x, layer.ln2.weight.data(), layer.ln2.bias.data());
  Tensor hidden = affine(n2, layer.fc1_weight, layer.fc1_bias);
  numerics::gelu_inplace(hidden);
  return numerics::add(x, affine(hidden, layer.fc2_weight, layer.fc2_bias));
}

Tensor project_to_joint(const Tensor& tokens, const EncoderWeights& weights) {
  if (tokens.rank() != 2 || tokens.cols() != weights.config.width) {
    throw DimensionError("project_to_joint expects [M x " + std::to_string(weights.config.width) +
                         "] tokens, got " + numerics::shape_string(tokens.shape()));
  }
  const Tensor normed =
      numerics::layer_norm(tokens, weights.ln_post.weight.data(), weights.ln_post.bias.data());
  return numerics::l2_normalize(numerics::matmul(normed, weights.visual_projection), 1).tensor;
}

OriginalForward encode_tokens(Tensor tokens, const EncoderWeights& weights) {
  const ModelConfig& cfg = weights.config;
  OriginalForward out;
  out.stage_outputs.reserve(cfg.stages);
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    tokens = run_layer(tokens, weights.layers[i], cfg.heads);
    if ((i + 1) % cfg.layers_per_stage == 0) out.stage_outputs.push_back(tokens);
  }
  const Tensor cls = tokens.slice_rows(0, 1);
  out.class_embedding = project_to_joint(cls, weights).reshaped({cfg.embed_dim});
  return out;
}

OriginalForward forward_original(const Tensor& image, const EncoderWeights& weights) {
  return encode_tokens(embed_image(image, weights), weights);
}

std::vector<OriginalForward> forward_original_batch(std::span<const Tensor> images,
                                                    const EncoderWeights& weights) {
  std::vector<OriginalForward> out;
  out.reserve(images.size());
  for (const auto& image : images) out.push_back(forward_original(image, weights));
  return out;
}

Tensor patch_rows(const Tensor& tokens) { return tokens.slice_rows(1, tokens.rows()); }

}  // namespace clipad::backbone
