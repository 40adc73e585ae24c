#include "clipad/surgery/surgery.hpp"

#include <cmath>

#include "clipad/errors.hpp"
#include "clipad/numerics/ops.hpp"

namespace clipad::surgery {

std::vector<Tensor> vv_attention_probabilities(const Tensor& values, std::size_t heads, bool scale) {
  if (values.rank() != 2 || heads == 0 || values.cols() % heads != 0) {
    throw DimensionError("vv_attention: width must be divisible by heads");
  }
  const std::size_t d = values.cols() / heads;
  const double temperature = scale ? std::sqrt(static_cast<double>(d)) : 1.0;
  std::vector<Tensor> out;
  out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor vh({values.rows(), d});
    for (std::size_t r = 0; r < values.rows(); ++r)
      for (std::size_t j = 0; j < d; ++j) vh(r, j) = values(r, h * d + j);
    out.push_back(numerics::softmax(numerics::matmul_transposed(vh, vh), 1, temperature));
  }
  return out;
}

Tensor vv_attention(const Tensor& tokens, const SurgeryLayer& layer, std::size_t heads,
                    const SurgeryOptions& options) {
  const Tensor normed = options.pre_norm
                            ? numerics::layer_norm(tokens, layer.ln1->weight.data(), layer.ln1->bias.data())
                            : tokens;
  Tensor values = numerics::matmul(normed, *layer.wv);
  numerics::add_row_bias(values, layer.bv->data());

  const std::vector<Tensor> probs = vv_attention_probabilities(values, heads, options.scale);
  const std::size_t d = values.cols() / heads;
  Tensor concat({values.rows(), values.cols()});
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor& p = probs[h];
    for (std::size_t r = 0; r < values.rows(); ++r) {
      for (std::size_t m = 0; m < values.rows(); ++m) {
        const float w = p(r, m);
        for (std::size_t j = 0; j < d; ++j) concat(r, h * d + j) += w * values(m, h * d + j);
      }
    }
  }
  Tensor projected = numerics::matmul(concat, *layer.wo);
  numerics::add_row_bias(projected, layer.bo->data());
  return numerics::add(tokens, projected);
}

DualPathState dual_path_block(const Tensor& input_original, std::span<const LayerWeights> original_layers,
                              std::span<const SurgeryLayer> surgery_layers, std::size_t heads,
                              const SurgeryOptions& options) {
  const std::size_t k = original_layers.size();
  if (k == 0) throw ValidationError("dual_path_block needs at least one layer");
  if (surgery_layers.size() != k) {
    throw ValidationError("dual_path_block: " + std::to_string(k) + " original layers but " +
                          std::to_string(surgery_layers.size()) + " surgery layers");
  }
  // F_n^0 and the i = 1 term both apply arch_1 to the block input.
  const Tensor first = vv_attention(input_original, surgery_layers[0], heads, options);
  Tensor surgery_stream = first;
  Tensor original = input_original;
  for (std::size_t i = 1; i <= k; ++i) {
    const Tensor arch = i == 1 ? first : vv_attention(original, surgery_layers[i - 1], heads, options);
    surgery_stream = numerics::add(surgery_stream, arch);
    original = backbone::run_layer(original, original_layers[i - 1], heads);
  }
  return {std::move(original), std::move(surgery_stream)};
}

DualPathForward forward_dual_path(const Tensor& image, const EncoderWeights& weights,
                                  const SurgeryOptions& options) {
  const auto& cfg = weights.config;
  std::vector<SurgeryLayer> surgery_layers;
  surgery_layers.reserve(cfg.layers);
  for (const auto& layer : weights.layers) surgery_layers.push_back(SurgeryLayer::borrow(layer));

  DualPathForward out;
  Tensor tokens = backbone::embed_image(image, weights);
  for (std::size_t j = 0; j < cfg.stages; ++j) {
    const std::size_t first = j * cfg.layers_per_stage;
    DualPathState state = dual_path_block(
        tokens, std::span<const LayerWeights>(weights.layers).subspan(first, cfg.layers_per_stage),
        std::span<const SurgeryLayer>(surgery_layers).subspan(first, cfg.layers_per_stage), cfg.heads,
        options);
    tokens = state.original;
    out.original_stages.push_back(std::move(state.original));
    out.surgery_stages.push_back(std::move(state.surgery));
  }
  out.class_embedding = backbone::project_to_joint(tokens.slice_rows(0, 1), weights).reshaped({cfg.embed_dim});
  return out;
}

Tensor feature_surgery(const Tensor& patch_features, const Tensor& text_features,
                       const rvs::ClassProbabilities& s) {
  if (patch_features.rank() != 2 || text_features.rank() != 2 ||
      patch_features.cols() != text_features.cols()) {
    throw DimensionError("feature_surgery: channel extents differ (" +
                         numerics::shape_string(patch_features.shape()) + " vs " +
                         numerics::shape_string(text_features.shape()) + ")");
  }
  const std::size_t L = patch_features.rows(), N = text_features.rows(), C = patch_features.cols();
  if (s.size() != N) throw DimensionError("feature_surgery: s has " + std::to_string(s.size()) +
                                          " entries for " + std::to_string(N) + " classes");
  double mean_s = 0.0;
  for (double v : s.values) mean_s += v;
  mean_s /= static_cast<double>(N);
  std::vector<double> w(N);
  for (std::size_t n = 0; n < N; ++n) w[n] = mean_s > 0.0 ? s.values[n] / mean_s : 1.0;

  Tensor out({L, N});
  std::vector<double> redundant(C);
  std::vector<double> products(N * C);
  for (std::size_t l = 0; l < L; ++l) {
    std::fill(redundant.begin(), redundant.end(), 0.0);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const double prod = static_cast<double>(patch_features(l, c)) * text_features(n, c);
        products[n * C + c] = prod;
        redundant[c] += w[n] * prod;
      }
    }
    for (double& r : redundant) r /= static_cast<double>(N);
    for (std::size_t n = 0; n < N; ++n) {
      double acc = 0.0;
      for (std::size_t c = 0; c < C; ++c) acc += products[n * C + c] - redundant[c];
      out(l, n) = static_cast<float>(acc);
    }
  }
  return out;
}

}  // namespace clipad::surgery
