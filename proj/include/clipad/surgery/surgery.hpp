#pragma once

#include <span>
#include <vector>

#include "clipad/backbone/vit.hpp"
#include "clipad/rvs/types.hpp"

namespace clipad::surgery {

using backbone::EncoderWeights;
using backbone::LayerWeights;
using numerics::Tensor;

/// Knobs the architecture surgery leaves open. Defaults keep the layer's
/// pre-norm and scale V.V^T by 1/sqrt(d_head) like standard attention.
struct SurgeryOptions {
  bool pre_norm = true;
  bool scale = true;
};

/// A surgery layer borrows the value/output projections (and pre-norm) of the
/// original layer at the same depth. It has no query/key weights and no FFN.
struct SurgeryLayer {
  const backbone::LayerNormWeights* ln1 = nullptr;
  const Tensor* wv = nullptr;
  const Tensor* bv = nullptr;
  const Tensor* wo = nullptr;
  const Tensor* bo = nullptr;

  static SurgeryLayer borrow(const LayerWeights& layer) {
    return {&layer.ln1, &layer.attn.wv, &layer.attn.bv, &layer.attn.wo, &layer.attn.bo};
  }
};

/// Per-head softmax(V_h V_h^T * scale) for value rows `values` [M, width].
std::vector<Tensor> vv_attention_probabilities(const Tensor& values, std::size_t heads, bool scale);

/// V-V attention layer: tokens + Wo(concat_h softmax(V_h V_h^T) V_h), with
/// V = ln1(tokens) Wv + bv.
Tensor vv_attention(const Tensor& tokens, const SurgeryLayer& layer, std::size_t heads,
                    const SurgeryOptions& options = {});

struct DualPathState {
  Tensor original;
  Tensor surgery;
};

/// One staged dual-path block. With X the block input and F_o^i the output of
/// original layer i (F_o^0 = X):
///   F_n^0 = arch_1(X)
///   F_n^i = F_n^{i-1} + arch_i(F_o^{i-1}),  i = 1..k
/// The original stream is computed exactly as without the surgery path.
DualPathState dual_path_block(const Tensor& input_original, std::span<const LayerWeights> original_layers,
                              std::span<const SurgeryLayer> surgery_layers, std::size_t heads,
                              const SurgeryOptions& options = {});

struct DualPathForward {
  Tensor class_embedding;               ///< [embed_dim], unit norm
  std::vector<Tensor> original_stages;  ///< F_o^{k,j}, [(L+1), width]
  std::vector<Tensor> surgery_stages;   ///< F_n^{k,j}, [(L+1), width]
};

/// Full encoder pass with a surgery path attached to every stage.
DualPathForward forward_dual_path(const Tensor& image, const EncoderWeights& weights,
                                  const SurgeryOptions& options = {});

/// Feature surgery. For patch features F [L, C] and text features Ft [N, C]:
///   w = s / mean(s)
///   F_h[l, c] = mean_n w_n F[l, c] Ft[n, c]
///   P[l, n]   = sum_c (F[l, c] Ft[n, c] - F_h[l, c])
/// Returns P [L, N]. Computed in double.
Tensor feature_surgery(const Tensor& patch_features, const Tensor& text_features,
                       const rvs::ClassProbabilities& s);

}  // namespace clipad::surgery
