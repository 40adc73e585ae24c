#pragma once

#include <cstddef>
#include <vector>

#include "clipad/backbone/vit.hpp"
#include "clipad/rvs/types.hpp"
#include "clipad/surgery/surgery.hpp"

namespace clipad::sdp {

using backbone::EncoderWeights;
using numerics::Tensor;

/// Patch-level scores, their upsampled pixel map and the fused image score.
struct AnomalyMap {
  Tensor grid;   ///< [g, g]
  Tensor pixel;  ///< [H, W]
  double image_score = 0.0;
};

struct SdpOptions {
  surgery::SurgeryOptions surgery;
  double temperature = 0.01;
  /// Stages whose maps are summed; empty means all stages.
  std::vector<std::size_t> stages;
  /// Gaussian smoothing of the pixel map, disabled when <= 0.
  double smoothing_sigma = 0.0;
};

struct SdpResult {
  AnomalyMap map;
  rvs::ClassProbabilities s;
  std::vector<Tensor> stage_maps;  ///< per selected stage, [g, g]
};

/// Abnormal-class feature-surgery map of one stage's surgery tokens, [g, g].
Tensor stage_map(const Tensor& surgery_tokens, const EncoderWeights& weights, const Tensor& text_features,
                 const rvs::ClassProbabilities& s);

/// SDP from an already computed dual-path pass: M = sum over the selected
/// stages of stage_map. The pixel map is upsampled to height x width.
SdpResult sdp_from_forward(const surgery::DualPathForward& forward, const EncoderWeights& weights,
                           const rvs::RepresentativePair& pair, const SdpOptions& options, std::size_t height,
                           std::size_t width);

/// Full SDP on a preprocessed [H, W, 3] image. The pixel map has the
/// image's resolution.
SdpResult sdp_forward(const Tensor& image, const EncoderWeights& weights, const rvs::RepresentativePair& pair,
                      const SdpOptions& options = {});

/// Bilinear interpolation with aligned corners: output corner pixels take the
/// grid corner values exactly.
Tensor upsample(const Tensor& grid, std::size_t height, std::size_t width);

/// Transpose of upsample: maps a gradient on the [height, width] output back
/// onto the [rows, cols] grid.
Tensor upsample_backward(const Tensor& grad, std::size_t rows, std::size_t cols);
numerics::TensorD upsample(const numerics::TensorD& grid, std::size_t height, std::size_t width);
numerics::TensorD upsample_backward(const numerics::TensorD& grad, std::size_t rows, std::size_t cols);

/// Separable Gaussian blur with reflected borders and radius ceil(3 sigma).
Tensor gaussian_smooth(const Tensor& map, double sigma);

/// s_abnormal + normalized map maximum.
double anomaly_score(const rvs::ClassProbabilities& s, double normalized_map_max);

/// Fused image scores over an evaluation batch. Every pixel map is min-max
/// normalized with the batch-wide minimum and maximum (a constant batch maps
/// to 0), then score_i = s_abnormal_i + max(normalized map_i).
std::vector<double> fuse_scores(const std::vector<double>& s_abnormal, const std::vector<Tensor>& pixel_maps);

/// Misalignment diagnostic: projected original-path patch tokens of the last
/// stage compared directly with [T_n, T_a], softmax over the pair, abnormal
/// channel. Returns the [g, g] grid.
Tensor direct_similarity_grid(const Tensor& last_stage_tokens, const EncoderWeights& weights,
                              const rvs::RepresentativePair& pair, double temperature = 0.01);

AnomalyMap direct_similarity_baseline(const Tensor& image, const EncoderWeights& weights,
                                      const rvs::RepresentativePair& pair, double temperature = 0.01);

}  // namespace clipad::sdp
