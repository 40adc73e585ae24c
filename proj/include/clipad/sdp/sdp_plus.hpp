#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "clipad/backbone/container.hpp"
#include "clipad/backbone/vit.hpp"
#include "clipad/rvs/types.hpp"

namespace clipad::sdp {

using numerics::Tensor;
using numerics::TensorD;

/// Affine map of one stage's patch tokens into the joint space.
struct StageProjection {
  TensorD weight;  ///< [width, embed_dim]
  TensorD bias;    ///< [embed_dim]
  bool operator==(const StageProjection&) const = default;
};

using Projections = std::vector<StageProjection>;

/// Weights uniform in +-1/width (fan-in), biases zero.
Projections init_projections(const backbone::ModelConfig& config, std::uint64_t seed);

/// Stored as "proj.{j}.weight" and "proj.{j}.bias" in 64-bit precision.
backbone::TensorContainer to_container(const Projections& projections);
Projections projections_from_container(const backbone::TensorContainer& container);
void save_projections(const Projections& projections, const std::filesystem::path& path);
Projections load_projections(const std::filesystem::path& path);

/// Per-stage abnormal probability of every patch, [L] per stage, plus the
/// intermediates the gradient needs.
struct StageActivation {
  std::vector<double> probability;  ///< softmax abnormal channel per patch
  std::vector<double> norm;         ///< |F k + b| per patch
  std::vector<double> unit;         ///< normalized mapped rows, [L * embed_dim]
  std::size_t zero_rows = 0;        ///< rows with zero norm (probability 0.5)
};

StageActivation map_stage(const Tensor& patch_tokens, const StageProjection& projection, const TensorD& text,
                          double temperature);

/// M_ft = sum over stages of softmax([F'.T_n, F'.T_a] / temperature)[abnormal]
/// where F' = rownorm(F k_j + b_j) and F are the stage's patch tokens [L, width].
/// Returns the [g, g] grid.
TensorD mapped_anomaly_map(std::span<const Tensor> stage_patch_tokens, const Projections& projections,
                           const rvs::RepresentativePair& pair, double temperature = 0.01);

/// M_+ = M + M_ft.
Tensor combine(const Tensor& m, const Tensor& m_ft);

struct LossConfig {
  double alpha = 1.0;
  double gamma = 2.0;
  double epsilon = 1.0;
  double clamp = 1e-7;
  void validate() const;
};

struct LossValue {
  double total = 0.0;
  double focal = 0.0;
  double dice = 0.0;
  TensorD grad;  ///< d total / d prediction; zero where the clamp is active
};

/// Focal (pixel mean) plus dice loss of a prediction in (0, 1) against a
/// binary mask of the same shape. The prediction is clamped to
/// [clamp, 1 - clamp] first. Throws ValidationError for non-binary masks.
LossValue loss(const TensorD& prediction, const TensorD& mask, const LossConfig& config = {});

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t epochs = 5;
  std::size_t batch_size = 8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double temperature = 0.01;
  std::uint64_t seed = 0;
  void validate() const;
};

/// One training image: frozen patch tokens per stage and the ground truth.
struct TrainSample {
  std::vector<Tensor> stage_tokens;  ///< per stage, [L, width]
  TensorD mask;                      ///< binary, [H, W]
};

/// Mean loss of one sample and its gradient with respect to every projection
/// parameter. The loss is applied to the bilinear upsampling of M_ft / stages
/// at mask resolution.
struct SampleGradient {
  double loss = 0.0;
  Projections grad;
};

SampleGradient sample_gradient(const TrainSample& sample, const Projections& projections,
                               const rvs::RepresentativePair& pair, double temperature, const LossConfig& loss_config);

/// Loss of one sample without gradients.
double sample_loss(const TrainSample& sample, const Projections& projections, const rvs::RepresentativePair& pair,
                   double temperature, const LossConfig& loss_config);

struct TrainResult {
  Projections projections;
  std::vector<double> epoch_loss;  ///< mean sample loss per epoch
  /// Projections after every epoch, so callers can pick an epoch.
  std::vector<Projections> snapshots;
};

/// Adam on the batch-mean loss. Samples are shuffled once per epoch with a
/// generator seeded from config.seed; gradients are accumulated in sample
/// order.
TrainResult train(std::span<const TrainSample> samples, Projections initial, const rvs::RepresentativePair& pair,
                  const TrainConfig& train_config, const LossConfig& loss_config = {});

}  // namespace clipad::sdp
