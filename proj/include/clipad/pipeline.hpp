#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "clipad/backbone/vit.hpp"
#include "clipad/data/data_io.hpp"
#include "clipad/metrics/metrics.hpp"
#include "clipad/rvs/types.hpp"
#include "clipad/sdp/sdp.hpp"
#include "clipad/sdp/sdp_plus.hpp"

namespace clipad::pipeline {

using backbone::EncoderWeights;
using numerics::Tensor;

/// Which anomaly map a detection run reports.
enum class Mode { Sdp, SdpPlus, Baseline };

std::string to_string(Mode mode);

struct AnalysisOptions {
  surgery::SurgeryOptions surgery;
  double temperature = 0.01;
  /// Mapped-map projections; required for SDP+.
  std::optional<sdp::Projections> projections;
  double ft_temperature = 0.01;
};

/// Everything one dual-path pass yields for an image, at patch-grid level.
struct ImageAnalysis {
  rvs::ClassProbabilities s;
  std::vector<Tensor> sdp_stage_grids;  ///< per stage feature-surgery maps, [g, g]
  Tensor baseline_grid;                 ///< direct similarity, [g, g]
  std::optional<Tensor> ft_grid;        ///< M_ft, [g, g]
};

ImageAnalysis analyze(const Image& image, const EncoderWeights& weights, const rvs::RepresentativePair& pair,
                      const AnalysisOptions& options);

/// Patch-grid map of a mode. `stages` selects SDP stages (empty = all).
Tensor mode_grid(const ImageAnalysis& analysis, Mode mode, const std::vector<std::size_t>& stages = {});

/// Per-image analyses of a dataset plus ground truth at native resolution.
struct DatasetAnalysis {
  std::vector<ImageAnalysis> images;
  std::vector<Tensor> masks;  ///< [H, W] per image, binary
  std::vector<std::uint8_t> labels;
};

/// Runs analyze on every sample with up to `jobs` threads. Results are stored
/// in index order, so the output does not depend on `jobs`.
DatasetAnalysis analyze_dataset(const data::DatasetIndex& index, const EncoderWeights& weights,
                                const rvs::RepresentativePair& pair, const AnalysisOptions& options,
                                std::size_t jobs = 1);

struct Detection {
  std::vector<Tensor> pixel_maps;  ///< [H, W] per image
  std::vector<double> s_abnormal;
  std::vector<double> scores;      ///< fused over the batch
};

/// Pixel maps of a mode at mask resolution, optionally smoothed, and the
/// batch-fused image scores.
Detection detect(const DatasetAnalysis& analysis, Mode mode, const std::vector<std::size_t>& stages = {},
                 double smoothing_sigma = 0.0);

metrics::MetricsReport evaluate(const DatasetAnalysis& analysis, const Detection& detection);

/// Frozen original-path patch tokens per stage and the mask of every sample.
std::vector<sdp::TrainSample> training_samples(const data::DatasetIndex& index, const EncoderWeights& weights,
                                               std::size_t jobs = 1);

/// Calls fn(i) for i in [0, count) on up to `jobs` threads.
void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace clipad::pipeline
