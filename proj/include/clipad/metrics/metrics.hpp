#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clipad/numerics/tensor.hpp"

namespace clipad::metrics {

using numerics::Tensor;

/// Scores with binary labels (0 normal, 1 anomalous).
struct ScoredSet {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;

  /// Throws ValidationError on length mismatch or non-binary labels.
  void validate() const;
  std::size_t positives() const;
};

/// Probability that a positive outranks a negative, ties counted one half.
/// Throws UndefinedMetricError unless both classes are present.
double auroc(const ScoredSet& set);

/// Maximum F1 over the thresholds "score >= t" for every distinct score.
double f1_max(const ScoredSet& set);

/// Mean over positives of the precision at their rank, with scores sorted
/// descending and ties broken by ascending index.
double average_precision(const ScoredSet& set);

/// The `count` "lower" quantiles sorted[floor(k (n-1) / (count-1))] of the
/// scores, deduplicated and ascending. Both endpoints are always included.
std::vector<double> quantile_thresholds(std::span<const double> scores, std::size_t count);

/// Pixel-level F1-max and AP over a threshold grid: thresholds "score >= t"
/// for every t in `thresholds`. AP is the step sum of precision times the
/// recall increase when walking thresholds from high to low.
struct ThresholdCurve {
  double f1_max = 0.0;
  double average_precision = 0.0;
};
ThresholdCurve threshold_curve(const ScoredSet& set, std::span<const double> thresholds);

/// Per-region overlap. Regions are the 8-connected components of every mask.
/// Thresholds are the 201 lower quantiles of all scores (plus +infinity for the
/// (0, 0) point); at each, a pixel is predicted anomalous when score >= t. The
/// mean region overlap is integrated against the false-positive rate over
/// normal pixels with the trapezoid rule up to FPR 0.3 (linearly interpolated
/// at 0.3) and divided by 0.3.
double pro(std::span<const Tensor> scores, std::span<const Tensor> masks, std::size_t quantiles = 200,
           double fpr_limit = 0.3);

/// Component labels of a binary mask under 8-connectivity (0 background,
/// components numbered from 1 in raster order of their first pixel).
std::vector<std::size_t> label_components(const Tensor& mask, std::size_t* count = nullptr);

struct ImageMetrics {
  double auroc = 0.0;
  double f1_max = 0.0;
  double ap = 0.0;
};

struct PixelMetrics {
  double auroc = 0.0;
  double f1_max = 0.0;
  double ap = 0.0;
  double pro = 0.0;
};

struct MetricsReport {
  std::optional<ImageMetrics> image;
  std::optional<PixelMetrics> pixel;
  std::size_t images = 0;
  std::size_t anomalous_images = 0;
  std::size_t pixels = 0;
  std::size_t anomalous_pixels = 0;
  std::size_t pixel_thresholds = 1000;
  std::size_t pro_quantiles = 200;

  /// "key = value" lines in a fixed order; values use 6 decimals.
  std::string to_text() const;
};

/// Image metrics from image scores/labels and pixel metrics from per-image
/// maps and masks (either may be empty to skip that level).
MetricsReport evaluate(const ScoredSet& images, std::span<const Tensor> maps, std::span<const Tensor> masks,
                       std::size_t pixel_thresholds = 1000, std::size_t pro_quantiles = 200);

}  // namespace clipad::metrics
