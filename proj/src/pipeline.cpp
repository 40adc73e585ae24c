#include "clipad/pipeline.hpp"

#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>

#include "clipad/errors.hpp"
#include "clipad/rvs/rvs.hpp"

namespace clipad::pipeline {

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::Sdp: return "sdp";
    case Mode::SdpPlus: return "sdp_plus";
    case Mode::Baseline: return "baseline";
  }
  return "?";
}

void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  if (jobs == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (std::size_t t = 0; t < jobs; ++t) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (error) std::rethrow_exception(error);
}

ImageAnalysis analyze(const Image& image, const EncoderWeights& weights, const rvs::RepresentativePair& pair,
                      const AnalysisOptions& options) {
  const Tensor input = backbone::preprocess(image, weights.config, weights.preprocessing);
  const auto forward = surgery::forward_dual_path(input, weights, options.surgery);
  ImageAnalysis out;
  out.s = rvs::classify(forward.class_embedding, pair, options.temperature);
  const Tensor text = pair.stacked();
  for (const Tensor& stage : forward.surgery_stages) out.sdp_stage_grids.push_back(sdp::stage_map(stage, weights, text, out.s));
  out.baseline_grid = sdp::direct_similarity_grid(forward.original_stages.back(), weights, pair, options.temperature);
  if (options.projections) {
    std::vector<Tensor> patches;
    for (const Tensor& stage : forward.original_stages) patches.push_back(backbone::patch_rows(stage));
    out.ft_grid = sdp::mapped_anomaly_map(patches, *options.projections, pair, options.ft_temperature).cast<float>();
  }
  return out;
}

Tensor mode_grid(const ImageAnalysis& analysis, Mode mode, const std::vector<std::size_t>& stages) {
  if (mode == Mode::Baseline) return analysis.baseline_grid;
  std::vector<std::size_t> selected = stages;
  if (selected.empty()) {
    for (std::size_t j = 0; j < analysis.sdp_stage_grids.size(); ++j) selected.push_back(j);
  }
  const Tensor& first = analysis.sdp_stage_grids.at(selected.front());
  std::vector<double> sum(first.size(), 0.0);
  for (std::size_t j : selected) {
    const Tensor& g = analysis.sdp_stage_grids.at(j);
    for (std::size_t i = 0; i < g.size(); ++i) sum[i] += g[i];
  }
  Tensor m(first.shape());
  for (std::size_t i = 0; i < sum.size(); ++i) m[i] = static_cast<float>(sum[i]);
  if (mode == Mode::Sdp) return m;
  if (!analysis.ft_grid) throw ValidationError("SDP+ needs trained projections");
  return sdp::combine(m, *analysis.ft_grid);
}

DatasetAnalysis analyze_dataset(const data::DatasetIndex& index, const EncoderWeights& weights,
                                const rvs::RepresentativePair& pair, const AnalysisOptions& options,
                                std::size_t jobs) {
  const std::size_t n = index.samples.size();
  DatasetAnalysis out;
  out.images.resize(n);
  out.masks.resize(n);
  out.labels.resize(n);
  parallel_for(n, jobs, [&](std::size_t i) {
    const data::Sample& sample = index.samples[i];
    const Image image = data::read_image(sample.image);
    out.images[i] = analyze(image, weights, pair, options);
    out.masks[i] = sample.mask ? data::read_mask(*sample.mask) : Tensor({image.height, image.width});
    out.labels[i] = sample.label == data::SampleLabel::Abnormal ? 1 : 0;
  });
  return out;
}

Detection detect(const DatasetAnalysis& analysis, Mode mode, const std::vector<std::size_t>& stages,
                 double smoothing_sigma) {
  Detection out;
  for (std::size_t i = 0; i < analysis.images.size(); ++i) {
    const Tensor grid = mode_grid(analysis.images[i], mode, stages);
    const Tensor& mask = analysis.masks[i];
    Tensor pixel = sdp::upsample(grid, mask.rows(), mask.cols());
    if (smoothing_sigma > 0.0) pixel = sdp::gaussian_smooth(pixel, smoothing_sigma);
    out.pixel_maps.push_back(std::move(pixel));
    out.s_abnormal.push_back(analysis.images[i].s.abnormal());
  }
  out.scores = sdp::fuse_scores(out.s_abnormal, out.pixel_maps);
  return out;
}

metrics::MetricsReport evaluate(const DatasetAnalysis& analysis, const Detection& detection) {
  metrics::ScoredSet images{detection.scores, analysis.labels};
  const bool segmentation = std::any_of(analysis.labels.begin(), analysis.labels.end(), [](auto l) { return l == 1; });
  if (!segmentation) return metrics::evaluate(images, {}, {});
  return metrics::evaluate(images, detection.pixel_maps, analysis.masks);
}

std::vector<sdp::TrainSample> training_samples(const data::DatasetIndex& index, const EncoderWeights& weights,
                                               std::size_t jobs) {
  std::vector<sdp::TrainSample> samples(index.samples.size());
  parallel_for(samples.size(), jobs, [&](std::size_t i) {
    const data::Sample& sample = index.samples[i];
    const Image image = data::read_image(sample.image);
    const auto forward =
        backbone::forward_original(backbone::preprocess(image, weights.config, weights.preprocessing), weights);
    for (const Tensor& stage : forward.stage_outputs) samples[i].stage_tokens.push_back(backbone::patch_rows(stage));
    const Tensor mask = sample.mask ? data::read_mask(*sample.mask) : Tensor({image.height, image.width});
    if (mask.rows() != image.height || mask.cols() != image.width) {
      throw DimensionError("mask of '" + sample.image.string() + "' differs in size from the image");
    }
    samples[i].mask = mask.cast<double>();
  });
  return samples;
}

}  // namespace clipad::pipeline
