#include "clipad/sdp/sdp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "clipad/errors.hpp"
#include "clipad/numerics/ops.hpp"
#include "clipad/rvs/rvs.hpp"

namespace clipad::sdp {

namespace {

struct Tap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double frac = 0.0;
};

std::vector<Tap> taps(std::size_t in, std::size_t out) {
  std::vector<Tap> result(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double pos = (in == 1 || out == 1) ? 0.0
                                             : static_cast<double>(o) * static_cast<double>(in - 1) /
                                                   static_cast<double>(out - 1);
    const auto lo = std::min(static_cast<std::size_t>(std::floor(pos)), in - 1);
    result[o] = {lo, std::min(lo + 1, in - 1), pos - static_cast<double>(lo)};
  }
  return result;
}

template <typename T>
numerics::BasicTensor<T> upsample_impl(const numerics::BasicTensor<T>& grid, std::size_t height, std::size_t width) {
  if (grid.rank() != 2 || grid.rows() == 0 || grid.cols() == 0) throw DimensionError("upsample: grid must be non-empty 2-D");
  if (height == 0 || width == 0) throw DimensionError("upsample: target must be non-empty");
  const auto ty = taps(grid.rows(), height);
  const auto tx = taps(grid.cols(), width);
  numerics::BasicTensor<T> out({height, width});
  for (std::size_t y = 0; y < height; ++y) {
    const Tap& a = ty[y];
    for (std::size_t x = 0; x < width; ++x) {
      const Tap& b = tx[x];
      const double top = (1.0 - b.frac) * grid(a.lo, b.lo) + b.frac * grid(a.lo, b.hi);
      const double bottom = (1.0 - b.frac) * grid(a.hi, b.lo) + b.frac * grid(a.hi, b.hi);
      out(y, x) = static_cast<T>((1.0 - a.frac) * top + a.frac * bottom);
    }
  }
  return out;
}

template <typename T>
numerics::BasicTensor<T> upsample_backward_impl(const numerics::BasicTensor<T>& grad, std::size_t rows,
                                                std::size_t cols) {
  if (grad.rank() != 2 || rows == 0 || cols == 0) throw DimensionError("upsample_backward: bad shapes");
  const auto ty = taps(rows, grad.rows());
  const auto tx = taps(cols, grad.cols());
  std::vector<double> acc(rows * cols, 0.0);
  for (std::size_t y = 0; y < grad.rows(); ++y) {
    const Tap& a = ty[y];
    for (std::size_t x = 0; x < grad.cols(); ++x) {
      const Tap& b = tx[x];
      const double g = grad(y, x);
      acc[a.lo * cols + b.lo] += g * (1.0 - a.frac) * (1.0 - b.frac);
      acc[a.lo * cols + b.hi] += g * (1.0 - a.frac) * b.frac;
      acc[a.hi * cols + b.lo] += g * a.frac * (1.0 - b.frac);
      acc[a.hi * cols + b.hi] += g * a.frac * b.frac;
    }
  }
  numerics::BasicTensor<T> out({rows, cols});
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i]);
  return out;
}

std::size_t grid_side(std::size_t patches) {
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patches))));
  if (g * g != patches) throw DimensionError("patch count " + std::to_string(patches) + " is not a square");
  return g;
}

double max_value(const Tensor& t) {
  double m = -std::numeric_limits<double>::infinity();
  for (float v : t.values()) m = std::max(m, static_cast<double>(v));
  return m;
}

}  // namespace

Tensor stage_map(const Tensor& surgery_tokens, const EncoderWeights& weights, const Tensor& text_features,
                 const rvs::ClassProbabilities& s) {
  const Tensor projected = backbone::project_to_joint(backbone::patch_rows(surgery_tokens), weights);
  const Tensor p = surgery::feature_surgery(projected, text_features, s);
  const std::size_t g = grid_side(p.rows());
  Tensor out({g, g});
  for (std::size_t l = 0; l < p.rows(); ++l) out[l] = p(l, p.cols() - 1);
  return out;
}

SdpResult sdp_from_forward(const surgery::DualPathForward& forward, const EncoderWeights& weights,
                           const rvs::RepresentativePair& pair, const SdpOptions& options, std::size_t height,
                           std::size_t width) {
  std::vector<std::size_t> stages = options.stages;
  if (stages.empty()) {
    for (std::size_t j = 0; j < forward.surgery_stages.size(); ++j) stages.push_back(j);
  }
  SdpResult result;
  result.s = rvs::classify(forward.class_embedding, pair, options.temperature);
  const Tensor text = pair.stacked();
  std::vector<double> sum;
  for (std::size_t j : stages) {
    if (j >= forward.surgery_stages.size()) throw ValidationError("stage index " + std::to_string(j) + " out of range");
    Tensor m = stage_map(forward.surgery_stages[j], weights, text, result.s);
    if (sum.empty()) sum.assign(m.size(), 0.0);
    for (std::size_t i = 0; i < m.size(); ++i) sum[i] += m[i];
    result.stage_maps.push_back(std::move(m));
  }
  const numerics::Shape grid_shape = result.stage_maps.front().shape();
  Tensor grid(grid_shape);
  for (std::size_t i = 0; i < sum.size(); ++i) grid[i] = static_cast<float>(sum[i]);
  Tensor pixel = upsample(grid, height, width);
  if (options.smoothing_sigma > 0.0) pixel = gaussian_smooth(pixel, options.smoothing_sigma);
  result.map.image_score = anomaly_score(result.s, max_value(pixel));
  result.map.grid = std::move(grid);
  result.map.pixel = std::move(pixel);
  return result;
}

SdpResult sdp_forward(const Tensor& image, const EncoderWeights& weights, const rvs::RepresentativePair& pair,
                      const SdpOptions& options) {
  const auto forward = surgery::forward_dual_path(image, weights, options.surgery);
  return sdp_from_forward(forward, weights, pair, options, image.dim(0), image.dim(1));
}

Tensor upsample(const Tensor& grid, std::size_t height, std::size_t width) {
  return upsample_impl(grid, height, width);
}
numerics::TensorD upsample(const numerics::TensorD& grid, std::size_t height, std::size_t width) {
  return upsample_impl(grid, height, width);
}
Tensor upsample_backward(const Tensor& grad, std::size_t rows, std::size_t cols) {
  return upsample_backward_impl(grad, rows, cols);
}
numerics::TensorD upsample_backward(const numerics::TensorD& grad, std::size_t rows, std::size_t cols) {
  return upsample_backward_impl(grad, rows, cols);
}

Tensor gaussian_smooth(const Tensor& map, double sigma) {
  if (map.rank() != 2) throw DimensionError("gaussian_smooth expects a 2-D map");
  if (sigma <= 0.0) return map;
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& k : kernel) k /= total;

  auto reflect = [](std::ptrdiff_t i, std::ptrdiff_t n) {
    if (n == 1) return std::ptrdiff_t{0};
    const std::ptrdiff_t period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
  };
  const auto h = static_cast<std::ptrdiff_t>(map.rows());
  const auto w = static_cast<std::ptrdiff_t>(map.cols());
  std::vector<double> tmp(map.size());
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
        acc += kernel[static_cast<std::size_t>(k + radius)] * map(static_cast<std::size_t>(y), static_cast<std::size_t>(reflect(x + k, w)));
      }
      tmp[static_cast<std::size_t>(y * w + x)] = acc;
    }
  }
  Tensor out(map.shape());
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
        acc += kernel[static_cast<std::size_t>(k + radius)] * tmp[static_cast<std::size_t>(reflect(y + k, h) * w + x)];
      }
      out(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = static_cast<float>(acc);
    }
  }
  return out;
}

double anomaly_score(const rvs::ClassProbabilities& s, double normalized_map_max) {
  return s.abnormal() + normalized_map_max;
}

std::vector<double> fuse_scores(const std::vector<double>& s_abnormal, const std::vector<Tensor>& pixel_maps) {
  if (s_abnormal.size() != pixel_maps.size()) throw DimensionError("fuse_scores: one map per probability required");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  std::vector<double> maxima(pixel_maps.size());
  for (std::size_t i = 0; i < pixel_maps.size(); ++i) {
    for (float v : pixel_maps[i].values()) {
      lo = std::min(lo, static_cast<double>(v));
      hi = std::max(hi, static_cast<double>(v));
    }
    maxima[i] = max_value(pixel_maps[i]);
  }
  std::vector<double> scores(pixel_maps.size());
  for (std::size_t i = 0; i < pixel_maps.size(); ++i) {
    const double normalized = hi > lo ? (maxima[i] - lo) / (hi - lo) : 0.0;
    scores[i] = s_abnormal[i] + normalized;
  }
  return scores;
}

Tensor direct_similarity_grid(const Tensor& last_stage_tokens, const EncoderWeights& weights,
                              const rvs::RepresentativePair& pair, double temperature) {
  const Tensor projected = backbone::project_to_joint(backbone::patch_rows(last_stage_tokens), weights);
  const Tensor probs = numerics::softmax(numerics::matmul_transposed(projected, pair.stacked()), 1, temperature);
  const std::size_t g = grid_side(probs.rows());
  Tensor out({g, g});
  for (std::size_t l = 0; l < probs.rows(); ++l) out[l] = probs(l, 1);
  return out;
}

AnomalyMap direct_similarity_baseline(const Tensor& image, const EncoderWeights& weights,
                                      const rvs::RepresentativePair& pair, double temperature) {
  const auto forward = backbone::forward_original(image, weights);
  AnomalyMap map;
  map.grid = direct_similarity_grid(forward.stage_outputs.back(), weights, pair, temperature);
  map.pixel = upsample(map.grid, image.dim(0), image.dim(1));
  const auto s = rvs::classify(forward.class_embedding, pair, temperature);
  map.image_score = anomaly_score(s, max_value(map.pixel));
  return map;
}

}  // namespace clipad::sdp
