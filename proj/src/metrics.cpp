#include "clipad/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "clipad/errors.hpp"

namespace clipad::metrics {

namespace {

// Indices sorted by score descending, ties by index ascending.
std::vector<std::size_t> descending_order(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

void require_positive(const ScoredSet& set, const char* metric) {
  if (set.positives() == 0) throw UndefinedMetricError(std::string(metric) + " needs at least one positive");
}

double f1(std::size_t tp, std::size_t fp, std::size_t fn) {
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : static_cast<double>(2 * tp) / static_cast<double>(denom);
}

void append(std::ostringstream& out, const char* key, double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", value);
  out << key << " = " << buf << '\n';
}

}  // namespace

void ScoredSet::validate() const {
  if (scores.size() != labels.size()) {
    throw ValidationError("scored set has " + std::to_string(scores.size()) + " scores but " +
                          std::to_string(labels.size()) + " labels");
  }
  for (auto l : labels) {
    if (l > 1) throw ValidationError("labels must be 0 or 1");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw ValidationError("scores must be finite");
  }
}

std::size_t ScoredSet::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
}

double auroc(const ScoredSet& set) {
  set.validate();
  const std::uint64_t n1 = set.positives();
  const std::uint64_t n0 = set.labels.size() - n1;
  if (n1 == 0 || n0 == 0) throw UndefinedMetricError("AUROC needs both classes");
  std::vector<std::size_t> order(set.scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return set.scores[a] < set.scores[b]; });
  // Twice the positive rank sum; a tie group spanning ranks a+1..b has
  // doubled average rank a+1+b.
  std::uint64_t rank_sum2 = 0;
  for (std::size_t a = 0; a < order.size();) {
    std::size_t b = a;
    std::uint64_t pos = 0;
    while (b < order.size() && set.scores[order[b]] == set.scores[order[a]]) pos += set.labels[order[b++]];
    rank_sum2 += pos * (a + 1 + b);
    a = b;
  }
  const std::uint64_t u2 = rank_sum2 - n1 * (n1 + 1);
  return static_cast<double>(u2) / (2.0 * static_cast<double>(n1) * static_cast<double>(n0));
}

double f1_max(const ScoredSet& set) {
  set.validate();
  require_positive(set, "F1-max");
  const std::size_t P = set.positives();
  const auto order = descending_order(set.scores);
  std::size_t tp = 0, fp = 0;
  double best = 0.0;
  for (std::size_t a = 0; a < order.size();) {
    std::size_t b = a;
    while (b < order.size() && set.scores[order[b]] == set.scores[order[a]]) {
      (set.labels[order[b]] ? tp : fp) += 1;
      ++b;
    }
    best = std::max(best, f1(tp, fp, P - tp));
    a = b;
  }
  return best;
}

double average_precision(const ScoredSet& set) {
  set.validate();
  require_positive(set, "average precision");
  const auto order = descending_order(set.scores);
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (set.labels[order[r]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return sum / static_cast<double>(hits);
}

std::vector<double> quantile_thresholds(std::span<const double> scores, std::size_t count) {
  if (scores.empty()) return {};
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  std::vector<double> out;
  if (count < 2) count = 2;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const auto idx = static_cast<std::size_t>((static_cast<std::uint64_t>(k) * (n - 1)) / (count - 1));
    out.push_back(sorted[idx]);
  }
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

ThresholdCurve threshold_curve(const ScoredSet& set, std::span<const double> thresholds) {
  set.validate();
  require_positive(set, "F1-max");
  const std::size_t P = set.positives();
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < set.scores.size(); ++i) (set.labels[i] ? pos : neg).push_back(set.scores[i]);
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  std::vector<double> ts(thresholds.begin(), thresholds.end());
  std::sort(ts.begin(), ts.end(), std::greater<>());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());

  ThresholdCurve curve;
  double prev_recall = 0.0;
  for (double t : ts) {
    const auto tp = static_cast<std::size_t>(pos.end() - std::lower_bound(pos.begin(), pos.end(), t));
    const auto fp = static_cast<std::size_t>(neg.end() - std::lower_bound(neg.begin(), neg.end(), t));
    curve.f1_max = std::max(curve.f1_max, f1(tp, fp, P - tp));
    if (tp + fp == 0) continue;
    const double recall = static_cast<double>(tp) / static_cast<double>(P);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    curve.average_precision += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return curve;
}

std::vector<std::size_t> label_components(const Tensor& mask, std::size_t* count) {
  if (mask.rank() != 2) throw DimensionError("label_components expects a 2-D mask");
  const std::size_t h = mask.rows(), w = mask.cols();
  std::vector<std::size_t> labels(h * w, 0);
  std::vector<std::size_t> stack;
  std::size_t next = 0;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (mask[start] <= 0.5f || labels[start] != 0) continue;
    labels[start] = ++next;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const auto y = static_cast<std::ptrdiff_t>(p / w), x = static_cast<std::ptrdiff_t>(p % w);
      for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
        for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
          const std::ptrdiff_t ny = y + dy, nx = x + dx;
          if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(h) || nx >= static_cast<std::ptrdiff_t>(w)) continue;
          const auto q = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
          if (mask[q] > 0.5f && labels[q] == 0) {
            labels[q] = next;
            stack.push_back(q);
          }
        }
      }
    }
  }
  if (count) *count = next;
  return labels;
}

double pro(std::span<const Tensor> scores, std::span<const Tensor> masks, std::size_t quantiles, double fpr_limit) {
  if (scores.size() != masks.size()) throw DimensionError("pro: one mask per score map required");
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw ValidationError("pro: FPR limit must lie in (0, 1]");
  std::vector<double> all, normal;
  std::vector<std::vector<double>> regions;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].shape() != masks[i].shape() || scores[i].rank() != 2) {
      throw DimensionError("pro: map " + std::to_string(i) + " shape " + numerics::shape_string(scores[i].shape()) +
                           " differs from its mask " + numerics::shape_string(masks[i].shape()));
    }
    std::size_t count = 0;
    const auto labels = label_components(masks[i], &count);
    const std::size_t base = regions.size();
    regions.resize(base + count);
    for (std::size_t p = 0; p < labels.size(); ++p) {
      const double s = scores[i][p];
      all.push_back(s);
      if (labels[p] == 0) {
        normal.push_back(s);
      } else {
        regions[base + labels[p] - 1].push_back(s);
      }
    }
  }
  if (regions.empty()) throw UndefinedMetricError("PRO needs at least one anomalous region");
  if (normal.empty()) throw UndefinedMetricError("PRO needs at least one normal pixel");
  std::sort(normal.begin(), normal.end());
  for (auto& r : regions) std::sort(r.begin(), r.end());

  std::vector<double> ts = quantile_thresholds(all, quantiles + 1);
  std::reverse(ts.begin(), ts.end());

  double area = 0.0, prev_fpr = 0.0, prev_pro = 0.0;
  for (double t : ts) {
    const auto fp = static_cast<std::size_t>(normal.end() - std::lower_bound(normal.begin(), normal.end(), t));
    const double fpr = static_cast<double>(fp) / static_cast<double>(normal.size());
    double overlap = 0.0;
    for (const auto& r : regions) {
      const auto hit = static_cast<std::size_t>(r.end() - std::lower_bound(r.begin(), r.end(), t));
      overlap += static_cast<double>(hit) / static_cast<double>(r.size());
    }
    const double p = overlap / static_cast<double>(regions.size());
    if (fpr >= fpr_limit) {
      const double p_lim = fpr > prev_fpr ? prev_pro + (p - prev_pro) * (fpr_limit - prev_fpr) / (fpr - prev_fpr) : p;
      area += (fpr_limit - prev_fpr) * (prev_pro + p_lim) / 2.0;
      prev_fpr = fpr_limit;
      break;
    }
    area += (fpr - prev_fpr) * (prev_pro + p) / 2.0;
    prev_fpr = fpr;
    prev_pro = p;
  }
  return area / fpr_limit;
}

std::string MetricsReport::to_text() const {
  std::ostringstream out;
  out << "images = " << images << '\n';
  out << "anomalous_images = " << anomalous_images << '\n';
  out << "pixels = " << pixels << '\n';
  out << "anomalous_pixels = " << anomalous_pixels << '\n';
  out << "pixel_thresholds = " << pixel_thresholds << '\n';
  out << "pro_quantiles = " << pro_quantiles << '\n';
  if (image) {
    append(out, "image.auroc", image->auroc);
    append(out, "image.f1_max", image->f1_max);
    append(out, "image.ap", image->ap);
  }
  if (pixel) {
    append(out, "pixel.auroc", pixel->auroc);
    append(out, "pixel.f1_max", pixel->f1_max);
    append(out, "pixel.ap", pixel->ap);
    append(out, "pixel.pro", pixel->pro);
  }
  return out.str();
}

MetricsReport evaluate(const ScoredSet& images, std::span<const Tensor> maps, std::span<const Tensor> masks,
                       std::size_t pixel_thresholds, std::size_t pro_quantiles) {
  MetricsReport report;
  report.pixel_thresholds = pixel_thresholds;
  report.pro_quantiles = pro_quantiles;
  if (!images.scores.empty()) {
    report.images = images.scores.size();
    report.anomalous_images = images.positives();
    report.image = ImageMetrics{auroc(images), f1_max(images), average_precision(images)};
  }
  if (!maps.empty()) {
    if (maps.size() != masks.size()) throw DimensionError("evaluate: one mask per map required");
    ScoredSet pixels;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      if (maps[i].shape() != masks[i].shape()) {
        throw DimensionError("evaluate: map " + std::to_string(i) + " shape " + numerics::shape_string(maps[i].shape()) +
                             " differs from its mask " + numerics::shape_string(masks[i].shape()));
      }
      for (std::size_t p = 0; p < maps[i].size(); ++p) {
        pixels.scores.push_back(maps[i][p]);
        pixels.labels.push_back(masks[i][p] > 0.5f ? 1 : 0);
      }
    }
    report.pixels = pixels.scores.size();
    report.anomalous_pixels = pixels.positives();
    const auto ts = quantile_thresholds(pixels.scores, pixel_thresholds);
    const ThresholdCurve curve = threshold_curve(pixels, ts);
    report.pixel = PixelMetrics{auroc(pixels), curve.f1_max, curve.average_precision, pro(maps, masks, pro_quantiles)};
  }
  return report;
}

}  // namespace clipad::metrics
