#pragma once

// Brute-force reference implementations used as test oracles. They favour
// directness over speed and share no code with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <utility>
#include <vector>

#include "clipad/numerics/random.hpp"
#include "clipad/numerics/tensor.hpp"

namespace clipad::oracle {

using numerics::Rng;
using numerics::Tensor;
using numerics::TensorD;

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline std::vector<std::vector<double>> rows_of(const TensorD& t) {
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < t.rows(); ++r) out.emplace_back(t.row(r).begin(), t.row(r).end());
  return out;
}

/// Density clustering from the definition: cores have >= min_samples points
/// within eps (self included); clusters are the connected components of the
/// core graph, ordered by their lowest core index; a border point belongs to
/// the earliest cluster holding one of its core neighbours.
inline std::vector<int> dbscan(const TensorD& points, double eps, std::size_t min_samples) {
  const auto p = rows_of(points);
  const std::size_t n = p.size();
  std::vector<std::vector<bool>> near(n, std::vector<bool>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) near[i][j] = sq_dist(p[i], p[j]) <= eps * eps;
  }
  std::vector<bool> core(n);
  for (std::size_t i = 0; i < n; ++i) {
    core[i] = static_cast<std::size_t>(std::count(near[i].begin(), near[i].end(), true)) >= min_samples;
  }
  // Transitive closure over cores.
  std::vector<std::vector<bool>> reach(n, std::vector<bool>(n, false));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) reach[i][j] = core[i] && core[j] && near[i][j];
  }
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!reach[i][k]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (reach[k][j]) reach[i][j] = true;
      }
    }
  }
  std::vector<int> labels(n, -1);
  int next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!core[i] || labels[i] != -1) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (reach[i][j]) labels[j] = next;
    }
    ++next;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (core[i]) continue;
    int best = -1;
    for (std::size_t j = 0; j < n; ++j) {
      if (core[j] && near[i][j] && (best == -1 || labels[j] < best)) best = labels[j];
    }
    labels[i] = best;
  }
  return labels;
}

/// Flat-kernel mean shift from every point, modes merged in order of
/// decreasing support (then seed index), points assigned to the nearest kept
/// mode (lowest mode index on ties).
inline std::vector<int> mean_shift(const TensorD& points, double bandwidth, double tolerance = 1e-5,
                                   std::size_t max_iterations = 300) {
  const auto p = rows_of(points);
  const std::size_t n = p.size();
  const double bw2 = bandwidth * bandwidth;
  auto window_mean = [&](const std::vector<double>& c, std::size_t& count) {
    std::vector<double> m(c.size(), 0.0);
    count = 0;
    for (const auto& q : p) {
      if (sq_dist(q, c) > bw2) continue;
      ++count;
      for (std::size_t d = 0; d < c.size(); ++d) m[d] += q[d];
    }
    for (double& v : m) v /= static_cast<double>(std::max<std::size_t>(count, 1));
    return m;
  };
  std::vector<std::vector<double>> centers(n);
  std::vector<std::size_t> support(n);
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<double> c = p[s];
    for (std::size_t it = 0; it < max_iterations; ++it) {
      std::size_t count = 0;
      const auto m = window_mean(c, count);
      if (count == 0) break;
      const double shift = std::sqrt(sq_dist(m, c));
      c = m;
      if (shift < tolerance) break;
    }
    centers[s] = c;
    support[s] = 0;
    for (const auto& q : p) support[s] += sq_dist(q, c) <= bw2 ? 1 : 0;
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return support[a] != support[b] ? support[a] > support[b] : a < b;
  });
  std::vector<std::vector<double>> kept;
  for (std::size_t s : order) {
    bool close = false;
    for (const auto& k : kept) close = close || sq_dist(centers[s], k) < bw2;
    if (!close) kept.push_back(centers[s]);
  }
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < kept.size(); ++k) {
      const double d = sq_dist(p[i], kept[k]);
      if (d < best) {
        best = d;
        labels[i] = static_cast<int>(k);
      }
    }
  }
  return labels;
}

/// Renormalized mean of the largest cluster (ties: cluster containing the
/// lowest point index); the plain mean when every point is noise.
inline std::vector<double> largest_cluster_mean(const TensorD& points, const std::vector<int>& labels) {
  const auto p = rows_of(points);
  int best = -1;
  std::size_t best_size = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    const auto size = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), labels[i]));
    if (size > best_size) {
      best_size = size;
      best = labels[i];
    }
  }
  std::vector<double> mean(points.cols(), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (best >= 0 && labels[i] != best) continue;
    for (std::size_t d = 0; d < mean.size(); ++d) mean[d] += p[i][d];
  }
  double norm = 0.0;
  for (double v : mean) norm += v * v;
  norm = std::sqrt(norm);
  for (double& v : mean) v /= norm;
  return mean;
}

/// Unit vectors drawn around a few random centres.
inline TensorD clustered_unit_rows(Rng& rng, std::size_t n, std::size_t c, std::size_t centres, double spread) {
  std::vector<std::vector<double>> mu(centres, std::vector<double>(c));
  for (auto& m : mu) {
    for (double& v : m) v = rng.normal();
  }
  TensorD out({n, c});
  for (std::size_t r = 0; r < n; ++r) {
    const auto& m = mu[rng.below(centres)];
    double norm0 = std::sqrt(std::inner_product(m.begin(), m.end(), m.begin(), 0.0));
    double norm = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      out(r, k) = m[k] / norm0 + spread * rng.normal();
      norm += out(r, k) * out(r, k);
    }
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < c; ++k) out(r, k) /= norm;
  }
  return out;
}

// ---- metrics ----

/// Pairwise Mann-Whitney count: (2 wins + ties) / (2 n1 n0).
inline double auroc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  std::uint64_t twice = 0, n1 = 0, n0 = 0;
  for (std::size_t i = 0; i < s.size(); ++i) (y[i] ? n1 : n0) += 1;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      twice += s[i] > s[j] ? 2 : (s[i] == s[j] ? 1 : 0);
    }
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(n1) * static_cast<double>(n0));
}

/// Best F1 of "score >= t" over every candidate threshold t in `thresholds`.
inline double f1_max(const std::vector<double>& s, const std::vector<std::uint8_t>& y,
                     const std::vector<double>& thresholds) {
  double best = 0.0;
  for (double t : thresholds) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const bool pred = s[i] >= t;
      if (pred && y[i]) ++tp;
      if (pred && !y[i]) ++fp;
      if (!pred && y[i]) ++fn;
    }
    if (2 * tp + fp + fn > 0) best = std::max(best, static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn));
  }
  return best;
}

inline double f1_max(const std::vector<double>& s, const std::vector<std::uint8_t>& y) { return f1_max(s, y, s); }

/// Precision at each positive's rank (score descending, index ascending),
/// each rank found by counting; summed in rank order.
inline double average_precision(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  std::vector<std::pair<std::size_t, double>> at_rank;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    std::size_t rank = 1, hits = 1;
    for (std::size_t j = 0; j < s.size(); ++j) {
      const bool before = s[j] > s[i] || (s[j] == s[i] && j < i);
      if (!before) continue;
      ++rank;
      if (y[j]) ++hits;
    }
    at_rank.emplace_back(rank, static_cast<double>(hits) / static_cast<double>(rank));
  }
  std::sort(at_rank.begin(), at_rank.end());
  double sum = 0.0;
  for (const auto& [rank, precision] : at_rank) sum += precision;
  return sum / static_cast<double>(at_rank.size());
}

/// 8-connected regions by repeated relabelling to the minimum neighbour label
/// until nothing changes.
inline std::vector<int> regions(const Tensor& mask) {
  const std::size_t h = mask.rows(), w = mask.cols();
  std::vector<int> label(h * w, -1);
  for (std::size_t i = 0; i < h * w; ++i) label[i] = mask[i] > 0.5f ? static_cast<int>(i) : -1;
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        if (label[i] < 0) continue;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
            if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w)) continue;
            const int other = label[static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx)];
            if (other >= 0 && other < label[i]) {
              label[i] = other;
              changed = true;
            }
          }
        }
      }
    }
  }
  return label;
}

/// PRO over every distinct score as a threshold (plus the empty prediction),
/// enumerating regions explicitly and counting overlaps pixel by pixel.
inline double pro(const std::vector<Tensor>& scores, const std::vector<Tensor>& masks, double limit = 0.3) {
  struct Region {
    std::size_t image;
    std::vector<std::size_t> pixels;
  };
  std::vector<Region> all_regions;
  std::vector<double> thresholds;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    const auto label = regions(masks[k]);
    std::map<int, std::size_t> index_of;
    for (std::size_t i = 0; i < label.size(); ++i) {
      thresholds.push_back(scores[k][i]);
      if (label[i] < 0) continue;
      auto [it, fresh] = index_of.emplace(label[i], all_regions.size());
      if (fresh) all_regions.push_back({k, {}});
      all_regions[it->second].pixels.push_back(i);
    }
  }
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  std::vector<std::pair<double, double>> curve{{0.0, 0.0}};
  for (double t : thresholds) {
    std::size_t fp = 0, negatives = 0;
    for (std::size_t k = 0; k < scores.size(); ++k) {
      for (std::size_t i = 0; i < scores[k].size(); ++i) {
        if (masks[k][i] > 0.5f) continue;
        ++negatives;
        if (scores[k][i] >= t) ++fp;
      }
    }
    double overlap = 0.0;
    for (const auto& r : all_regions) {
      std::size_t hit = 0;
      for (std::size_t i : r.pixels) hit += scores[r.image][i] >= t ? 1 : 0;
      overlap += static_cast<double>(hit) / static_cast<double>(r.pixels.size());
    }
    curve.emplace_back(static_cast<double>(fp) / static_cast<double>(negatives),
                       overlap / static_cast<double>(all_regions.size()));
  }
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    auto [x0, y0] = curve[i - 1];
    auto [x1, y1] = curve[i];
    if (x0 >= limit) break;
    if (x1 > limit) {
      y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
      x1 = limit;
    }
    area += (x1 - x0) * (y0 + y1) / 2.0;
  }
  return area / limit;
}

}  // namespace clipad::oracle
