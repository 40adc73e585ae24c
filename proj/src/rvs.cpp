#include "clipad/rvs/rvs.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "clipad/errors.hpp"
#include "clipad/numerics/ops.hpp"

namespace clipad::rvs {

std::string to_string(SelectorMethod method) {
  switch (method) {
    case SelectorMethod::Mean: return "mean";
    case SelectorMethod::Pca: return "pca";
    case SelectorMethod::Kde: return "kde";
    case SelectorMethod::MeanShift: return "mean_shift";
    case SelectorMethod::Dbscan: return "dbscan";
  }
  return "unknown";
}

SelectorMethod parse_selector_method(const std::string& name) {
  if (name == "mean") return SelectorMethod::Mean;
  if (name == "pca") return SelectorMethod::Pca;
  if (name == "kde") return SelectorMethod::Kde;
  if (name == "mean_shift" || name == "mean-shift" || name == "meanshift") return SelectorMethod::MeanShift;
  if (name == "dbscan") return SelectorMethod::Dbscan;
  throw ValidationError("unknown selector method '" + name + "'");
}

void SelectorConfig::validate() const {
  if (!(kde_bandwidth > 0.0)) throw ValidationError("kde bandwidth must be positive");
  if (!(mean_shift_bandwidth > 0.0)) throw ValidationError("mean-shift bandwidth must be positive");
  if (!(dbscan_eps > 0.0)) throw ValidationError("dbscan eps must be positive");
  if (dbscan_min_samples < 1) throw ValidationError("dbscan min_samples must be at least 1");
}

Tensor RepresentativePair::stacked() const {
  const std::size_t c = t_normal.size();
  Tensor out({2, c});
  for (std::size_t i = 0; i < c; ++i) {
    out(0, i) = t_normal[i];
    out(1, i) = t_abnormal[i];
  }
  return out;
}

namespace {

double squared_distance(const TensorD& points, std::size_t a, std::size_t b) {
  double acc = 0.0;
  for (std::size_t c = 0; c < points.cols(); ++c) {
    const double d = points(a, c) - points(b, c);
    acc += d * d;
  }
  return acc;
}

double squared_distance_to(const TensorD& points, std::size_t a, const std::vector<double>& center) {
  double acc = 0.0;
  for (std::size_t c = 0; c < points.cols(); ++c) {
    const double d = points(a, c) - center[c];
    acc += d * d;
  }
  return acc;
}

Tensor normalized(const std::vector<double>& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  Tensor out({v.size()});
  if (sq == 0.0) return out;
  const double inv = 1.0 / std::sqrt(sq);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * inv);
  return out;
}

std::vector<double> weighted_sum(const TensorD& points, const std::vector<double>& weights) {
  std::vector<double> acc(points.cols(), 0.0);
  for (std::size_t r = 0; r < points.rows(); ++r) {
    if (weights[r] == 0.0) continue;
    for (std::size_t c = 0; c < points.cols(); ++c) acc[c] += weights[r] * points(r, c);
  }
  return acc;
}

std::vector<double> uniform_weights(std::size_t n) {
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

std::vector<double> cluster_weights(const Clustering& clustering, int cluster) {
  std::size_t members = 0;
  for (int l : clustering.labels) members += l == cluster ? 1 : 0;
  std::vector<double> w(clustering.labels.size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (clustering.labels[i] == cluster) w[i] = 1.0 / static_cast<double>(members);
  }
  return w;
}

}  // namespace

Clustering dbscan(const TensorD& points, double eps, std::size_t min_samples) {
  const std::size_t n = points.rows();
  const double eps2 = eps * eps;
  std::vector<std::vector<std::size_t>> neighbours(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (squared_distance(points, i, j) <= eps2) neighbours[i].push_back(j);
    }
  }
  Clustering out;
  out.labels.assign(n, -1);
  for (std::size_t seed = 0; seed < n; ++seed) {
    if (out.labels[seed] != -1 || neighbours[seed].size() < min_samples) continue;
    const int id = static_cast<int>(out.clusters++);
    out.labels[seed] = id;
    std::deque<std::size_t> frontier{seed};
    while (!frontier.empty()) {
      const std::size_t p = frontier.front();
      frontier.pop_front();
      if (neighbours[p].size() < min_samples) continue;  // border point: do not expand
      for (std::size_t q : neighbours[p]) {
        if (out.labels[q] != -1) continue;
        out.labels[q] = id;
        frontier.push_back(q);
      }
    }
  }
  return out;
}

Clustering mean_shift(const TensorD& points, double bandwidth, double tolerance, std::size_t max_iterations) {
  const std::size_t n = points.rows(), dims = points.cols();
  const double bw2 = bandwidth * bandwidth;

  struct Mode {
    std::vector<double> center;
    std::size_t support = 0;
    std::size_t seed = 0;
  };
  std::vector<Mode> modes(n);
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<double> center(points.row(s).begin(), points.row(s).end());
    for (std::size_t it = 0; it < max_iterations; ++it) {
      std::vector<double> next(dims, 0.0);
      std::size_t count = 0;
      for (std::size_t p = 0; p < n; ++p) {
        if (squared_distance_to(points, p, center) <= bw2) {
          for (std::size_t c = 0; c < dims; ++c) next[c] += points(p, c);
          ++count;
        }
      }
      if (count == 0) break;
      double shift2 = 0.0;
      for (std::size_t c = 0; c < dims; ++c) {
        next[c] /= static_cast<double>(count);
        shift2 += (next[c] - center[c]) * (next[c] - center[c]);
      }
      center = std::move(next);
      if (std::sqrt(shift2) < tolerance) break;
    }
    std::size_t support = 0;
    for (std::size_t p = 0; p < n; ++p) support += squared_distance_to(points, p, center) <= bw2 ? 1 : 0;
    modes[s] = {std::move(center), support, s};
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return modes[a].support > modes[b].support; });
  std::vector<std::vector<double>> kept;
  for (std::size_t idx : order) {
    const auto& m = modes[idx].center;
    bool merged = false;
    for (const auto& k : kept) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < dims; ++c) d2 += (m[c] - k[c]) * (m[c] - k[c]);
      if (d2 < bw2) {
        merged = true;
        break;
      }
    }
    if (!merged) kept.push_back(m);
  }

  Clustering out;
  out.clusters = kept.size();
  out.labels.assign(n, -1);
  for (std::size_t p = 0; p < n; ++p) {
    double best = 0.0;
    for (std::size_t k = 0; k < kept.size(); ++k) {
      const double d2 = squared_distance_to(points, p, kept[k]);
      if (out.labels[p] == -1 || d2 < best) {
        best = d2;
        out.labels[p] = static_cast<int>(k);
      }
    }
  }
  return out;
}

std::vector<double> kde_weights(const TensorD& points, double bandwidth) {
  const std::size_t n = points.rows();
  const double denom = 2.0 * bandwidth * bandwidth;
  std::vector<double> density(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) density[i] += std::exp(-squared_distance(points, i, j) / denom);
    total += density[i];
  }
  for (double& d : density) d /= total;
  return density;
}

int largest_cluster(const Clustering& clustering) {
  std::vector<std::size_t> sizes(clustering.clusters, 0);
  std::vector<std::size_t> first(clustering.clusters, clustering.labels.size());
  for (std::size_t i = 0; i < clustering.labels.size(); ++i) {
    const int l = clustering.labels[i];
    if (l < 0) continue;
    ++sizes[static_cast<std::size_t>(l)];
    first[static_cast<std::size_t>(l)] = std::min(first[static_cast<std::size_t>(l)], i);
  }
  int best = -1;
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    if (sizes[c] == 0) continue;
    if (best < 0 || sizes[c] > sizes[static_cast<std::size_t>(best)] ||
        (sizes[c] == sizes[static_cast<std::size_t>(best)] && first[c] < first[static_cast<std::size_t>(best)])) {
      best = static_cast<int>(c);
    }
  }
  return best;
}

namespace {

Selection from_weights(const TensorD& points, std::vector<double> weights, SelectionProvenance provenance) {
  Selection out;
  out.vector = normalized(weighted_sum(points, weights));
  out.weights = std::move(weights);
  out.provenance = provenance;
  return out;
}

Selection from_clustering(const TensorD& points, const Clustering& clustering, bool allow_fallback) {
  const int best = largest_cluster(clustering);
  SelectionProvenance prov;
  prov.clusters = clustering.clusters;
  if (best < 0) {
    if (!allow_fallback) throw ValidationError("clustering produced no cluster");
    prov.used = points.rows();
    prov.fallback_to_mean = true;
    return from_weights(points, uniform_weights(points.rows()), prov);
  }
  auto weights = cluster_weights(clustering, best);
  prov.used = static_cast<std::size_t>(std::count_if(weights.begin(), weights.end(), [](double w) { return w > 0; }));
  prov.discarded = points.rows() - prov.used;
  return from_weights(points, std::move(weights), prov);
}

Selection principal_component(const TensorD& points) {
  const std::size_t n = points.rows(), dims = points.cols();
  Eigen::MatrixXd x(n, dims);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < dims; ++c) x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = points(r, c);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centred = x.rowwise() - mean;
  const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(n);

  SelectionProvenance prov;
  prov.used = n;
  std::vector<double> direction(mean.data(), mean.data() + dims);
  // No spread (a single sample or identical rows): every direction is a
  // principal one, so the mean direction is the only meaningful answer.
  if (cov.trace() > 1e-20) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    const Eigen::VectorXd top = solver.eigenvectors().col(static_cast<Eigen::Index>(dims) - 1);
    const double agreement = mean.dot(top.transpose());
    const double sign = agreement < 0.0 ? -1.0 : 1.0;
    for (std::size_t c = 0; c < dims; ++c) direction[c] = sign * top(static_cast<Eigen::Index>(c));
  }
  Selection out;
  out.vector = normalized(direction);
  out.provenance = prov;
  return out;
}

}  // namespace

Selection select_representative_detailed(const Tensor& features, const SelectorConfig& config) {
  config.validate();
  if (features.rank() != 2) throw DimensionError("select_representative expects [N x C] features");
  if (features.rows() == 0) throw ValidationError("cannot select a representative from an empty distribution");
  const TensorD points = features.cast<double>();
  const std::size_t n = points.rows();
  switch (config.method) {
    case SelectorMethod::Mean:
      return from_weights(points, uniform_weights(n), {n, 0, 1, false});
    case SelectorMethod::Pca:
      return principal_component(points);
    case SelectorMethod::Kde:
      return from_weights(points, kde_weights(points, config.kde_bandwidth), {n, 0, 1, false});
    case SelectorMethod::MeanShift:
      return from_clustering(points, mean_shift(points, config.mean_shift_bandwidth), false);
    case SelectorMethod::Dbscan:
      return from_clustering(points, dbscan(points, config.dbscan_eps, config.dbscan_min_samples), true);
  }
  throw ValidationError("unknown selector method");
}

Tensor select_representative(const Tensor& features, const SelectorConfig& config) {
  return select_representative_detailed(features, config).vector;
}

RepresentativePair select_pair(const Tensor& normal_features, const Tensor& abnormal_features,
                               const SelectorConfig& config) {
  Selection normal = select_representative_detailed(normal_features, config);
  Selection abnormal = select_representative_detailed(abnormal_features, config);
  RepresentativePair pair;
  pair.t_normal = std::move(normal.vector);
  pair.t_abnormal = std::move(abnormal.vector);
  pair.method = config;
  pair.normal_provenance = normal.provenance;
  pair.abnormal_provenance = abnormal.provenance;
  return pair;
}

ClassProbabilities classify(const Tensor& image_embedding, const RepresentativePair& pair, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
  if (image_embedding.size() != pair.t_normal.size() || image_embedding.size() != pair.t_abnormal.size()) {
    throw DimensionError("classify: embedding and text vectors differ in length");
  }
  const double sn = numerics::dot<float>(image_embedding.data(), pair.t_normal.data()) / temperature;
  const double sa = numerics::dot<float>(image_embedding.data(), pair.t_abnormal.data()) / temperature;
  const double hi = std::max(sn, sa);
  const double en = std::exp(sn - hi), ea = std::exp(sa - hi);
  return ClassProbabilities{{en / (en + ea), ea / (en + ea)}};
}

}  // namespace clipad::rvs
