#pragma once

#include <vector>

#include "clipad/rvs/types.hpp"

namespace clipad::rvs {

using numerics::TensorD;

/// Result of clustering unit vectors. Labels are cluster ids in discovery
/// order, or -1 for DBSCAN noise.
struct Clustering {
  std::vector<int> labels;
  std::size_t clusters = 0;
};

/// Density clustering with the neighbourhood predicate |p - q|^2 <= eps^2
/// (every point is its own neighbour) and core points having at least
/// `min_samples` neighbours. Clusters are grown from cores in index order; a
/// border point joins the first cluster that reaches it.
Clustering dbscan(const TensorD& points, double eps, std::size_t min_samples);

/// Flat-kernel mean shift seeded at every point. Each seed moves to the mean
/// of the points within `bandwidth` until the shift drops below `tolerance` or
/// `max_iterations` is reached. Modes are visited by decreasing support (seed
/// index breaks ties) and kept unless closer than `bandwidth` to a kept mode;
/// points join their nearest kept mode.
Clustering mean_shift(const TensorD& points, double bandwidth, double tolerance = 1e-5,
                      std::size_t max_iterations = 300);

/// Gaussian kernel density of every point under the sample, normalized to sum 1.
std::vector<double> kde_weights(const TensorD& points, double bandwidth);

/// Index of the largest cluster; ties go to the cluster holding the lowest
/// point index. Returns -1 when every label is noise.
int largest_cluster(const Clustering& clustering);

struct Selection {
  Tensor vector;                ///< [C], unit norm
  std::vector<double> weights;  ///< non-negative row weights (empty for PCA)
  SelectionProvenance provenance;
};

/// Representative vector of a sampled feature set [N, C] (rows unit norm).
/// mean: renormalized mean. pca: first principal component of the centred
/// rows, flipped so that it agrees with the mean. kde: density-weighted mean.
/// mean_shift / dbscan: renormalized mean of the largest cluster; DBSCAN
/// without any cluster falls back to the plain mean.
Selection select_representative_detailed(const Tensor& features, const SelectorConfig& config);

Tensor select_representative(const Tensor& features, const SelectorConfig& config);

RepresentativePair select_pair(const Tensor& normal_features, const Tensor& abnormal_features,
                               const SelectorConfig& config);

/// s = softmax([F.T_n, F.T_a] / temperature).
ClassProbabilities classify(const Tensor& image_embedding, const RepresentativePair& pair,
                            double temperature = 0.01);

}  // namespace clipad::rvs
