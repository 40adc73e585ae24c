#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "clipad/numerics/tensor.hpp"

namespace clipad::rvs {

using numerics::Tensor;

enum class SelectorMethod { Mean, Pca, Kde, MeanShift, Dbscan };

std::string to_string(SelectorMethod method);
/// Accepts "mean", "pca", "kde", "mean_shift"/"mean-shift", "dbscan".
SelectorMethod parse_selector_method(const std::string& name);

struct SelectorConfig {
  SelectorMethod method = SelectorMethod::Dbscan;
  double kde_bandwidth = 0.3;
  double mean_shift_bandwidth = 2.0;
  double dbscan_eps = 0.5;
  std::size_t dbscan_min_samples = 15;

  /// Throws ValidationError unless bandwidths/eps > 0 and min_samples >= 1.
  void validate() const;
};

/// How many sampled vectors contributed to a representative vector.
struct SelectionProvenance {
  std::size_t used = 0;
  std::size_t discarded = 0;
  std::size_t clusters = 0;
  /// DBSCAN found no core point and the plain mean was returned instead.
  bool fallback_to_mean = false;
};

struct RepresentativePair {
  Tensor t_normal;    ///< [C], unit norm
  Tensor t_abnormal;  ///< [C], unit norm
  SelectorConfig method;
  SelectionProvenance normal_provenance;
  SelectionProvenance abnormal_provenance;

  /// [2, C] with the normal vector in row 0.
  Tensor stacked() const;
};

/// Relative class probabilities s (index 0 normal, 1 abnormal).
struct ClassProbabilities {
  std::vector<double> values;

  double normal() const { return values.at(0); }
  double abnormal() const { return values.at(1); }
  std::size_t size() const { return values.size(); }
};

}  // namespace clipad::rvs
