#pragma once

#include <cstddef>
#include <span>

#include "clipad/numerics/tensor.hpp"

namespace clipad::numerics {

/// Standard matrix product of a [m×k] and b [k×n]. Each output element is
/// accumulated in increasing k order, so results are bit-reproducible.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// a [m×k] times the transpose of b [n×k].
template <typename T>
BasicTensor<T> matmul_transposed(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a);

/// Elementwise sum of equally shaped tensors.
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Adds `bias` to every row of the rank-2 tensor `x` in place.
template <typename T>
void add_row_bias(BasicTensor<T>& x, std::span<const T> bias);

/// exp(x / temperature) normalized along `axis`, stabilized by subtracting the
/// slice maximum. Sums are accumulated in double.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis, double temperature = 1.0);

template <typename T>
struct NormalizeResult {
  BasicTensor<T> tensor;
  /// Slices with zero norm; these are left as zero vectors.
  std::size_t zero_slices = 0;
};

template <typename T>
NormalizeResult<T> l2_normalize(const BasicTensor<T>& x, std::size_t axis);

/// Row-wise layer normalization over the last axis of a rank-2 tensor.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                          double eps = 1e-5);

/// Exact (erf-based) GELU, in place.
template <typename T>
void gelu_inplace(BasicTensor<T>& x);

template <typename T>
double dot(std::span<const T> a, std::span<const T> b);

}  // namespace clipad::numerics
