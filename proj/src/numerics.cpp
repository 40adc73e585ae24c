#include <algorithm>
#include <cmath>
#include <limits>

#include "clipad/numerics/ops.hpp"
#include "clipad/numerics/tensor.hpp"

namespace clipad::numerics {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {

template <typename T>
void require_rank2(const BasicTensor<T>& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a rank-2 tensor, got " +
                         shape_string(t.shape()));
  }
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisView {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisView view_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul inner extents differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  BasicTensor<T> out({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> matmul_transposed(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a, "matmul_transposed");
  require_rank2(b, "matmul_transposed");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_transposed inner extents differ: " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()) + "^T");
  }
  BasicTensor<T> out({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = pb + j * k;
      T acc{};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out(i, j) = acc;
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  BasicTensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes differ " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  BasicTensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <typename T>
void add_row_bias(BasicTensor<T>& x, std::span<const T> bias) {
  require_rank2(x, "add_row_bias");
  if (bias.size() != x.dim(1)) {
    throw DimensionError("bias length " + std::to_string(bias.size()) + " does not match width " +
                         std::to_string(x.dim(1)));
  }
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
  }
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("softmax temperature must be positive");
  const AxisView v = view_axis(x.shape(), axis);
  BasicTensor<T> out(x.shape());
  std::vector<double> buf(v.extent);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.extent * v.inner + in;
      double hi = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < v.extent; ++e) {
        buf[e] = static_cast<double>(x[base + e * v.inner]) / temperature;
        hi = std::max(hi, buf[e]);
      }
      double sum = 0.0;
      for (std::size_t e = 0; e < v.extent; ++e) {
        buf[e] = std::exp(buf[e] - hi);
        sum += buf[e];
      }
      for (std::size_t e = 0; e < v.extent; ++e) {
        out[base + e * v.inner] = static_cast<T>(buf[e] / sum);
      }
    }
  }
  return out;
}

template <typename T>
NormalizeResult<T> l2_normalize(const BasicTensor<T>& x, std::size_t axis) {
  const AxisView v = view_axis(x.shape(), axis);
  NormalizeResult<T> result{BasicTensor<T>(x.shape()), 0};
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.extent * v.inner + in;
      double sq = 0.0;
      for (std::size_t e = 0; e < v.extent; ++e) {
        const double val = x[base + e * v.inner];
        sq += val * val;
      }
      if (sq == 0.0) {
        ++result.zero_slices;
        continue;
      }
      const double inv = 1.0 / std::sqrt(sq);
      for (std::size_t e = 0; e < v.extent; ++e) {
        result.tensor[base + e * v.inner] = static_cast<T>(x[base + e * v.inner] * inv);
      }
    }
  }
  return result;
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                          double eps) {
  require_rank2(x, "layer_norm");
  const std::size_t width = x.dim(1);
  if (gamma.size() != width || beta.size() != width) {
    throw DimensionError("layer_norm parameter width mismatch");
  }
  BasicTensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (T v : in) mean += v;
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(width);
    const double inv = 1.0 / std::sqrt(var + eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < width; ++c) {
      o[c] = static_cast<T>((in[c] - mean) * inv * gamma[c] + beta[c]);
    }
  }
  return out;
}

template <typename T>
void gelu_inplace(BasicTensor<T>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (auto& v : x.data()) {
    const double d = v;
    v = static_cast<T>(0.5 * d * (1.0 + std::erf(d * kInvSqrt2)));
  }
}

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw DimensionError("dot: lengths differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

#define CLIPAD_INSTANTIATE(T)                                                                   \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                 \
  template BasicTensor<T> matmul_transposed(const BasicTensor<T>&, const BasicTensor<T>&);      \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                     \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template void add_row_bias(BasicTensor<T>&, std::span<const T>);                              \
  template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t, double);                  \
  template NormalizeResult<T> l2_normalize(const BasicTensor<T>&, std::size_t);                 \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, std::span<const T>,                 \
                                     std::span<const T>, double);                               \
  template void gelu_inplace(BasicTensor<T>&);                                                  \
  template double dot(std::span<const T>, std::span<const T>);

CLIPAD_INSTANTIATE(float)
CLIPAD_INSTANTIATE(double)

#undef CLIPAD_INSTANTIATE

}  // namespace clipad::numerics
