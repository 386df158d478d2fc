#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "boxgen/core/common.hpp"
#include "boxgen/core/rng.hpp"

namespace boxgen {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor value. All autograd values and parameters are
// stored in these; scalar type S is float for training and double for
// the finite-difference oracles.
template <typename S>
struct Buffer {
  Shape shape;
  std::vector<S> v;

  Buffer() = default;
  explicit Buffer(Shape s) : shape(std::move(s)), v(shape_numel(shape), S(0)) {}
  Buffer(Shape s, S fill) : shape(std::move(s)), v(shape_numel(shape), fill) {}

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  S* data() { return v.data(); }
  const S* data() const { return v.data(); }

  S& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
  const S& operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

  void fill(S x) { std::fill(v.begin(), v.end(), x); }

  void require_shape(const Shape& s, const char* what) const {
    if (shape != s)
      throw ValidationError(std::string(what) + ": shape mismatch, got " + shape_str(shape) +
                            " want " + shape_str(s));
  }

  static Buffer zeros(Shape s) { return Buffer(std::move(s)); }
  static Buffer full(Shape s, S x) { return Buffer(std::move(s), x); }

  static Buffer randn(Shape s, Rng& rng, double stddev = 1.0) {
    Buffer b(std::move(s));
    for (auto& x : b.v) x = static_cast<S>(rng.normal() * stddev);
    return b;
  }

  static Buffer uniform(Shape s, Rng& rng, double lo, double hi) {
    Buffer b(std::move(s));
    for (auto& x : b.v) x = static_cast<S>(rng.uniform(lo, hi));
    return b;
  }

  template <typename T>
  Buffer<T> cast() const {
    Buffer<T> out(shape);
    for (int64_t i = 0; i < numel(); ++i) out.v[static_cast<size_t>(i)] = static_cast<T>(v[static_cast<size_t>(i)]);
    return out;
  }
};

template <typename S>
using EigenMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<EigenMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const EigenMat<S>>;

// View the trailing data of a buffer as a rows x cols row-major matrix.
template <typename S>
MatMap<S> as_matrix(Buffer<S>& b, int64_t rows, int64_t cols) {
  return MatMap<S>(b.data(), rows, cols);
}
template <typename S>
ConstMatMap<S> as_matrix(const Buffer<S>& b, int64_t rows, int64_t cols) {
  return ConstMatMap<S>(b.data(), rows, cols);
}

}  // namespace boxgen
