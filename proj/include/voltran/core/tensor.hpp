#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "voltran/core/check.hpp"

namespace voltran {

// All tape tensors are dense 2D row-major matrices (rows = batch/spatial
// cells, cols = channels). Spatial layouts (H,W) or (X,Y,Z) are flattened
// into rows; the ops that care about spatial structure take the dims as
// arguments.
template <typename Real>
struct tensor {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<Real> v;

  using mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using map_t = Eigen::Map<mat>;
  using cmap_t = Eigen::Map<const mat>;
  using arr_t = Eigen::Map<Eigen::Array<Real, Eigen::Dynamic, 1>>;
  using carr_t = Eigen::Map<const Eigen::Array<Real, Eigen::Dynamic, 1>>;

  tensor() = default;
  tensor(int64_t r, int64_t c) : rows(r), cols(c), v(static_cast<size_t>(r * c), Real(0)) {
    VT_CHECK(r >= 0 && c >= 0);
  }

  int64_t size() const { return rows * cols; }
  bool empty() const { return v.empty(); }

  Real& operator()(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols + c)]; }
  Real operator()(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols + c)]; }

  map_t m() { return map_t(v.data(), rows, cols); }
  cmap_t m() const { return cmap_t(v.data(), rows, cols); }
  arr_t a() { return arr_t(v.data(), size()); }
  carr_t a() const { return carr_t(v.data(), size()); }

  void set_zero() { std::fill(v.begin(), v.end(), Real(0)); }

  static tensor zeros(int64_t r, int64_t c) { return tensor(r, c); }
  static tensor full(int64_t r, int64_t c, Real x) {
    tensor t(r, c);
    std::fill(t.v.begin(), t.v.end(), x);
    return t;
  }
  static tensor scalar(Real x) { return full(1, 1, x); }
  static tensor from(std::initializer_list<Real> xs, int64_t r, int64_t c) {
    tensor t(r, c);
    VT_CHECK(static_cast<int64_t>(xs.size()) == r * c);
    std::copy(xs.begin(), xs.end(), t.v.begin());
    return t;
  }

  bool same_shape(const tensor& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (Real x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }
};

}  // namespace voltran
