#pragma once

#include <cmath>
#include <cstdint>

#include "voltran/core/rng.hpp"
#include "voltran/core/tensor.hpp"

// Parameter initializers shared by the network modules.
namespace voltran::detail {

// He (fan-in) init for layers followed by a rectifier.
template <typename Real>
tensor<Real> dense_weight_init(rng_stream& rs, int64_t out, int64_t in) {
  tensor<Real> w(out, in);
  Real std = std::sqrt(Real(2) / Real(in));
  for (int64_t i = 0; i < out; ++i)
    for (int64_t j = 0; j < in; ++j) w(i, j) = static_cast<Real>(rs.normal(0.0, std));
  return w;
}

template <typename Real>
tensor<Real> conv_weight_init(rng_stream& rs, int64_t cout, int64_t k, int64_t cin) {
  tensor<Real> w(cout, k * k * cin);
  Real std = std::sqrt(Real(2) / Real(k * k * cin));
  for (int64_t i = 0; i < w.rows; ++i)
    for (int64_t j = 0; j < w.cols; ++j) w(i, j) = static_cast<Real>(rs.normal(0.0, std));
  return w;
}

// Xavier-style init for layers without a rectifier (attention projections).
template <typename Real>
tensor<Real> linear_weight_init(rng_stream& rs, int64_t out, int64_t in) {
  tensor<Real> w(out, in);
  Real std = std::sqrt(Real(1) / Real(in));
  for (int64_t i = 0; i < out; ++i)
    for (int64_t j = 0; j < in; ++j) w(i, j) = static_cast<Real>(rs.normal(0.0, std));
  return w;
}

inline int64_t ceil_div(int64_t n, int64_t d) { return (n + d - 1) / d; }

}  // namespace voltran::detail
