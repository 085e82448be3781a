#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "voltran/core/graph.hpp"

// Primitive tape ops. Convention: every op returns a fresh node; backward
// closures accumulate (+=) into parent grads so shared subexpressions are
// handled by plain graph fan-in.
namespace voltran::ad {

namespace detail {

template <typename Real>
tensor<Real>& acc(const var<Real>& p) {
  return p->ensure_grad();
}

template <typename Real>
bool wants(const var<Real>& p) {
  return p && p->requires_grad;
}

// Sums n addends in ascending value order (ties irrelevant: equal partial
// sums). The result depends only on the multiset of addends, never on their
// input order -- used wherever an output must be exactly invariant under a
// permutation of its contributing terms. `scratch` must hold n values and may
// alias `terms`.
template <typename Real>
Real sorted_sum(const Real* terms, int64_t n, Real* scratch) {
  if (scratch != terms) std::copy(terms, terms + n, scratch);
  for (int64_t i = 1; i < n; ++i) {  // insertion sort; n is small (tokens/views)
    Real key = scratch[i];
    int64_t j = i - 1;
    for (; j >= 0 && scratch[j] > key; --j) scratch[j + 1] = scratch[j];
    scratch[j + 1] = key;
  }
  Real s = 0;
  for (int64_t i = 0; i < n; ++i) s += scratch[i];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / affine
// ---------------------------------------------------------------------------

template <typename Real>
var<Real> add(const var<Real>& a, const var<Real>& b) {
  VT_CHECK(a->val.same_shape(b->val), "add: shape mismatch");
  tensor<Real> out(a->val.rows, a->val.cols);
  out.a() = a->val.a() + b->val.a();
  return detail::make_op<Real>(std::move(out), {a, b}, [](node<Real>& n) {
    if (detail::wants(n.parents[0])) detail::acc(n.parents[0]).a() += n.grad.a();
    if (detail::wants(n.parents[1])) detail::acc(n.parents[1]).a() += n.grad.a();
  });
}

template <typename Real>
var<Real> sub(const var<Real>& a, const var<Real>& b) {
  VT_CHECK(a->val.same_shape(b->val), "sub: shape mismatch");
  tensor<Real> out(a->val.rows, a->val.cols);
  out.a() = a->val.a() - b->val.a();
  return detail::make_op<Real>(std::move(out), {a, b}, [](node<Real>& n) {
    if (detail::wants(n.parents[0])) detail::acc(n.parents[0]).a() += n.grad.a();
    if (detail::wants(n.parents[1])) detail::acc(n.parents[1]).a() -= n.grad.a();
  });
}

template <typename Real>
var<Real> mul(const var<Real>& a, const var<Real>& b) {
  VT_CHECK(a->val.same_shape(b->val), "mul: shape mismatch");
  tensor<Real> out(a->val.rows, a->val.cols);
  out.a() = a->val.a() * b->val.a();
  return detail::make_op<Real>(std::move(out), {a, b}, [](node<Real>& n) {
    if (detail::wants(n.parents[0]))
      detail::acc(n.parents[0]).a() += n.grad.a() * n.parents[1]->val.a();
    if (detail::wants(n.parents[1]))
      detail::acc(n.parents[1]).a() += n.grad.a() * n.parents[0]->val.a();
  });
}

template <typename Real>
var<Real> div(const var<Real>& a, const var<Real>& b) {
  VT_CHECK(a->val.same_shape(b->val), "div: shape mismatch");
  tensor<Real> out(a->val.rows, a->val.cols);
  out.a() = a->val.a() / b->val.a();
  return detail::make_op<Real>(std::move(out), {a, b}, [](node<Real>& n) {
    auto bv = n.parents[1]->val.a();
    if (detail::wants(n.parents[0])) detail::acc(n.parents[0]).a() += n.grad.a() / bv;
    if (detail::wants(n.parents[1]))
      detail::acc(n.parents[1]).a() -= n.grad.a() * n.parents[0]->val.a() / (bv * bv);
  });
}

// y = s*x + c
template <typename Real>
var<Real> affine(const var<Real>& x, Real s, Real c = Real(0)) {
  tensor<Real> out(x->val.rows, x->val.cols);
  out.a() = x->val.a() * s + c;
  return detail::make_op<Real>(std::move(out), {x}, [s](node<Real>& n) {
    if (detail::wants(n.parents[0])) detail::acc(n.parents[0]).a() += n.grad.a() * s;
  });
}

template <typename Real>
var<Real> scale(const var<Real>& x, Real s) {
  return affine(x, s);
}

// elementwise multiply by a constant tensor (no grad through the constant)
template <typename Real>
var<Real> mul_const(const var<Real>& x, tensor<Real> k) {
  VT_CHECK(x->val.same_shape(k), "mul_const: shape mismatch");
  tensor<Real> out(x->val.rows, x->val.cols);
  out.a() = x->val.a() * k.a();
  auto kk = std::make_shared<tensor<Real>>(std::move(k));
  return detail::make_op<Real>(std::move(out), {x}, [kk](node<Real>& n) {
    if (detail::wants(n.parents[0])) detail::acc(n.parents[0]).a() += n.grad.a() * kk->a();
  });
}

// y = x * s where s is a 1x1 tape variable (e.g. a learned scalar)
template <typename Real>
var<Real> mul_scalar_var(const var<Real>& x, const var<Real>& s) {
  VT_CHECK(s->val.rows == 1 && s->val.cols == 1, "mul_scalar_var: s must be 1x1");
  tensor<Real> out(x->val.rows, x->val.cols);
  out.a() = x->val.a() * s->val(0, 0);
  return detail::make_op<Real>(std::move(out), {x, s}, [](node<Real>& n) {
    if (detail::wants(n.parents[0]))
      detail::acc(n.parents[0]).a() += n.grad.a() * n.parents[1]->val(0, 0);
    if (detail::wants(n.parents[1])) {
      Real acc = Real(0);  // fixed-order: redux grouping follows the address
      for (int64_t i = 0; i < n.grad.size(); ++i) acc += n.grad.v[i] * n.parents[0]->val.v[i];
      detail::acc(n.parents[1])(0, 0) += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

template <typename Real>
var<Real> relu(const var<Real>& x) {
  tensor<Real> out(x->val.rows, x->val.cols);
  out.a() = x->val.a().max(Real(0));
  return detail::make_op<Real>(std::move(out), {x}, [](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    const auto& xv = n.parents[0]->val;
    for (int64_t i = 0; i < xv.size(); ++i)
      if (xv.v[i] > Real(0)) g.v[i] += n.grad.v[i];
  });
}

namespace detail {
template <typename Real>
Real sigmoid_scalar(Real x) {
  if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
  Real e = std::exp(x);
  return e / (Real(1) + e);
}
}  // namespace detail

template <typename Real>
var<Real> sigmoid(const var<Real>& x) {
  tensor<Real> out(x->val.rows, x->val.cols);
  for (int64_t i = 0; i < x->val.size(); ++i) out.v[i] = detail::sigmoid_scalar(x->val.v[i]);
  auto saved = std::make_shared<tensor<Real>>(out);
  return detail::make_op<Real>(std::move(out), {x}, [saved](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    for (int64_t i = 0; i < saved->size(); ++i) {
      Real y = saved->v[i];
      g.v[i] += n.grad.v[i] * y * (Real(1) - y);
    }
  });
}

// log(sigmoid(x)), stable in both tails
template <typename Real>
var<Real> log_sigmoid(const var<Real>& x) {
  tensor<Real> out(x->val.rows, x->val.cols);
  for (int64_t i = 0; i < x->val.size(); ++i) {
    Real v = x->val.v[i];
    out.v[i] = v >= Real(0) ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v));
  }
  return detail::make_op<Real>(std::move(out), {x}, [](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    const auto& xv = n.parents[0]->val;
    for (int64_t i = 0; i < xv.size(); ++i)
      g.v[i] += n.grad.v[i] * (Real(1) - detail::sigmoid_scalar(xv.v[i]));
  });
}

// softplus with sharpness beta: y = log1p(exp(beta*x))/beta, grad sigmoid(beta*x)
template <typename Real>
var<Real> softplus(const var<Real>& x, Real beta) {
  tensor<Real> out(x->val.rows, x->val.cols);
  for (int64_t i = 0; i < x->val.size(); ++i) {
    Real bx = beta * x->val.v[i];
    out.v[i] = bx > Real(30) ? x->val.v[i] : std::log1p(std::exp(bx)) / beta;
  }
  return detail::make_op<Real>(std::move(out), {x}, [beta](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    const auto& xv = n.parents[0]->val;
    for (int64_t i = 0; i < xv.size(); ++i)
      g.v[i] += n.grad.v[i] * detail::sigmoid_scalar(beta * xv.v[i]);
  });
}

template <typename Real>
var<Real> exp_(const var<Real>& x) {
  tensor<Real> out(x->val.rows, x->val.cols);
  // scalar std::exp: Eigen's packet exp rounds differently from libm, and
  // the packet/peel split follows the allocation address
  for (int64_t i = 0; i < x->val.size(); ++i) out.v[i] = std::exp(x->val.v[i]);
  auto saved = std::make_shared<tensor<Real>>(out);
  return detail::make_op<Real>(std::move(out), {x}, [saved](node<Real>& n) {
    if (detail::wants(n.parents[0])) detail::acc(n.parents[0]).a() += n.grad.a() * saved->a();
  });
}

template <typename Real>
var<Real> square(const var<Real>& x) {
  tensor<Real> out(x->val.rows, x->val.cols);
  out.a() = x->val.a().square();
  return detail::make_op<Real>(std::move(out), {x}, [](node<Real>& n) {
    if (detail::wants(n.parents[0]))
      detail::acc(n.parents[0]).a() += Real(2) * n.grad.a() * n.parents[0]->val.a();
  });
}

template <typename Real>
var<Real> abs_(const var<Real>& x) {
  tensor<Real> out(x->val.rows, x->val.cols);
  out.a() = x->val.a().abs();
  return detail::make_op<Real>(std::move(out), {x}, [](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    const auto& xv = n.parents[0]->val;
    for (int64_t i = 0; i < xv.size(); ++i) {
      Real s = xv.v[i] > Real(0) ? Real(1) : (xv.v[i] < Real(0) ? Real(-1) : Real(0));
      g.v[i] += n.grad.v[i] * s;
    }
  });
}

// sqrt with zero-safe backward (grad defined as 0 at x == 0)
template <typename Real>
var<Real> sqrt_safe(const var<Real>& x) {
  tensor<Real> out(x->val.rows, x->val.cols);
  // scalar std::sqrt: Eigen's fast-math packet sqrt (rsqrt + refinement) is
  // not correctly rounded, so packet lanes and the scalar peel disagree
  for (int64_t i = 0; i < x->val.size(); ++i)
    out.v[i] = std::sqrt(std::max(Real(0), x->val.v[i]));
  auto saved = std::make_shared<tensor<Real>>(out);
  return detail::make_op<Real>(std::move(out), {x}, [saved](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    for (int64_t i = 0; i < saved->size(); ++i)
      if (saved->v[i] > Real(0)) g.v[i] += n.grad.v[i] * Real(0.5) / saved->v[i];
  });
}

// min(x, cap); grad passes only where x < cap (guards exp overflow)
template <typename Real>
var<Real> clamp_max(const var<Real>& x, Real cap) {
  tensor<Real> out(x->val.rows, x->val.cols);
  out.a() = x->val.a().min(cap);
  return detail::make_op<Real>(std::move(out), {x}, [cap](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    const auto& xv = n.parents[0]->val;
    for (int64_t i = 0; i < xv.size(); ++i)
      if (xv.v[i] < cap) g.v[i] += n.grad.v[i];
  });
}

namespace detail {

// Fixed-order sequential sum. Eigen's redux peels to the buffer's alignment,
// so its grouping — and rounding — depends on the allocation address; every
// reduction that feeds a reproducibility contract goes through here instead.
template <typename Real>
Real seq_sum(const Real* p, int64_t count) {
  Real acc = Real(0);
  for (int64_t i = 0; i < count; ++i) acc += p[i];
  return acc;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename Real>
var<Real> matmul(const var<Real>& a, const var<Real>& b) {
  VT_CHECK(a->val.cols == b->val.rows, "matmul: inner dim mismatch");
  tensor<Real> out(a->val.rows, b->val.cols);
  out.m().noalias() = a->val.m() * b->val.m();
  return detail::make_op<Real>(std::move(out), {a, b}, [](node<Real>& n) {
    if (detail::wants(n.parents[0]))
      detail::acc(n.parents[0]).m().noalias() += n.grad.m() * n.parents[1]->val.m().transpose();
    if (detail::wants(n.parents[1]))
      detail::acc(n.parents[1]).m().noalias() += n.parents[0]->val.m().transpose() * n.grad.m();
  });
}

// y = a * b^T, with a (m x k), b (n x k)
template <typename Real>
var<Real> matmul_nt(const var<Real>& a, const var<Real>& b) {
  VT_CHECK(a->val.cols == b->val.cols, "matmul_nt: inner dim mismatch");
  tensor<Real> out(a->val.rows, b->val.rows);
  out.m().noalias() = a->val.m() * b->val.m().transpose();
  return detail::make_op<Real>(std::move(out), {a, b}, [](node<Real>& n) {
    if (detail::wants(n.parents[0]))
      detail::acc(n.parents[0]).m().noalias() += n.grad.m() * n.parents[1]->val.m();
    if (detail::wants(n.parents[1]))
      detail::acc(n.parents[1]).m().noalias() += n.grad.m().transpose() * n.parents[0]->val.m();
  });
}

// y = x * W^T + b with x (m x k), W (n x k), b (1 x n)
template <typename Real>
var<Real> linear(const var<Real>& x, const var<Real>& w, const var<Real>& b) {
  VT_CHECK(x->val.cols == w->val.cols, "linear: in dim mismatch");
  VT_CHECK(b->val.rows == 1 && b->val.cols == w->val.rows, "linear: bias shape");
  tensor<Real> out(x->val.rows, w->val.rows);
  out.m().noalias() = x->val.m() * w->val.m().transpose();
  out.m().rowwise() += b->val.m().row(0);
  return detail::make_op<Real>(std::move(out), {x, w, b}, [](node<Real>& n) {
    if (detail::wants(n.parents[0]))
      detail::acc(n.parents[0]).m().noalias() += n.grad.m() * n.parents[1]->val.m();
    if (detail::wants(n.parents[1]))
      detail::acc(n.parents[1]).m().noalias() += n.grad.m().transpose() * n.parents[0]->val.m();
    if (detail::wants(n.parents[2])) {
      auto& gb = detail::acc(n.parents[2]);
      // row-by-row accumulation: column sums without the address-sensitive redux
      for (int64_t r = 0; r < n.grad.rows; ++r) gb.m().row(0) += n.grad.m().row(r);
    }
  });
}

// Same contract as linear, but the forward evaluates every output element by
// one fixed scalar reduction over k, so a row's output depends only on that
// row's content. GEMM rounds packet-interior and tail rows differently
// (fma vs mul+add), which breaks bitwise row-permutation equivariance; use
// this for projections whose outputs must permute exactly with their rows.
// Backward keeps GEMM: gradients carry no exactness contract.
template <typename Real>
var<Real> linear_exact(const var<Real>& x, const var<Real>& w, const var<Real>& b) {
  VT_CHECK(x->val.cols == w->val.cols, "linear_exact: in dim mismatch");
  VT_CHECK(b->val.rows == 1 && b->val.cols == w->val.rows, "linear_exact: bias shape");
  int64_t rows = x->val.rows, in = x->val.cols, width = w->val.rows;
  tensor<Real> out(rows, width);
  const Real* bp = b->val.v.data();
  // Eigen's dot runs one fixed-order reduction per element (rows are
  // contiguous in row-major storage), so every row sees identical rounding.
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < width; ++j)
      out(i, j) = x->val.m().row(i).dot(w->val.m().row(j)) + bp[j];
  (void)in;
  return detail::make_op<Real>(std::move(out), {x, w, b}, [](node<Real>& n) {
    if (detail::wants(n.parents[0]))
      detail::acc(n.parents[0]).m().noalias() += n.grad.m() * n.parents[1]->val.m();
    if (detail::wants(n.parents[1]))
      detail::acc(n.parents[1]).m().noalias() += n.grad.m().transpose() * n.parents[0]->val.m();
    if (detail::wants(n.parents[2])) {
      auto& gb = detail::acc(n.parents[2]);
      // row-by-row accumulation: column sums without the address-sensitive redux
      for (int64_t r = 0; r < n.grad.rows; ++r) gb.m().row(0) += n.grad.m().row(r);
    }
  });
}

// x (m x n) + row vector b (1 x n)
template <typename Real>
var<Real> add_rowvec(const var<Real>& x, const var<Real>& b) {
  VT_CHECK(b->val.rows == 1 && b->val.cols == x->val.cols, "add_rowvec: shape");
  tensor<Real> out(x->val.rows, x->val.cols);
  out.m() = x->val.m();
  out.m().rowwise() += b->val.m().row(0);
  return detail::make_op<Real>(std::move(out), {x, b}, [](node<Real>& n) {
    if (detail::wants(n.parents[0])) detail::acc(n.parents[0]).a() += n.grad.a();
    if (detail::wants(n.parents[1])) {
      auto& gb = detail::acc(n.parents[1]);
      for (int64_t r = 0; r < n.grad.rows; ++r) gb.m().row(0) += n.grad.m().row(r);
    }
  });
}

// x (m x n) + column vector c (m x 1) broadcast across columns
template <typename Real>
var<Real> add_colbroadcast(const var<Real>& x, const var<Real>& c) {
  VT_CHECK(c->val.cols == 1 && c->val.rows == x->val.rows, "add_colbroadcast: shape");
  tensor<Real> out(x->val.rows, x->val.cols);
  out.m() = x->val.m();
  out.m().colwise() += c->val.m().col(0);
  return detail::make_op<Real>(std::move(out), {x, c}, [](node<Real>& n) {
    if (detail::wants(n.parents[0])) detail::acc(n.parents[0]).a() += n.grad.a();
    if (detail::wants(n.parents[1])) {
      auto& gc = detail::acc(n.parents[1]);
      for (int64_t r = 0; r < n.grad.rows; ++r)
        gc(r, 0) += detail::seq_sum(n.grad.v.data() + r * n.grad.cols, n.grad.cols);
    }
  });
}

// ---------------------------------------------------------------------------
// reductions / shape
// ---------------------------------------------------------------------------

template <typename Real>
var<Real> sum_all(const var<Real>& x) {
  tensor<Real> out = tensor<Real>::scalar(detail::seq_sum(x->val.v.data(), x->val.size()));
  return detail::make_op<Real>(std::move(out), {x}, [](node<Real>& n) {
    if (detail::wants(n.parents[0])) detail::acc(n.parents[0]).a() += n.grad(0, 0);
  });
}

template <typename Real>
var<Real> mean_all(const var<Real>& x) {
  Real inv = Real(1) / Real(x->val.size());
  tensor<Real> out =
      tensor<Real>::scalar(detail::seq_sum(x->val.v.data(), x->val.size()) * inv);
  return detail::make_op<Real>(std::move(out), {x}, [inv](node<Real>& n) {
    if (detail::wants(n.parents[0])) detail::acc(n.parents[0]).a() += n.grad(0, 0) * inv;
  });
}

// (m x n) -> (m x 1)
template <typename Real>
var<Real> row_sum(const var<Real>& x) {
  tensor<Real> out(x->val.rows, 1);
  for (int64_t r = 0; r < x->val.rows; ++r)
    out(r, 0) = detail::seq_sum(x->val.v.data() + r * x->val.cols, x->val.cols);
  return detail::make_op<Real>(std::move(out), {x}, [](node<Real>& n) {
    if (detail::wants(n.parents[0]))
      detail::acc(n.parents[0]).m().colwise() += n.grad.m().col(0);
  });
}

// (m x n) -> (1 x n)
template <typename Real>
var<Real> mean_rows(const var<Real>& x) {
  Real inv = Real(1) / Real(x->val.rows);
  tensor<Real> out(1, x->val.cols);
  out.set_zero();
  // fixed row order, one elementwise add per row: address-independent
  for (int64_t r = 0; r < x->val.rows; ++r) out.m().row(0) += x->val.m().row(r);
  out.m().row(0) *= inv;
  return detail::make_op<Real>(std::move(out), {x}, [inv](node<Real>& n) {
    if (detail::wants(n.parents[0]))
      detail::acc(n.parents[0]).m().rowwise() += (n.grad.m().row(0) * inv);
  });
}

template <typename Real>
var<Real> reshape(const var<Real>& x, int64_t rows, int64_t cols) {
  VT_CHECK(rows * cols == x->val.size(), "reshape: element count mismatch");
  tensor<Real> out(rows, cols);
  out.v = x->val.v;
  return detail::make_op<Real>(std::move(out), {x}, [](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    for (int64_t i = 0; i < g.size(); ++i) g.v[i] += n.grad.v[i];
  });
}

template <typename Real>
var<Real> concat_cols(const std::vector<var<Real>>& xs) {
  VT_CHECK(!xs.empty());
  int64_t rows = xs[0]->val.rows, cols = 0;
  for (auto& x : xs) {
    VT_CHECK(x->val.rows == rows, "concat_cols: row mismatch");
    cols += x->val.cols;
  }
  tensor<Real> out(rows, cols);
  int64_t off = 0;
  for (auto& x : xs) {
    out.m().middleCols(off, x->val.cols) = x->val.m();
    off += x->val.cols;
  }
  return detail::make_op<Real>(std::move(out), xs, [](node<Real>& n) {
    int64_t off = 0;
    for (auto& p : n.parents) {
      if (detail::wants(p))
        detail::acc(p).m() += n.grad.m().middleCols(off, p->val.cols);
      off += p->val.cols;
    }
  });
}

template <typename Real>
var<Real> concat_rows(const std::vector<var<Real>>& xs) {
  VT_CHECK(!xs.empty());
  int64_t cols = xs[0]->val.cols, rows = 0;
  for (auto& x : xs) {
    VT_CHECK(x->val.cols == cols, "concat_rows: col mismatch");
    rows += x->val.rows;
  }
  tensor<Real> out(rows, cols);
  int64_t off = 0;
  for (auto& x : xs) {
    out.m().middleRows(off, x->val.rows) = x->val.m();
    off += x->val.rows;
  }
  return detail::make_op<Real>(std::move(out), xs, [](node<Real>& n) {
    int64_t off = 0;
    for (auto& p : n.parents) {
      if (detail::wants(p))
        detail::acc(p).m() += n.grad.m().middleRows(off, p->val.rows);
      off += p->val.rows;
    }
  });
}

template <typename Real>
var<Real> slice_cols(const var<Real>& x, int64_t start, int64_t len) {
  VT_CHECK(start >= 0 && start + len <= x->val.cols, "slice_cols: out of range");
  tensor<Real> out(x->val.rows, len);
  out.m() = x->val.m().middleCols(start, len);
  return detail::make_op<Real>(std::move(out), {x}, [start, len](node<Real>& n) {
    if (detail::wants(n.parents[0]))
      detail::acc(n.parents[0]).m().middleCols(start, len) += n.grad.m();
  });
}

template <typename Real>
var<Real> slice_rows(const var<Real>& x, int64_t start, int64_t len) {
  VT_CHECK(start >= 0 && start + len <= x->val.rows, "slice_rows: out of range");
  tensor<Real> out(len, x->val.cols);
  out.m() = x->val.m().middleRows(start, len);
  return detail::make_op<Real>(std::move(out), {x}, [start, len](node<Real>& n) {
    if (detail::wants(n.parents[0]))
      detail::acc(n.parents[0]).m().middleRows(start, len) += n.grad.m();
  });
}

// zero-pad on the right up to new_cols
template <typename Real>
var<Real> pad_cols(const var<Real>& x, int64_t new_cols) {
  VT_CHECK(new_cols >= x->val.cols, "pad_cols: target narrower than input");
  if (new_cols == x->val.cols) return x;
  tensor<Real> out(x->val.rows, new_cols);
  out.m().leftCols(x->val.cols) = x->val.m();
  return detail::make_op<Real>(std::move(out), {x}, [](node<Real>& n) {
    if (detail::wants(n.parents[0]))
      detail::acc(n.parents[0]).m() += n.grad.m().leftCols(n.parents[0]->val.cols);
  });
}

// out row r = x row idx[r]; duplicate indices accumulate gradient.
template <typename Real>
var<Real> gather_rows(const var<Real>& x, std::shared_ptr<const std::vector<int64_t>> idx) {
  tensor<Real> out(static_cast<int64_t>(idx->size()), x->val.cols);
  for (int64_t r = 0; r < out.rows; ++r) {
    int64_t s = (*idx)[static_cast<size_t>(r)];
    VT_CHECK(s >= 0 && s < x->val.rows, "gather_rows: index ", s, " out of range");
    out.m().row(r) = x->val.m().row(s);
  }
  return detail::make_op<Real>(std::move(out), {x}, [idx](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    for (int64_t r = 0; r < n.grad.rows; ++r)
      g.m().row((*idx)[static_cast<size_t>(r)]) += n.grad.m().row(r);
  });
}

// rows offset, offset+stride, offset+2*stride, ...
template <typename Real>
var<Real> strided_rows(const var<Real>& x, int64_t offset, int64_t stride) {
  VT_CHECK(stride >= 1 && offset >= 0 && offset < stride && x->val.rows % stride == 0,
           "strided_rows: bad offset/stride");
  int64_t nrows = x->val.rows / stride;
  tensor<Real> out(nrows, x->val.cols);
  for (int64_t r = 0; r < nrows; ++r) out.m().row(r) = x->val.m().row(offset + r * stride);
  return detail::make_op<Real>(std::move(out), {x}, [offset, stride](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    for (int64_t r = 0; r < n.grad.rows; ++r)
      g.m().row(offset + r * stride) += n.grad.m().row(r);
  });
}

// each row repeated k times consecutively: (S x C) -> (S*k x C)
template <typename Real>
var<Real> repeat_interleave_rows(const var<Real>& x, int64_t k) {
  tensor<Real> out(x->val.rows * k, x->val.cols);
  for (int64_t r = 0; r < x->val.rows; ++r)
    for (int64_t j = 0; j < k; ++j) out.m().row(r * k + j) = x->val.m().row(r);
  return detail::make_op<Real>(std::move(out), {x}, [k](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    for (int64_t r = 0; r < g.rows; ++r)
      for (int64_t j = 0; j < k; ++j) g.m().row(r) += n.grad.m().row(r * k + j);
  });
}

// whole block repeated k times: (S x C) -> (k*S x C)
template <typename Real>
var<Real> tile_rows(const var<Real>& x, int64_t k) {
  int64_t s = x->val.rows;
  tensor<Real> out(s * k, x->val.cols);
  for (int64_t j = 0; j < k; ++j) out.m().middleRows(j * s, s) = x->val.m();
  return detail::make_op<Real>(std::move(out), {x}, [k, s](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    for (int64_t j = 0; j < k; ++j) g.m() += n.grad.m().middleRows(j * s, s);
  });
}

// ---------------------------------------------------------------------------
// normalization / softmax
// ---------------------------------------------------------------------------

template <typename Real>
var<Real> layer_norm(const var<Real>& x, const var<Real>& gamma, const var<Real>& beta,
                     Real eps = Real(1e-5)) {
  int64_t m = x->val.rows, nn = x->val.cols;
  VT_CHECK(gamma->val.rows == 1 && gamma->val.cols == nn, "layer_norm: gamma shape");
  VT_CHECK(beta->val.rows == 1 && beta->val.cols == nn, "layer_norm: beta shape");
  tensor<Real> out(m, nn);
  auto xhat = std::make_shared<tensor<Real>>(m, nn);
  auto inv_std = std::make_shared<tensor<Real>>(m, 1);
  // Reductions run as fixed-order scalar loops: Eigen's redux peels to the
  // buffer's alignment, so its rounding depends on the allocation address.
  // Bitwise checkpoint round trips and seeded reruns forbid that.
  for (int64_t r = 0; r < m; ++r) {
    const Real* xr = x->val.v.data() + r * nn;
    Real mu = Real(0);
    for (int64_t c = 0; c < nn; ++c) mu += xr[c];
    mu /= Real(nn);
    Real var_ = Real(0);
    for (int64_t c = 0; c < nn; ++c) {
      Real d = xr[c] - mu;
      var_ += d * d;
    }
    var_ /= Real(nn);
    Real is = Real(1) / std::sqrt(var_ + eps);
    (*inv_std)(r, 0) = is;
    xhat->m().row(r) = (x->val.m().row(r).array() - mu).matrix() * is;
    out.m().row(r) = (xhat->m().row(r).array() * gamma->val.m().row(0).array()).matrix();
    out.m().row(r) += beta->val.m().row(0);
  }
  return detail::make_op<Real>(
      std::move(out), {x, gamma, beta}, [xhat, inv_std, nn](node<Real>& n) {
        const auto& gmat = n.grad.m();
        if (detail::wants(n.parents[1])) {
          auto& gg = detail::acc(n.parents[1]);
          // row-by-row: column sums without the address-sensitive redux
          for (int64_t r = 0; r < n.grad.rows; ++r)
            gg.m().row(0).array() += gmat.row(r).array() * xhat->m().row(r).array();
        }
        if (detail::wants(n.parents[2])) {
          auto& gb = detail::acc(n.parents[2]);
          for (int64_t r = 0; r < n.grad.rows; ++r) gb.m().row(0) += gmat.row(r);
        }
        if (detail::wants(n.parents[0])) {
          auto& gx = detail::acc(n.parents[0]);
          auto gam = n.parents[1]->val.m().row(0);
          for (int64_t r = 0; r < n.grad.rows; ++r) {
            Eigen::Array<Real, 1, Eigen::Dynamic> dy = gmat.row(r).array() * gam.array();
            Real mdy = Real(0), mdyx = Real(0);
            for (int64_t c = 0; c < nn; ++c) {
              mdy += dy(c);
              mdyx += dy(c) * (*xhat)(r, c);
            }
            mdy /= Real(nn);
            mdyx /= Real(nn);
            gx.m().row(r).array() +=
                (dy - mdy - xhat->m().row(r).array() * mdyx) * (*inv_std)(r, 0);
          }
        }
      });
}

// Row-wise softmax with a 0/1 keep-mask on columns. Masked entries get
// probability 0. Rows whose mask is entirely 0 produce an all-zero row.
template <typename Real>
var<Real> softmax_rows_masked(const var<Real>& x, const std::shared_ptr<std::vector<uint8_t>>& mask) {
  int64_t m = x->val.rows, nn = x->val.cols;
  VT_CHECK(!mask || static_cast<int64_t>(mask->size()) == m * nn, "softmax mask size");
  tensor<Real> out(m, nn);
  std::vector<Real> scratch(static_cast<size_t>(nn));
  for (int64_t r = 0; r < m; ++r) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (int64_t c = 0; c < nn; ++c)
      if (!mask || (*mask)[r * nn + c]) mx = std::max(mx, x->val(r, c));
    if (!std::isfinite(mx)) {
      for (int64_t c = 0; c < nn; ++c) out(r, c) = Real(0);
      continue;
    }
    for (int64_t c = 0; c < nn; ++c)
      out(r, c) = (!mask || (*mask)[r * nn + c]) ? std::exp(x->val(r, c) - mx) : Real(0);
    // order-invariant denominator: blend weights must permute exactly with
    // a permutation of their input columns.
    Real z = detail::sorted_sum(&out(r, 0), nn, scratch.data());
    for (int64_t c = 0; c < nn; ++c) out(r, c) /= z;
  }
  auto probs = std::make_shared<tensor<Real>>(out);
  return detail::make_op<Real>(std::move(out), {x}, [probs](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    for (int64_t r = 0; r < n.grad.rows; ++r) {
      Real dot = (n.grad.m().row(r).array() * probs->m().row(r).array()).sum();
      g.m().row(r).array() +=
          probs->m().row(r).array() * (n.grad.m().row(r).array() - dot);
    }
  });
}

template <typename Real>
var<Real> softmax_rows(const var<Real>& x) {
  return softmax_rows_masked(x, nullptr);
}

}  // namespace voltran::ad
