#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <vector>

#include "voltran/core/ops.hpp"

// Structured tape ops: convolutions over flattened grids, interpolation
// gathers, batched attention, and ray compositing helpers.
//
// Grid flattening conventions (fixed across the library):
//   2D image/feature map: row = y * W + x, one channel per column.
//   3D volume:            row = (z * Y + y) * X + x, one channel per column.
namespace voltran::ad {

// ---------------------------------------------------------------------------
// conv2d: x ((H*W) x Cin), w (Cout x k*k*Cin), b (1 x Cout), zero padding k/2.
// Patch column order: (ky, kx, cin), ky/kx in [0, k).
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real>
void im2col_2d(const tensor<Real>& x, int64_t h, int64_t w_, int64_t k, int64_t stride,
               int64_t row0, int64_t nrows, tensor<Real>& col) {
  int64_t cin = x.cols, pad = k / 2, wo = (w_ + 2 * pad - k) / stride + 1;
  col.set_zero();
  for (int64_t r = 0; r < nrows; ++r) {
    int64_t o = row0 + r, oy = o / wo, ox = o % wo;
    for (int64_t ky = 0; ky < k; ++ky) {
      int64_t iy = oy * stride + ky - pad;
      if (iy < 0 || iy >= h) continue;
      for (int64_t kx = 0; kx < k; ++kx) {
        int64_t ix = ox * stride + kx - pad;
        if (ix < 0 || ix >= w_) continue;
        col.m().block(r, (ky * k + kx) * cin, 1, cin) = x.m().row(iy * w_ + ix);
      }
    }
  }
}

template <typename Real>
void col2im_2d(const tensor<Real>& col, int64_t h, int64_t w_, int64_t k, int64_t stride,
               int64_t row0, int64_t nrows, tensor<Real>& gx) {
  int64_t cin = gx.cols, pad = k / 2, wo = (w_ + 2 * pad - k) / stride + 1;
  for (int64_t r = 0; r < nrows; ++r) {
    int64_t o = row0 + r, oy = o / wo, ox = o % wo;
    for (int64_t ky = 0; ky < k; ++ky) {
      int64_t iy = oy * stride + ky - pad;
      if (iy < 0 || iy >= h) continue;
      for (int64_t kx = 0; kx < k; ++kx) {
        int64_t ix = ox * stride + kx - pad;
        if (ix < 0 || ix >= w_) continue;
        gx.m().row(iy * w_ + ix) += col.m().block(r, (ky * k + kx) * cin, 1, cin);
      }
    }
  }
}

inline constexpr int64_t kConvBlockRows = 8192;

}  // namespace detail

template <typename Real>
var<Real> conv2d(const var<Real>& x, const var<Real>& w, const var<Real>& b, int64_t h,
                 int64_t w_, int64_t k, int64_t stride) {
  VT_CHECK(k == 1 || k == 3, "conv2d: kernel must be 1 or 3");
  VT_CHECK(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  VT_CHECK(x->val.rows == h * w_, "conv2d: input rows != H*W");
  int64_t cin = x->val.cols, cout = w->val.rows, pad = k / 2;
  VT_CHECK(w->val.cols == k * k * cin, "conv2d: weight cols != k*k*Cin");
  VT_CHECK(b->val.rows == 1 && b->val.cols == cout, "conv2d: bias shape");
  int64_t ho = (h + 2 * pad - k) / stride + 1, wo = (w_ + 2 * pad - k) / stride + 1;

  tensor<Real> out(ho * wo, cout);
  tensor<Real> col(std::min(detail::kConvBlockRows, ho * wo), k * k * cin);
  for (int64_t r0 = 0; r0 < ho * wo; r0 += detail::kConvBlockRows) {
    int64_t nr = std::min(detail::kConvBlockRows, ho * wo - r0);
    detail::im2col_2d(x->val, h, w_, k, stride, r0, nr, col);
    out.m().middleRows(r0, nr).noalias() = col.m().topRows(nr) * w->val.m().transpose();
  }
  out.m().rowwise() += b->val.m().row(0);

  return detail::make_op<Real>(
      std::move(out), {x, w, b}, [h, w_, k, stride, cin](node<Real>& n) {
        int64_t total = n.grad.rows;
        // im2col is recomputed per block to bound memory.
        tensor<Real> col(std::min(detail::kConvBlockRows, total), k * k * cin);
        tensor<Real> dcol(col.rows, col.cols);
        bool wx = detail::wants(n.parents[0]), ww = detail::wants(n.parents[1]);
        if (detail::wants(n.parents[2])) {
          auto& gb = detail::acc(n.parents[2]);
          // row-by-row accumulation: column sums without the address-sensitive redux
          for (int64_t r = 0; r < total; ++r) gb.m().row(0) += n.grad.m().row(r);
        }
        if (!wx && !ww) return;
        for (int64_t r0 = 0; r0 < total; r0 += detail::kConvBlockRows) {
          int64_t nr = std::min(detail::kConvBlockRows, total - r0);
          if (ww) {
            detail::im2col_2d(n.parents[0]->val, h, w_, k, stride, r0, nr, col);
            detail::acc(n.parents[1]).m().noalias() +=
                n.grad.m().middleRows(r0, nr).transpose() * col.m().topRows(nr);
          }
          if (wx) {
            dcol.m().topRows(nr).noalias() = n.grad.m().middleRows(r0, nr) * n.parents[1]->val.m();
            detail::col2im_2d(dcol, h, w_, k, stride, r0, nr, detail::acc(n.parents[0]));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// conv3d: x ((X*Y*Z) x Cin), w (Cout x k^3*Cin), stride 1 only.
// Patch column order: (kz, ky, kx, cin).
// ---------------------------------------------------------------------------

namespace detail {

inline int64_t conv_out(int64_t n, int64_t k, int64_t stride) {
  return (n + 2 * (k / 2) - k) / stride + 1;
}

template <typename Real>
void im2col_3d(const tensor<Real>& t, int64_t nx, int64_t ny, int64_t nz, int64_t k,
               int64_t stride, int64_t row0, int64_t nrows, tensor<Real>& col) {
  int64_t cin = t.cols, pad = k / 2;
  int64_t ox_n = conv_out(nx, k, stride), oy_n = conv_out(ny, k, stride);
  col.set_zero();
  for (int64_t r = 0; r < nrows; ++r) {
    int64_t o = row0 + r;
    int64_t ox = o % ox_n, oy = (o / ox_n) % oy_n, oz = o / (ox_n * oy_n);
    for (int64_t kz = 0; kz < k; ++kz) {
      int64_t iz = oz * stride + kz - pad;
      if (iz < 0 || iz >= nz) continue;
      for (int64_t ky = 0; ky < k; ++ky) {
        int64_t iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= ny) continue;
        for (int64_t kx = 0; kx < k; ++kx) {
          int64_t ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= nx) continue;
          col.m().block(r, ((kz * k + ky) * k + kx) * cin, 1, cin) =
              t.m().row((iz * ny + iy) * nx + ix);
        }
      }
    }
  }
}

template <typename Real>
void col2im_3d(const tensor<Real>& col, int64_t nx, int64_t ny, int64_t nz, int64_t k,
               int64_t stride, int64_t row0, int64_t nrows, tensor<Real>& gx) {
  int64_t cin = gx.cols, pad = k / 2;
  int64_t ox_n = conv_out(nx, k, stride), oy_n = conv_out(ny, k, stride);
  for (int64_t r = 0; r < nrows; ++r) {
    int64_t o = row0 + r;
    int64_t ox = o % ox_n, oy = (o / ox_n) % oy_n, oz = o / (ox_n * oy_n);
    for (int64_t kz = 0; kz < k; ++kz) {
      int64_t iz = oz * stride + kz - pad;
      if (iz < 0 || iz >= nz) continue;
      for (int64_t ky = 0; ky < k; ++ky) {
        int64_t iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= ny) continue;
        for (int64_t kx = 0; kx < k; ++kx) {
          int64_t ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= nx) continue;
          gx.m().row((iz * ny + iy) * nx + ix) +=
              col.m().block(r, ((kz * k + ky) * k + kx) * cin, 1, cin);
        }
      }
    }
  }
}

}  // namespace detail

template <typename Real>
var<Real> conv3d(const var<Real>& x, const var<Real>& w, const var<Real>& b, int64_t nx,
                 int64_t ny, int64_t nz, int64_t k, int64_t stride = 1) {
  VT_CHECK(k == 1 || k == 3, "conv3d: kernel must be 1 or 3");
  VT_CHECK(stride == 1 || stride == 2, "conv3d: stride must be 1 or 2");
  VT_CHECK(x->val.rows == nx * ny * nz, "conv3d: input rows != X*Y*Z");
  int64_t cin = x->val.cols, cout = w->val.rows;
  VT_CHECK(w->val.cols == k * k * k * cin, "conv3d: weight cols != k^3*Cin");
  VT_CHECK(b->val.rows == 1 && b->val.cols == cout, "conv3d: bias shape");
  int64_t total = detail::conv_out(nx, k, stride) * detail::conv_out(ny, k, stride) *
                  detail::conv_out(nz, k, stride);

  tensor<Real> out(total, cout);
  tensor<Real> col(std::min(detail::kConvBlockRows, total), k * k * k * cin);
  for (int64_t r0 = 0; r0 < total; r0 += detail::kConvBlockRows) {
    int64_t nr = std::min(detail::kConvBlockRows, total - r0);
    detail::im2col_3d(x->val, nx, ny, nz, k, stride, r0, nr, col);
    out.m().middleRows(r0, nr).noalias() = col.m().topRows(nr) * w->val.m().transpose();
  }
  out.m().rowwise() += b->val.m().row(0);

  return detail::make_op<Real>(
      std::move(out), {x, w, b}, [nx, ny, nz, k, stride, cin](node<Real>& n) {
        int64_t total = n.grad.rows;
        tensor<Real> col(std::min(detail::kConvBlockRows, total), k * k * k * cin);
        tensor<Real> dcol(col.rows, col.cols);
        bool wx = detail::wants(n.parents[0]), ww = detail::wants(n.parents[1]);
        if (detail::wants(n.parents[2])) {
          auto& gb = detail::acc(n.parents[2]);
          // row-by-row accumulation: column sums without the address-sensitive redux
          for (int64_t r = 0; r < total; ++r) gb.m().row(0) += n.grad.m().row(r);
        }
        if (!wx && !ww) return;
        for (int64_t r0 = 0; r0 < total; r0 += detail::kConvBlockRows) {
          int64_t nr = std::min(detail::kConvBlockRows, total - r0);
          if (ww) {
            detail::im2col_3d(n.parents[0]->val, nx, ny, nz, k, stride, r0, nr, col);
            detail::acc(n.parents[1]).m().noalias() +=
                n.grad.m().middleRows(r0, nr).transpose() * col.m().topRows(nr);
          }
          if (wx) {
            dcol.m().topRows(nr).noalias() =
                n.grad.m().middleRows(r0, nr) * n.parents[1]->val.m();
            detail::col2im_3d(dcol, nx, ny, nz, k, stride, r0, nr, detail::acc(n.parents[0]));
          }
        }
      });
}

// Nearest-neighbor x2 upsample of a flattened 3D grid, explicit target dims.
template <typename Real>
var<Real> upsample3d_nearest(const var<Real>& x, int64_t nx, int64_t ny, int64_t nz, int64_t ox,
                             int64_t oy, int64_t oz) {
  VT_CHECK(x->val.rows == nx * ny * nz, "upsample3d: input rows != X*Y*Z");
  VT_CHECK(ox <= 2 * nx && oy <= 2 * ny && oz <= 2 * nz && ox >= nx && oy >= ny && oz >= nz,
           "upsample3d: bad target size");
  tensor<Real> out(ox * oy * oz, x->val.cols);
  auto src = [&](int64_t X, int64_t Y, int64_t Z) {
    return (std::min(Z / 2, nz - 1) * ny + std::min(Y / 2, ny - 1)) * nx + std::min(X / 2, nx - 1);
  };
  for (int64_t z = 0; z < oz; ++z)
    for (int64_t y = 0; y < oy; ++y)
      for (int64_t xx = 0; xx < ox; ++xx)
        out.m().row((z * oy + y) * ox + xx) = x->val.m().row(src(xx, y, z));
  return detail::make_op<Real>(std::move(out), {x}, [nx, ny, nz, ox, oy, oz](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    for (int64_t z = 0; z < oz; ++z)
      for (int64_t y = 0; y < oy; ++y)
        for (int64_t xx = 0; xx < ox; ++xx)
          g.m().row((std::min(z / 2, nz - 1) * ny + std::min(y / 2, ny - 1)) * nx +
                    std::min(xx / 2, nx - 1)) += n.grad.m().row((z * oy + y) * ox + xx);
  });
}

// Nearest-neighbor x2 upsample with explicit output size (odd targets crop
// the last duplicated row/col so FPN lateral sums line up).
template <typename Real>
var<Real> upsample2d_nearest(const var<Real>& x, int64_t h, int64_t w_, int64_t ho, int64_t wo) {
  VT_CHECK(x->val.rows == h * w_, "upsample2d: input rows != H*W");
  VT_CHECK(ho <= 2 * h && wo <= 2 * w_ && ho >= h && wo >= w_, "upsample2d: bad target size");
  tensor<Real> out(ho * wo, x->val.cols);
  for (int64_t oy = 0; oy < ho; ++oy)
    for (int64_t ox = 0; ox < wo; ++ox)
      out.m().row(oy * wo + ox) = x->val.m().row(std::min(oy / 2, h - 1) * w_ + std::min(ox / 2, w_ - 1));
  return detail::make_op<Real>(std::move(out), {x}, [h, w_, ho, wo](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    for (int64_t oy = 0; oy < ho; ++oy)
      for (int64_t ox = 0; ox < wo; ++ox)
        g.m().row(std::min(oy / 2, h - 1) * w_ + std::min(ox / 2, w_ - 1)) +=
            n.grad.m().row(oy * wo + ox);
  });
}

// ---------------------------------------------------------------------------
// interpolation gathers
// ---------------------------------------------------------------------------

// One bilinear lookup into a row-stacked set of same-sized 2D maps.
template <typename Real>
struct gather2d_query {
  int64_t view = 0;       // which map in the stack
  Real u = 0, v = 0;      // continuous pixel coords in feature-map units
  uint8_t valid = 1;      // invalid rows produce zeros and receive no grad
};

// stack ((V*Hf*Wf) x C) -> (Q x C). Coordinates are edge-clamped to
// [0, Wf-1] x [0, Hf-1] before interpolation.
template <typename Real>
var<Real> bilinear_gather(const var<Real>& stack, int64_t hf, int64_t wf,
                          std::shared_ptr<const std::vector<gather2d_query<Real>>> queries) {
  VT_CHECK(stack->val.rows % (hf * wf) == 0, "bilinear_gather: stack rows not multiple of Hf*Wf");
  int64_t q = static_cast<int64_t>(queries->size()), c = stack->val.cols;
  int64_t nviews = stack->val.rows / (hf * wf);
  tensor<Real> out(q, c);
  out.set_zero();
  auto corner = [hf, wf](const gather2d_query<Real>& qu, int64_t& r00, int64_t& r10, int64_t& r01,
                         int64_t& r11, Real& fx, Real& fy) {
    Real u = std::clamp(qu.u, Real(0), Real(wf - 1));
    Real v = std::clamp(qu.v, Real(0), Real(hf - 1));
    int64_t x0 = static_cast<int64_t>(std::floor(u)), y0 = static_cast<int64_t>(std::floor(v));
    x0 = std::min(x0, wf - 1);
    y0 = std::min(y0, hf - 1);
    int64_t x1 = std::min(x0 + 1, wf - 1), y1 = std::min(y0 + 1, hf - 1);
    fx = u - Real(x0);
    fy = v - Real(y0);
    int64_t base = qu.view * hf * wf;
    r00 = base + y0 * wf + x0;
    r10 = base + y0 * wf + x1;
    r01 = base + y1 * wf + x0;
    r11 = base + y1 * wf + x1;
  };
  for (int64_t i = 0; i < q; ++i) {
    const auto& qu = (*queries)[i];
    if (!qu.valid) continue;
    VT_CHECK(qu.view >= 0 && qu.view < nviews, "bilinear_gather: view out of range");
    int64_t r00, r10, r01, r11;
    Real fx, fy;
    corner(qu, r00, r10, r01, r11, fx, fy);
    // nested lerp a + t*(b-a): reproduces constant maps exactly, unlike the
    // 4-weight sum whose rounded weights need not sum to 1.
    Eigen::Matrix<Real, 1, Eigen::Dynamic> top =
        stack->val.m().row(r00) + fx * (stack->val.m().row(r10) - stack->val.m().row(r00));
    Eigen::Matrix<Real, 1, Eigen::Dynamic> bot =
        stack->val.m().row(r01) + fx * (stack->val.m().row(r11) - stack->val.m().row(r01));
    out.m().row(i) = top + fy * (bot - top);
  }
  return detail::make_op<Real>(std::move(out), {stack}, [hf, wf, queries, corner](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    for (int64_t i = 0; i < n.grad.rows; ++i) {
      const auto& qu = (*queries)[i];
      if (!qu.valid) continue;
      int64_t r00, r10, r01, r11;
      Real fx, fy;
      corner(qu, r00, r10, r01, r11, fx, fy);
      g.m().row(r00) += (Real(1) - fx) * (Real(1) - fy) * n.grad.m().row(i);
      g.m().row(r10) += fx * (Real(1) - fy) * n.grad.m().row(i);
      g.m().row(r01) += (Real(1) - fx) * fy * n.grad.m().row(i);
      g.m().row(r11) += fx * fy * n.grad.m().row(i);
    }
  });
}

// Trilinear lookup at world points into a vertex grid over an axis-aligned
// box. vol ((X*Y*Z) x C); pts (S x 3). Differentiable w.r.t. both vol and
// pts (coordinate grad is zeroed on clamped axes). out_inside, if given,
// receives 1 per point that needed no clamping.
template <typename Real>
var<Real> trilinear_gather(const var<Real>& vol, int64_t nx, int64_t ny, int64_t nz,
                           const std::array<Real, 3>& lo, const std::array<Real, 3>& hi,
                           const var<Real>& pts, std::vector<uint8_t>* out_inside = nullptr) {
  VT_CHECK(vol->val.rows == nx * ny * nz, "trilinear_gather: vol rows != X*Y*Z");
  VT_CHECK(pts->val.cols == 3, "trilinear_gather: pts must be S x 3");
  VT_CHECK(nx >= 2 && ny >= 2 && nz >= 2, "trilinear_gather: grid needs >= 2 verts per axis");
  int64_t s = pts->val.rows, c = vol->val.cols;
  const int64_t dims[3] = {nx, ny, nz};
  Real scl[3];
  for (int j = 0; j < 3; ++j) {
    VT_CHECK(hi[j] > lo[j], "trilinear_gather: degenerate bounds");
    scl[j] = Real(dims[j] - 1) / (hi[j] - lo[j]);
  }
  if (out_inside) out_inside->assign(static_cast<size_t>(s), 1);

  struct cell {
    int64_t i0[3];
    Real f[3];
    uint8_t clamped[3];
  };
  auto cells = std::make_shared<std::vector<cell>>(static_cast<size_t>(s));
  tensor<Real> out(s, c);
  auto idx3 = [nx, ny](int64_t x, int64_t y, int64_t z) { return (z * ny + y) * nx + x; };
  for (int64_t i = 0; i < s; ++i) {
    cell& cl = (*cells)[i];
    for (int j = 0; j < 3; ++j) {
      Real g = (pts->val(i, j) - lo[j]) * scl[j];
      cl.clamped[j] = (g < Real(0) || g > Real(dims[j] - 1)) ? 1 : 0;
      g = std::clamp(g, Real(0), Real(dims[j] - 1));
      int64_t i0 = std::min(static_cast<int64_t>(std::floor(g)), dims[j] - 2);
      cl.i0[j] = i0;
      cl.f[j] = g - Real(i0);
      if (cl.clamped[j] && out_inside) (*out_inside)[i] = 0;
    }
    out.m().row(i).setZero();
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          Real w = (dx ? cl.f[0] : Real(1) - cl.f[0]) * (dy ? cl.f[1] : Real(1) - cl.f[1]) *
                   (dz ? cl.f[2] : Real(1) - cl.f[2]);
          out.m().row(i) += w * vol->val.m().row(idx3(cl.i0[0] + dx, cl.i0[1] + dy, cl.i0[2] + dz));
        }
  }
  std::array<Real, 3> sc = {scl[0], scl[1], scl[2]};
  return detail::make_op<Real>(std::move(out), {vol, pts}, [nx, ny, cells, sc](node<Real>& n) {
    bool wv = detail::wants(n.parents[0]), wp = detail::wants(n.parents[1]);
    if (!wv && !wp) return;
    auto idx3 = [nx, ny](int64_t x, int64_t y, int64_t z) { return (z * ny + y) * nx + x; };
    const auto& vol = n.parents[0]->val;
    for (int64_t i = 0; i < n.grad.rows; ++i) {
      const cell& cl = (*cells)[i];
      Real dgf[3] = {0, 0, 0};  // d loss / d fractional coord
      for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            Real wx = dx ? cl.f[0] : Real(1) - cl.f[0];
            Real wy = dy ? cl.f[1] : Real(1) - cl.f[1];
            Real wz = dz ? cl.f[2] : Real(1) - cl.f[2];
            int64_t row = idx3(cl.i0[0] + dx, cl.i0[1] + dy, cl.i0[2] + dz);
            if (wv) detail::acc(n.parents[0]).m().row(row) += wx * wy * wz * n.grad.m().row(i);
            if (wp) {
              Real gv = n.grad.m().row(i).dot(vol.m().row(row));
              dgf[0] += (dx ? Real(1) : Real(-1)) * wy * wz * gv;
              dgf[1] += (dy ? Real(1) : Real(-1)) * wx * wz * gv;
              dgf[2] += (dz ? Real(1) : Real(-1)) * wx * wy * gv;
            }
          }
      if (wp) {
        auto& gp = detail::acc(n.parents[1]);
        for (int j = 0; j < 3; ++j)
          if (!cl.clamped[j]) gp(i, j) += dgf[j] * sc[j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// batched multi-head attention over fixed-length token groups
// ---------------------------------------------------------------------------

// q/k/v: (S*T x H*dh), row s*T+t = token t of sample s. valid marks key
// tokens; invalid keys are excluded from every softmax. Scale is 1/sqrt(dh).
template <typename Real>
var<Real> batched_attention(const var<Real>& q, const var<Real>& k, const var<Real>& v,
                            std::shared_ptr<const std::vector<uint8_t>> valid, int64_t t,
                            int64_t heads) {
  VT_CHECK(q->val.same_shape(k->val) && q->val.same_shape(v->val), "attention: q/k/v shapes");
  VT_CHECK(q->val.rows % t == 0, "attention: rows not multiple of T");
  VT_CHECK(q->val.cols % heads == 0, "attention: cols not multiple of heads");
  VT_CHECK(static_cast<int64_t>(valid->size()) == q->val.rows, "attention: valid size");
  int64_t s = q->val.rows / t, dh = q->val.cols / heads;
  Real inv_gamma = Real(1) / std::sqrt(Real(dh));

  tensor<Real> out(q->val.rows, q->val.cols);
  auto probs = std::make_shared<std::vector<Real>>(static_cast<size_t>(s * heads * t * t));
  using mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  mat logits(t, t);
  for (int64_t si = 0; si < s; ++si) {
    for (int64_t hi = 0; hi < heads; ++hi) {
      auto qb = q->val.m().block(si * t, hi * dh, t, dh);
      auto kb = k->val.m().block(si * t, hi * dh, t, dh);
      auto vb = v->val.m().block(si * t, hi * dh, t, dh);
      logits.noalias() = qb * kb.transpose() * inv_gamma;
      for (int64_t j = 0; j < t; ++j)
        if (!(*valid)[si * t + j]) logits.col(j).setConstant(-std::numeric_limits<Real>::infinity());
      Real* p = probs->data() + (si * heads + hi) * t * t;
      std::vector<Real> terms(static_cast<size_t>(t));
      for (int64_t i = 0; i < t; ++i) {
        Real mx = logits.row(i).maxCoeff();
        for (int64_t j = 0; j < t; ++j)
          p[i * t + j] = std::isfinite(logits(i, j)) ? std::exp(logits(i, j) - mx) : Real(0);
        // order-invariant sum: attention output must be exactly equivariant
        // under permutation of the key/value tokens.
        Real z = detail::sorted_sum(p + i * t, t, terms.data());
        VT_CHECK(z > Real(0), "attention: sample has no valid key");
        for (int64_t j = 0; j < t; ++j) p[i * t + j] /= z;
      }
      auto ob = out.m().block(si * t, hi * dh, t, dh);
      for (int64_t i = 0; i < t; ++i)
        for (int64_t c = 0; c < dh; ++c) {
          for (int64_t j = 0; j < t; ++j) terms[j] = p[i * t + j] * vb(j, c);
          ob(i, c) = detail::sorted_sum(terms.data(), t, terms.data());
        }
    }
  }
  return detail::make_op<Real>(
      std::move(out), {q, k, v}, [probs, t, heads, dh, inv_gamma](node<Real>& n) {
        int64_t s = n.grad.rows / t;
        using mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        mat dp(t, t), dl(t, t);
        bool wq = detail::wants(n.parents[0]), wk = detail::wants(n.parents[1]),
             wv = detail::wants(n.parents[2]);
        for (int64_t si = 0; si < s; ++si) {
          for (int64_t hi = 0; hi < heads; ++hi) {
            Eigen::Map<const mat> pm(probs->data() + (si * heads + hi) * t * t, t, t);
            auto go = n.grad.m().block(si * t, hi * dh, t, dh);
            auto qb = n.parents[0]->val.m().block(si * t, hi * dh, t, dh);
            auto kb = n.parents[1]->val.m().block(si * t, hi * dh, t, dh);
            auto vb = n.parents[2]->val.m().block(si * t, hi * dh, t, dh);
            if (wv)
              detail::acc(n.parents[2]).m().block(si * t, hi * dh, t, dh).noalias() +=
                  pm.transpose() * go;
            if (!wq && !wk) continue;
            dp.noalias() = go * vb.transpose();
            for (int64_t i = 0; i < t; ++i) {
              Real dot = (dp.row(i).array() * pm.row(i).array()).sum();
              dl.row(i) = (pm.row(i).array() * (dp.row(i).array() - dot)).matrix() * inv_gamma;
            }
            if (wq)
              detail::acc(n.parents[0]).m().block(si * t, hi * dh, t, dh).noalias() +=
                  dl * kb;
            if (wk)
              detail::acc(n.parents[1]).m().block(si * t, hi * dh, t, dh).noalias() +=
                  dl.transpose() * qb;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// grouped reductions / compositing
// ---------------------------------------------------------------------------

// out[s] = sum_n w(s, n) * vals[s*N + n];  w (S x N), vals (S*N x C) -> (S x C)
template <typename Real>
var<Real> group_weighted_sum(const var<Real>& w, const var<Real>& vals) {
  int64_t s = w->val.rows, nn = w->val.cols;
  VT_CHECK(vals->val.rows == s * nn, "group_weighted_sum: vals rows != S*N");
  tensor<Real> out(s, vals->val.cols);
  for (int64_t i = 0; i < s; ++i)
    out.m().row(i).noalias() = w->val.m().row(i) * vals->val.m().middleRows(i * nn, nn);
  return detail::make_op<Real>(std::move(out), {w, vals}, [nn](node<Real>& n) {
    bool ww = detail::wants(n.parents[0]), wv = detail::wants(n.parents[1]);
    for (int64_t i = 0; i < n.grad.rows; ++i) {
      auto vb = n.parents[1]->val.m().middleRows(i * nn, nn);
      if (ww)
        detail::acc(n.parents[0]).m().row(i).noalias() += n.grad.m().row(i) * vb.transpose();
      if (wv)
        detail::acc(n.parents[1]).m().middleRows(i * nn, nn).noalias() +=
            n.parents[0]->val.m().row(i).transpose() * n.grad.m().row(i);
    }
  });
}

// Mean over the valid members of each N-row group; all-invalid groups
// produce a zero row. x (S*N x C) -> (S x C).
template <typename Real>
var<Real> masked_mean_groups(const var<Real>& x, std::shared_ptr<const std::vector<uint8_t>> valid,
                             int64_t nn) {
  VT_CHECK(x->val.rows % nn == 0, "masked_mean_groups: rows not multiple of N");
  VT_CHECK(static_cast<int64_t>(valid->size()) == x->val.rows, "masked_mean_groups: valid size");
  int64_t s = x->val.rows / nn;
  tensor<Real> out(s, x->val.cols);
  out.set_zero();
  for (int64_t i = 0; i < s; ++i) {
    int64_t cnt = 0;
    for (int64_t j = 0; j < nn; ++j)
      if ((*valid)[i * nn + j]) {
        out.m().row(i) += x->val.m().row(i * nn + j);
        ++cnt;
      }
    if (cnt > 0) out.m().row(i) /= Real(cnt);
  }
  return detail::make_op<Real>(std::move(out), {x}, [valid, nn](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    for (int64_t i = 0; i < n.grad.rows; ++i) {
      int64_t cnt = 0;
      for (int64_t j = 0; j < nn; ++j) cnt += (*valid)[i * nn + j] ? 1 : 0;
      if (!cnt) continue;
      Real inv = Real(1) / Real(cnt);
      for (int64_t j = 0; j < nn; ++j)
        if ((*valid)[i * nn + j]) g.m().row(i * nn + j) += inv * n.grad.m().row(i);
    }
  });
}

// Population variance over the valid members of each N-row group, one value
// per channel. Computed min-shifted with order-invariant sums, so the result
// depends only on the multiset of valid values (exact permutation
// invariance) and identical values give exactly zero. Groups with fewer than
// two valid members produce a zero row. x (G*N x C) -> (G x C).
template <typename Real>
var<Real> masked_variance_groups(const var<Real>& x,
                                 std::shared_ptr<const std::vector<uint8_t>> valid, int64_t nn) {
  VT_CHECK(x->val.rows % nn == 0, "masked_variance_groups: rows not multiple of N");
  VT_CHECK(static_cast<int64_t>(valid->size()) == x->val.rows,
           "masked_variance_groups: valid size");
  int64_t g = x->val.rows / nn, c = x->val.cols;
  tensor<Real> out(g, c);
  std::vector<Real> y(static_cast<size_t>(nn)), scratch(static_cast<size_t>(nn));
  for (int64_t i = 0; i < g; ++i) {
    int64_t cnt = 0;
    for (int64_t j = 0; j < nn; ++j) cnt += (*valid)[i * nn + j] ? 1 : 0;
    if (cnt < 2) continue;  // out is zero-initialized
    for (int64_t ch = 0; ch < c; ++ch) {
      Real lo = std::numeric_limits<Real>::infinity();
      for (int64_t j = 0; j < nn; ++j)
        if ((*valid)[i * nn + j]) lo = std::min(lo, x->val(i * nn + j, ch));
      int64_t k = 0;
      for (int64_t j = 0; j < nn; ++j)
        if ((*valid)[i * nn + j]) y[k++] = x->val(i * nn + j, ch) - lo;
      Real mu = detail::sorted_sum(y.data(), cnt, scratch.data()) / Real(cnt);
      for (int64_t j = 0; j < cnt; ++j) {
        Real d = y[j] - mu;
        y[j] = d * d;
      }
      out(i, ch) = detail::sorted_sum(y.data(), cnt, scratch.data()) / Real(cnt);
    }
  }
  return detail::make_op<Real>(std::move(out), {x}, [valid, nn](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g0 = detail::acc(n.parents[0]);
    const auto& xv = n.parents[0]->val;
    int64_t c = xv.cols;
    std::vector<Real> y(static_cast<size_t>(nn)), scratch(static_cast<size_t>(nn));
    for (int64_t i = 0; i < n.grad.rows; ++i) {
      int64_t cnt = 0;
      for (int64_t j = 0; j < nn; ++j) cnt += (*valid)[i * nn + j] ? 1 : 0;
      if (cnt < 2) continue;
      for (int64_t ch = 0; ch < c; ++ch) {
        Real go = n.grad(i, ch);
        if (go == Real(0)) continue;
        Real lo = std::numeric_limits<Real>::infinity();
        for (int64_t j = 0; j < nn; ++j)
          if ((*valid)[i * nn + j]) lo = std::min(lo, xv(i * nn + j, ch));
        int64_t k = 0;
        for (int64_t j = 0; j < nn; ++j)
          if ((*valid)[i * nn + j]) y[k++] = xv(i * nn + j, ch) - lo;
        Real mu = lo + detail::sorted_sum(y.data(), cnt, scratch.data()) / Real(cnt);
        Real s = Real(2) / Real(cnt) * go;
        for (int64_t j = 0; j < nn; ++j)
          if ((*valid)[i * nn + j]) g0(i * nn + j, ch) += s * (xv(i * nn + j, ch) - mu);
      }
    }
  });
}

// T(r, 0) = 1; T(r, j) = prod_{l<j} u(r, l). Backward is the exact O(M^2)
// sum of partial products — no division, so zeros in u are safe.
template <typename Real>
var<Real> exclusive_cumprod_rows(const var<Real>& u) {
  int64_t r = u->val.rows, m = u->val.cols;
  tensor<Real> out(r, m);
  for (int64_t i = 0; i < r; ++i) {
    Real p = Real(1);
    for (int64_t j = 0; j < m; ++j) {
      out(i, j) = p;
      p *= u->val(i, j);
    }
  }
  auto saved = std::make_shared<tensor<Real>>(out);
  return detail::make_op<Real>(std::move(out), {u}, [saved](node<Real>& n) {
    if (!detail::wants(n.parents[0])) return;
    auto& g = detail::acc(n.parents[0]);
    const auto& uv = n.parents[0]->val;
    int64_t m = uv.cols;
    for (int64_t i = 0; i < n.grad.rows; ++i) {
      for (int64_t kk = 0; kk < m - 1; ++kk) {
        Real q = (*saved)(i, kk);  // prod_{l<k}
        Real acc_g = Real(0);
        for (int64_t j = kk + 1; j < m; ++j) {
          acc_g += n.grad(i, j) * q;
          q *= uv(i, j);  // advance: prod_{l<j+1, l!=k}
        }
        g(i, kk) += acc_g;
      }
    }
  });
}

}  // namespace voltran::ad
