#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "voltran/core/ops.hpp"
#include "voltran/core/ops_nn.hpp"
#include "voltran/core/rng.hpp"
#include "voltran/scenes.hpp"

// Differentiable volume rendering over stratified ray samples: an SDF is
// converted to per-interval opacities (logistic CDF ratio), composited by
// discrete transmittance into color, depth (expected sample parameter), and
// accumulated opacity, then laid over a white background.
namespace voltran {

// Geometry for a batch of rays through pixel centers. Sample parameters and
// points are plain data (ray geometry is never differentiated); row i*m+j of
// `points` is sample j of ray i.
template <typename Real>
struct ray_batch {
  int64_t n = 0, m = 0;
  tensor<Real> t;               // n x m, strictly increasing per row
  tensor<Real> points;          // (n*m) x 3
  tensor<Real> origin, dir;     // n x 3 each, dir unit length
  tensor<Real> t_near, t_far;   // n x 1 each (0 / 1 for degenerate rays)
  std::vector<uint8_t> hit;     // n flags: ray intersects the bounding sphere
};

// Rays through the centers of `pixels`, clipped to the bounding sphere of
// radius `bound_radius` about the origin, each with m stratified-uniform
// sample parameters (one uniform draw per stratum). Rays that miss the
// sphere get hit=0, a placeholder [0,1) interval, and render as pure
// background downstream.
template <typename Real>
ray_batch<Real> sample_rays(const camera_pose& pose,
                            const std::vector<std::array<int64_t, 2>>& pixels, int64_t m,
                            Real bound_radius, rng_stream& rs) {
  VT_CHECK(m >= 2, "sample_rays: need at least 2 samples per ray");
  VT_CHECK(bound_radius > Real(0), "sample_rays: bounding radius must be positive");
  int64_t n = static_cast<int64_t>(pixels.size());
  ray_batch<Real> rb;
  rb.n = n;
  rb.m = m;
  rb.t = tensor<Real>(n, m);
  rb.points = tensor<Real>(n * m, 3);
  rb.origin = tensor<Real>(n, 3);
  rb.dir = tensor<Real>(n, 3);
  rb.t_near = tensor<Real>(n, 1);
  rb.t_far = tensor<Real>(n, 1);
  rb.hit.assign(static_cast<size_t>(n), 0);
  for (int64_t i = 0; i < n; ++i) {
    const auto& px = pixels[static_cast<size_t>(i)];
    VT_CHECK(px[0] >= 0 && px[0] < pose.width && px[1] >= 0 && px[1] < pose.height,
             "sample_rays: pixel (", px[0], ",", px[1], ") outside image");
    auto ray = pose.ray_at(double(px[0]) + 0.5, double(px[1]) + 0.5);
    double ov = ray.origin.dot(ray.dir);
    double disc = ov * ov - (ray.origin.squaredNorm() - double(bound_radius) * bound_radius);
    double tn = 0, tf = 1;
    if (disc > 0) {
      double sq = std::sqrt(disc);
      tn = std::max(-ov - sq, 0.0);
      tf = -ov + sq;
      if (tf > tn) rb.hit[static_cast<size_t>(i)] = 1;
      else { tn = 0; tf = 1; }  // sphere entirely behind the camera
    }
    rb.t_near(i, 0) = static_cast<Real>(tn);
    rb.t_far(i, 0) = static_cast<Real>(tf);
    for (int64_t c = 0; c < 3; ++c) {
      rb.origin(i, c) = static_cast<Real>(ray.origin[c]);
      rb.dir(i, c) = static_cast<Real>(ray.dir[c]);
    }
    double dt = (tf - tn) / double(m), prev = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < m; ++j) {
      double tj = tn + (double(j) + rs.uniform(0.0, 1.0)) * dt;
      if (!(tj > prev)) tj = std::nextafter(prev, std::numeric_limits<double>::infinity());
      prev = tj;
      rb.t(i, j) = static_cast<Real>(tj);
      for (int64_t c = 0; c < 3; ++c)
        rb.points(i * m + j, c) = static_cast<Real>(ray.origin[c] + tj * ray.dir[c]);
    }
  }
  return rb;
}

// Discrete opacity from per-sample SDFs (ray-major (n*m) x 1):
// alpha_j = max(0, 1 - Phi(k s_{j+1}) / Phi(k s_j)) with Phi the logistic
// sigmoid and k = inv_std (a learned 1x1 scalar); the last sample of each ray
// gets alpha = 0. The ratio is formed as exp(logsig difference) for
// stability; the difference is capped so exp stays finite on the clamped
// (increasing-SDF) side. Differentiable w.r.t. s and inv_std.
template <typename Real>
ad::var<Real> sdf_to_alpha(const ad::var<Real>& s, int64_t n, int64_t m,
                           const ad::var<Real>& inv_std) {
  VT_CHECK(s->val.rows == n * m && s->val.cols == 1, "sdf_to_alpha: s must be (n*m) x 1");
  VT_CHECK(m >= 2, "sdf_to_alpha: need at least 2 samples per ray");
  VT_CHECK(inv_std->val(0, 0) > Real(0), "sdf_to_alpha: inv_std must be positive");
  auto smat = ad::reshape(s, n, m);
  auto ls = ad::log_sigmoid(ad::mul_scalar_var(smat, inv_std));
  auto d = ad::sub(ad::slice_cols(ls, 1, m - 1), ad::slice_cols(ls, 0, m - 1));
  auto alpha = ad::relu(ad::affine(ad::exp_(ad::clamp_max(d, Real(30))), Real(-1), Real(1)));
  return ad::pad_cols(alpha, m);
}

template <typename Real>
struct render_output {
  ad::var<Real> color;    // n x 3: composited foreground color
  ad::var<Real> pixel;    // n x 3: color + (1-acc) white background
  ad::var<Real> depth;    // n x 1: sum_j w_j t_j
  ad::var<Real> acc;      // n x 1: sum_j w_j
  ad::var<Real> trans;    // n x m: transmittance T_j = prod_{k<j}(1-alpha_k)
  ad::var<Real> weights;  // n x m: T_j alpha_j (zeroed on degenerate rays)
};

// alpha (n x m), colors ((n*m) x 3), t (n x m). Rays with hit=0 contribute
// nothing (pure background); pass an empty hit vector to treat all rays as
// hitting.
template <typename Real>
render_output<Real> composite(const ad::var<Real>& alpha, const ad::var<Real>& colors,
                              const tensor<Real>& t, const std::vector<uint8_t>& hit = {}) {
  int64_t n = alpha->val.rows, m = alpha->val.cols;
  VT_CHECK(colors->val.rows == n * m && colors->val.cols == 3, "composite: colors shape");
  VT_CHECK(t.rows == n && t.cols == m, "composite: t shape");
  render_output<Real> out;
  out.trans = ad::exclusive_cumprod_rows(ad::affine(alpha, Real(-1), Real(1)));
  auto w = ad::mul(out.trans, alpha);
  if (!hit.empty()) {
    VT_CHECK(static_cast<int64_t>(hit.size()) == n, "composite: hit size");
    tensor<Real> mask(n, m);
    for (int64_t i = 0; i < n; ++i)
      if (hit[static_cast<size_t>(i)])
        for (int64_t j = 0; j < m; ++j) mask(i, j) = Real(1);
    w = ad::mul_const(w, std::move(mask));
  }
  out.weights = w;
  out.color = ad::group_weighted_sum(w, colors);
  out.depth = ad::row_sum(ad::mul_const(w, t));
  out.acc = ad::row_sum(w);
  out.pixel = ad::add_colbroadcast(out.color, ad::affine(out.acc, Real(-1), Real(1)));
  return out;
}

// Full differentiable render of a ray batch. `field` maps a const tape node
// of sample points ((n*m) x 3) to per-sample SDF ((n*m) x 1) and radiance
// ((n*m) x 3); the composed pipeline supplies one, tests can inject analytic
// fields.
template <typename Real, typename Field>
render_output<Real> render_rays(Field&& field, const ray_batch<Real>& rays,
                                const ad::var<Real>& inv_std) {
  auto pts = ad::make_const(tensor<Real>(rays.points));
  auto [s, c] = field(pts);
  auto alpha = sdf_to_alpha(s, rays.n, rays.m, inv_std);
  return composite(alpha, c, rays.t, rays.hit);
}

}  // namespace voltran
