#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "voltran/config.hpp"
#include "voltran/costvol.hpp"
#include "voltran/featnet.hpp"
#include "voltran/hypersdf.hpp"
#include "voltran/render.hpp"
#include "voltran/scenes.hpp"
#include "voltran/voltran.hpp"

// Full pipeline composition. Per scene: per-view feature maps plus a
// conditioning embedding from view 0, a variance cost volume regularized into
// an encoding volume, and SDF weights generated from the embedding. Per query
// point: SDF input [p | G(p) | mean F_i(Pi_i(p)) | mean colors] over valid
// views, and radiance blended across views by the aggregation transformer.
namespace voltran {

// All trainable parameters, built once from a config. The store owns the
// flat name -> tensor list the optimizer and checkpoints consume.
template <typename Real>
struct pipeline {
  config cfg;
  voxel_grid grid;
  ad::param_store<Real> ps;
  rng_stream init_rng;  // consumed during construction only
  feat_extractor<Real> featnet;
  cond_encoder<Real> embedder;
  cost_regularizer<Real> regularizer;
  hyper_generator<Real> hyper;
  voltran_params<Real> aggregator;
  ad::var<Real> log_inv_std;  // 1x1; inv_std = exp(log_inv_std) stays positive

  explicit pipeline(const config& c, hyper_init mode = hyper_init::geometric)
      : cfg(c),
        grid{c.grid_res, c.grid_res, c.grid_res},
        init_rng(fork_seed(c.seed, 0x70617261)),
        featnet(ps, "featnet", c.feat_channels, c.feat_stride, init_rng),
        embedder(ps, "embed", c.d_emb, init_rng),
        regularizer(ps, "costreg", c.feat_channels, c.vol_channels, init_rng),
        hyper(ps, "hyper", make_arch(c), c.d_emb, c.hyper_hidden, mode, init_rng),
        aggregator(ps, "agg", 3 + c.feat_channels + c.vol_channels, c.heads, c.layers,
                   c.ffn_mult, init_rng) {
    cfg.validate();
    log_inv_std = ps.add("render.log_inv_std",
                         tensor<Real>::scalar(std::log(static_cast<Real>(c.inv_std_init))));
  }

  static sdf_arch make_arch(const config& c) {
    return {3 + c.vol_channels + c.feat_channels + 3, c.sdf_hidden, c.geo_feats};
  }

  ad::var<Real> inv_std() const { return ad::exp_(log_inv_std); }
};

// Everything derived from the N source views that per-point queries consume.
// Holds tape nodes; build once per training step and discard with the step.
template <typename Real>
struct scene_context {
  std::vector<camera_pose> poses;
  ad::var<Real> images;          // (N*H*W) x 3 pixel stack, constants
  int64_t img_h = 0, img_w = 0;
  ad::var<Real> feat_stack;      // (N*Hf*Wf) x C
  int64_t feat_h = 0, feat_w = 0, stride = 1;
  ad::var<Real> embedding;       // 1 x d_emb, from view 0
  ad::var<Real> volume;          // G x C_vol encoding volume
  generated_weights<Real> weights;
  voxel_grid grid;

  int64_t n_views() const { return static_cast<int64_t>(poses.size()); }
};

// images: one (H*W) x 3 row-major raster per source view.
template <typename Real>
scene_context<Real> build_scene_context(const pipeline<Real>& pipe,
                                        const std::vector<tensor<Real>>& images,
                                        const std::vector<camera_pose>& poses) {
  VT_CHECK(!images.empty() && images.size() == poses.size(),
           "build_scene_context: need one image per pose, got ", images.size(), " images / ",
           poses.size(), " poses");
  scene_context<Real> sc;
  sc.poses = poses;
  sc.grid = pipe.grid;
  sc.stride = pipe.cfg.feat_stride;
  sc.img_w = poses[0].width;
  sc.img_h = poses[0].height;

  std::vector<ad::var<Real>> imgs;
  std::vector<feat_map<Real>> fmaps;
  std::vector<ad::var<Real>> maps;
  for (size_t i = 0; i < images.size(); ++i) {
    VT_CHECK(poses[i].width == sc.img_w && poses[i].height == sc.img_h,
             "build_scene_context: view image sizes differ");
    VT_CHECK(images[i].rows == sc.img_h * sc.img_w && images[i].cols == 3,
             "build_scene_context: image ", i, " is not (H*W) x 3");
    imgs.push_back(ad::make_const(images[i]));
    fmaps.push_back(pipe.featnet.apply(imgs.back(), sc.img_h, sc.img_w));
    maps.push_back(fmaps.back().map);
  }
  sc.images = imgs.size() == 1 ? imgs[0] : ad::concat_rows(imgs);
  sc.feat_h = fmaps[0].h;
  sc.feat_w = fmaps[0].w;
  sc.feat_stack = maps.size() == 1 ? maps[0] : ad::concat_rows(maps);

  sc.embedding = pipe.embedder.apply(imgs[0], sc.img_h, sc.img_w);
  auto warped = warp_features(fmaps, poses, sc.grid, sc.stride);
  sc.volume = pipe.regularizer.apply(variance_fuse(warped), sc.grid);
  sc.weights = pipe.hyper.generate(sc.embedding);
  return sc;
}

// Per-point, per-view bilinear colors and features, rows point-major
// (i*N + j). Projections behind the camera or outside the full-resolution
// image bounds are invalid and hold zeros.
template <typename Real>
struct view_samples {
  ad::var<Real> colors;  // (S*N) x 3
  ad::var<Real> feats;   // (S*N) x C
  std::shared_ptr<const std::vector<uint8_t>> validity;  // S*N flags
};

template <typename Real>
view_samples<Real> gather_view_samples(const scene_context<Real>& sc, const tensor<Real>& pts) {
  VT_CHECK(pts.cols == 3, "gather_view_samples: points must be S x 3");
  int64_t s = pts.rows, n = sc.n_views();
  auto cq = std::make_shared<std::vector<ad::gather2d_query<Real>>>();
  auto fq = std::make_shared<std::vector<ad::gather2d_query<Real>>>();
  cq->reserve(static_cast<size_t>(s * n));
  fq->reserve(static_cast<size_t>(s * n));
  auto validity = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(s * n));
  Real inv_stride = Real(1) / static_cast<Real>(sc.stride);
  for (int64_t i = 0; i < s; ++i) {
    Eigen::Vector3d p(pts(i, 0), pts(i, 1), pts(i, 2));
    for (int64_t j = 0; j < n; ++j) {
      auto pr = sc.poses[static_cast<size_t>(j)].project(p);
      uint8_t ok = pr.valid ? 1 : 0;
      (*validity)[static_cast<size_t>(i * n + j)] = ok;
      cq->push_back({j, static_cast<Real>(pr.u), static_cast<Real>(pr.v), ok});
      fq->push_back({j, static_cast<Real>(pr.u) * inv_stride,
                     static_cast<Real>(pr.v) * inv_stride, ok});
    }
  }
  view_samples<Real> out;
  out.colors = ad::bilinear_gather(sc.images, sc.img_h, sc.img_w,
                                   std::shared_ptr<const std::vector<ad::gather2d_query<Real>>>(cq));
  out.feats = ad::bilinear_gather(sc.feat_stack, sc.feat_h, sc.feat_w,
                                  std::shared_ptr<const std::vector<ad::gather2d_query<Real>>>(fq));
  out.validity = std::shared_ptr<const std::vector<uint8_t>>(validity);
  return out;
}

// Radiance c_hat = sum_i omega_i c_i with omega from the aggregation
// transformer (or the uniform mean-pool ablation). Points with no valid view
// cannot form tokens; they fall back to zero radiance, which compositing
// masks out (such points only arise on degenerate rays or outside the
// camera rig's shared frustum).
template <typename Real>
ad::var<Real> blend_radiance(const pipeline<Real>& pipe, const scene_context<Real>& sc,
                             const view_samples<Real>& vsmp, const ad::var<Real>& gvol,
                             int64_t s) {
  int64_t n = sc.n_views();
  const auto& valid = *vsmp.validity;
  std::vector<int64_t> ok;
  ok.reserve(static_cast<size_t>(s));
  for (int64_t i = 0; i < s; ++i) {
    int64_t cnt = 0;
    for (int64_t j = 0; j < n; ++j) cnt += valid[static_cast<size_t>(i * n + j)] ? 1 : 0;
    if (cnt > 0) ok.push_back(i);
  }
  if (ok.empty()) return ad::make_const(tensor<Real>(s, 3));
  int64_t s_ok = static_cast<int64_t>(ok.size());

  auto idx_tok = std::make_shared<std::vector<int64_t>>();
  auto idx_g = std::make_shared<std::vector<int64_t>>();
  auto sub_valid = std::make_shared<std::vector<uint8_t>>();
  idx_tok->reserve(static_cast<size_t>(s_ok * n));
  idx_g->reserve(static_cast<size_t>(s_ok));
  sub_valid->reserve(static_cast<size_t>(s_ok * n));
  for (int64_t i : ok) {
    idx_g->push_back(i);
    for (int64_t j = 0; j < n; ++j) {
      idx_tok->push_back(i * n + j);
      sub_valid->push_back(valid[static_cast<size_t>(i * n + j)]);
    }
  }
  auto colors_ok =
      ad::gather_rows(vsmp.colors, std::shared_ptr<const std::vector<int64_t>>(idx_tok));
  auto feats_ok =
      ad::gather_rows(vsmp.feats, std::shared_ptr<const std::vector<int64_t>>(idx_tok));
  auto g_rep = ad::repeat_interleave_rows(
      ad::gather_rows(gvol, std::shared_ptr<const std::vector<int64_t>>(idx_g)), n);
  auto tokens = ad::concat_cols<Real>({colors_ok, feats_ok, g_rep});

  std::shared_ptr<const std::vector<uint8_t>> sv(sub_valid);
  auto logits = pipe.cfg.mean_pool
                    ? mean_pool_baseline<Real>(s_ok, n, sv)
                    : voltran_forward(pipe.aggregator, tokens, sv, n).logits;
  auto blended = ad::group_weighted_sum(blend_weights(logits, sv), colors_ok);
  if (s_ok == s) return blended;

  // scatter back, routing zero-valid samples to an appended zero row
  auto padded = ad::concat_rows<Real>({blended, ad::make_const(tensor<Real>(1, 3))});
  auto idx_out = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(s), s_ok);
  for (int64_t k = 0; k < s_ok; ++k) (*idx_out)[static_cast<size_t>(ok[static_cast<size_t>(k)])] = k;
  return ad::gather_rows(padded, std::shared_ptr<const std::vector<int64_t>>(idx_out));
}

// Per-point evaluation of the generated SDF (optionally with its spatial
// gradient) and, when requested, the view-blended radiance.
template <typename Real>
struct field_eval {
  ad::var<Real> s;       // S x 1
  ad::var<Real> geo;     // S x geo_feats (null when geo_feats = 0)
  ad::var<Real> grad;    // S x 3 (null unless with_gradient)
  ad::var<Real> colors;  // S x 3 (null unless with_radiance)
};

template <typename Real>
field_eval<Real> eval_field(const pipeline<Real>& pipe, const scene_context<Real>& sc,
                            const tensor<Real>& pts, bool with_radiance, bool with_gradient) {
  int64_t s = pts.rows;
  auto pts_var = ad::make_const(pts);
  auto vsmp = gather_view_samples(sc, pts);
  auto gvol = sample_volume(sc.volume, sc.grid, pts_var);
  auto x = ad::concat_cols<Real>(
      {pts_var, gvol, ad::masked_mean_groups(vsmp.feats, vsmp.validity, sc.n_views()),
       ad::masked_mean_groups(vsmp.colors, vsmp.validity, sc.n_views())});
  field_eval<Real> out;
  if (with_gradient) {
    auto r = sdf_forward_with_spatial_gradient(sc.weights, x);
    out.s = r.s;
    out.geo = r.geo;
    out.grad = r.grad;
  } else {
    auto r = sdf_forward(sc.weights, x);
    out.s = r.s;
    out.geo = r.geo;
  }
  if (with_radiance) out.colors = blend_radiance(pipe, sc, vsmp, gvol, s);
  return out;
}

// Full differentiable forward for a pixel batch of a target view: stratified
// rays, per-sample field evaluation, NeuS compositing.
template <typename Real>
struct render_batch {
  ray_batch<Real> rays;
  field_eval<Real> field;  // per ray sample
  render_output<Real> out;
};

template <typename Real>
render_batch<Real> render_pixels(const pipeline<Real>& pipe, const scene_context<Real>& sc,
                                 const camera_pose& target,
                                 const std::vector<std::array<int64_t, 2>>& pixels,
                                 rng_stream& rs, bool with_gradient = false) {
  render_batch<Real> rb;
  rb.rays = sample_rays<Real>(target, pixels, pipe.cfg.n_samples,
                              static_cast<Real>(pipe.cfg.bound_radius), rs);
  rb.field = eval_field(pipe, sc, rb.rays.points, /*with_radiance=*/true, with_gradient);
  auto alpha = sdf_to_alpha(rb.field.s, rb.rays.n, rb.rays.m, pipe.inv_std());
  rb.out = composite(alpha, rb.field.colors, rb.rays.t, rb.rays.hit);
  return rb;
}

// Renders a whole target view in pixel chunks (values only, no backward).
// mask holds the accumulated opacity, depth the expected ray parameter.
template <typename Real>
rendered_view render_full_view(const pipeline<Real>& pipe, const scene_context<Real>& sc,
                               const camera_pose& target, rng_stream& rs,
                               int64_t chunk_pixels = 1024) {
  VT_CHECK(chunk_pixels >= 1, "render_full_view: chunk must be positive");
  rendered_view out;
  out.rgb = imagef(target.width, target.height, 3);
  out.depth = imagef(target.width, target.height, 1);
  out.mask = imagef(target.width, target.height, 1);
  std::vector<std::array<int64_t, 2>> pixels;
  pixels.reserve(static_cast<size_t>(target.width * target.height));
  for (int64_t y = 0; y < target.height; ++y)
    for (int64_t x = 0; x < target.width; ++x) pixels.push_back({x, y});
  for (size_t at = 0; at < pixels.size(); at += static_cast<size_t>(chunk_pixels)) {
    size_t end = std::min(pixels.size(), at + static_cast<size_t>(chunk_pixels));
    std::vector<std::array<int64_t, 2>> chunk(pixels.begin() + static_cast<int64_t>(at),
                                              pixels.begin() + static_cast<int64_t>(end));
    auto rb = render_pixels(pipe, sc, target, chunk, rs);
    for (size_t i = 0; i < chunk.size(); ++i) {
      int64_t x = chunk[i][0], y = chunk[i][1];
      int64_t r = static_cast<int64_t>(i);
      for (int64_t ch = 0; ch < 3; ++ch)
        out.rgb.at(x, y, ch) = static_cast<float>(rb.out.pixel->val(r, ch));
      out.depth.at(x, y) = static_cast<float>(rb.out.depth->val(r, 0));
      out.mask.at(x, y) = static_cast<float>(rb.out.acc->val(r, 0));
    }
  }
  return out;
}

// (H*W) x 3 tensor from an RGB raster, rows in y*W + x order.
template <typename Real>
tensor<Real> image_to_tensor(const imagef& img) {
  VT_CHECK(img.c == 3, "image_to_tensor: expected 3 channels, got ", img.c);
  tensor<Real> t(img.h * img.w, 3);
  for (int64_t i = 0; i < img.h * img.w; ++i)
    for (int64_t ch = 0; ch < 3; ++ch)
      t(i, ch) = static_cast<Real>(img.v[static_cast<size_t>(i * 3 + ch)]);
  return t;
}

}  // namespace voltran
