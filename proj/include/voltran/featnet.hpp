#pragma once

#include <cstdint>
#include <string>

#include "voltran/core/init.hpp"
#include "voltran/core/ops_nn.hpp"
#include "voltran/core/optim.hpp"

// Per-view 2D feature extraction: a small feature-pyramid CNN whose single
// consumed level sits at a configurable stride, plus a global condition
// encoder that summarizes one view into an embedding vector.
//
// Images enter the tape as (H*W) x 3 row-major maps, values in [0,1].
namespace voltran {

template <typename Real>
struct feat_map {
  ad::var<Real> map;  // (h*w) x C
  int64_t h = 0, w = 0;
};

// Bottom-up strided convs to stride 8, 1x1 laterals, nearest-neighbor
// top-down merge, one smoothing conv at the consumed level. Output spatial
// size is ceil(H/stride) x ceil(W/stride).
template <typename Real>
struct feat_extractor {
  int64_t channels, stride;
  ad::var<Real> wc[4], bc[4];      // bottom-up 3x3 convs (stride 1,2,2,2)
  ad::var<Real> wlat[4], blat[4];  // 1x1 laterals at strides 1,2,4,8
  ad::var<Real> wout, bout;        // 3x3 smoothing at the consumed level

  feat_extractor(ad::param_store<Real>& ps, const std::string& prefix, int64_t channels_,
                 int64_t stride_, rng_stream& rs)
      : channels(channels_), stride(stride_) {
    VT_CHECK(stride == 1 || stride == 2 || stride == 4, "feat_extractor: stride must be 1, 2, 4");
    for (int i = 0; i < 4; ++i) {
      int64_t cin = i == 0 ? 3 : channels;
      wc[i] = ps.add(prefix + ".c" + std::to_string(i) + ".w",
                     detail::conv_weight_init<Real>(rs, channels, 3, cin));
      bc[i] = ps.add(prefix + ".c" + std::to_string(i) + ".b", tensor<Real>(1, channels));
      wlat[i] = ps.add(prefix + ".lat" + std::to_string(i) + ".w",
                       detail::conv_weight_init<Real>(rs, channels, 1, channels));
      blat[i] = ps.add(prefix + ".lat" + std::to_string(i) + ".b", tensor<Real>(1, channels));
    }
    wout = ps.add(prefix + ".out.w", detail::conv_weight_init<Real>(rs, channels, 3, channels));
    bout = ps.add(prefix + ".out.b", tensor<Real>(1, channels));
  }

  feat_map<Real> apply(const ad::var<Real>& image, int64_t h, int64_t w) const {
    VT_CHECK(image->val.cols == 3, "feat_extractor: input must have 3 channels, got ",
             image->val.cols);
    VT_CHECK(image->val.rows == h * w, "feat_extractor: input rows != H*W");
    int64_t hs[4] = {h, 0, 0, 0}, ws[4] = {w, 0, 0, 0};
    for (int i = 1; i < 4; ++i) {
      hs[i] = detail::ceil_div(hs[i - 1], 2);
      ws[i] = detail::ceil_div(ws[i - 1], 2);
    }
    ad::var<Real> c[4];
    c[0] = ad::relu(ad::conv2d(image, wc[0], bc[0], h, w, 3, 1));
    for (int i = 1; i < 4; ++i)
      c[i] = ad::relu(ad::conv2d(c[i - 1], wc[i], bc[i], hs[i - 1], ws[i - 1], 3, 2));

    int want = stride == 1 ? 0 : stride == 2 ? 1 : 2;
    ad::var<Real> p = ad::conv2d(c[3], wlat[3], blat[3], hs[3], ws[3], 1, 1);
    for (int i = 2; i >= want; --i) {
      auto up = ad::upsample2d_nearest(p, hs[i + 1], ws[i + 1], hs[i], ws[i]);
      p = ad::add(ad::conv2d(c[i], wlat[i], blat[i], hs[i], ws[i], 1, 1), up);
    }
    return {ad::conv2d(p, wout, bout, hs[want], ws[want], 3, 1), hs[want], ws[want]};
  }
};

// Global condition encoder: three stride-2 convs, spatial average pooling,
// one dense layer. The pooling makes the summary insensitive to where in the
// frame content sits.
template <typename Real>
struct cond_encoder {
  int64_t d_emb;
  ad::var<Real> w0, b0, w1, b1, w2, b2, wd, bd;

  cond_encoder(ad::param_store<Real>& ps, const std::string& prefix, int64_t d_emb_,
               rng_stream& rs)
      : d_emb(d_emb_) {
    w0 = ps.add(prefix + ".c0.w", detail::conv_weight_init<Real>(rs, 8, 3, 3));
    b0 = ps.add(prefix + ".c0.b", tensor<Real>(1, 8));
    w1 = ps.add(prefix + ".c1.w", detail::conv_weight_init<Real>(rs, 16, 3, 8));
    b1 = ps.add(prefix + ".c1.b", tensor<Real>(1, 16));
    w2 = ps.add(prefix + ".c2.w", detail::conv_weight_init<Real>(rs, 32, 3, 16));
    b2 = ps.add(prefix + ".c2.b", tensor<Real>(1, 32));
    wd = ps.add(prefix + ".dense.w", detail::dense_weight_init<Real>(rs, d_emb, 32));
    bd = ps.add(prefix + ".dense.b", tensor<Real>(1, d_emb));
  }

  // image (H*W x 3) -> embedding (1 x d_emb)
  ad::var<Real> apply(const ad::var<Real>& image, int64_t h, int64_t w) const {
    VT_CHECK(image->val.cols == 3, "cond_encoder: input must have 3 channels");
    VT_CHECK(image->val.rows == h * w, "cond_encoder: input rows != H*W");
    int64_t ha = detail::ceil_div(h, 2), wa = detail::ceil_div(w, 2);
    int64_t hb = detail::ceil_div(ha, 2), wb = detail::ceil_div(wa, 2);
    auto e0 = ad::relu(ad::conv2d(image, w0, b0, h, w, 3, 2));
    auto e1 = ad::relu(ad::conv2d(e0, w1, b1, ha, wa, 3, 2));
    auto e2 = ad::relu(ad::conv2d(e1, w2, b2, hb, wb, 3, 2));
    auto pooled = ad::mean_rows(e2);  // global average pool -> 1 x 32
    return ad::linear(pooled, wd, bd);
  }
};

}  // namespace voltran
