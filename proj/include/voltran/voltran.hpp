#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "voltran/core/init.hpp"
#include "voltran/core/ops_nn.hpp"
#include "voltran/core/optim.hpp"

// Multi-view aggregation transformer. Per ray sample, the sequence is one
// learned aggregation token followed by N view tokens [c_i | F_i(Pi(p)) |
// G(p)]; pre-norm self-attention blocks update the sequence and a final MLP
// maps each *view* token output to a blending logit. The aggregation token's
// output is returned alongside (an extra per-sample feature for the radiance
// path; the color blend itself stays a convex combination of view colors).
//
// No positional encoding is applied, and all reductions over tokens are
// order-invariant, so permuting the view tokens permutes the logits exactly.
namespace voltran {

template <typename Real>
struct voltran_params {
  int64_t d_tok = 0, d_pad = 0, heads = 0, layers = 0, ffn_mult = 0;
  ad::var<Real> agg_token;  // 1 x d_tok
  struct layer {
    ad::var<Real> g1, b1;          // pre-attention layer norm
    ad::var<Real> wq, bq, wk, bk, wv, bv;
    ad::var<Real> wh, bh;          // head-merge
    ad::var<Real> g2, b2;          // pre-ffn layer norm
    ad::var<Real> wf1, bf1, wf2, bf2;
  };
  std::vector<layer> ls;
  ad::var<Real> whd1, bhd1, whd2, bhd2;  // final logit head (per token)

  voltran_params(ad::param_store<Real>& ps, const std::string& prefix, int64_t d_tok_,
                 int64_t heads_, int64_t layers_, int64_t ffn_mult_, rng_stream& rs)
      : d_tok(d_tok_), heads(heads_), layers(layers_), ffn_mult(ffn_mult_) {
    VT_CHECK(d_tok > 0 && heads > 0 && layers > 0 && ffn_mult > 0, "voltran: bad sizes");
    d_pad = detail::ceil_div(d_tok, heads) * heads;
    {
      tensor<Real> t(1, d_tok);
      for (int64_t j = 0; j < d_tok; ++j) t(0, j) = static_cast<Real>(rs.normal(0.0, 0.1));
      agg_token = ps.add(prefix + ".agg_token", std::move(t));
    }
    auto ones = [&] {
      tensor<Real> t(1, d_pad);
      for (int64_t j = 0; j < d_pad; ++j) t(0, j) = Real(1);
      return t;
    };
    for (int64_t l = 0; l < layers; ++l) {
      layer lay;
      std::string base = prefix + ".l" + std::to_string(l);
      lay.g1 = ps.add(base + ".ln1.g", ones());
      lay.b1 = ps.add(base + ".ln1.b", tensor<Real>(1, d_pad));
      lay.wq = ps.add(base + ".q.w", detail::linear_weight_init<Real>(rs, d_pad, d_pad));
      lay.bq = ps.add(base + ".q.b", tensor<Real>(1, d_pad));
      lay.wk = ps.add(base + ".k.w", detail::linear_weight_init<Real>(rs, d_pad, d_pad));
      lay.bk = ps.add(base + ".k.b", tensor<Real>(1, d_pad));
      lay.wv = ps.add(base + ".v.w", detail::linear_weight_init<Real>(rs, d_pad, d_pad));
      lay.bv = ps.add(base + ".v.b", tensor<Real>(1, d_pad));
      lay.wh = ps.add(base + ".merge.w", detail::linear_weight_init<Real>(rs, d_pad, d_pad));
      lay.bh = ps.add(base + ".merge.b", tensor<Real>(1, d_pad));
      lay.g2 = ps.add(base + ".ln2.g", ones());
      lay.b2 = ps.add(base + ".ln2.b", tensor<Real>(1, d_pad));
      lay.wf1 = ps.add(base + ".ffn1.w",
                       detail::dense_weight_init<Real>(rs, d_pad * ffn_mult, d_pad));
      lay.bf1 = ps.add(base + ".ffn1.b", tensor<Real>(1, d_pad * ffn_mult));
      lay.wf2 = ps.add(base + ".ffn2.w",
                       detail::linear_weight_init<Real>(rs, d_pad, d_pad * ffn_mult));
      lay.bf2 = ps.add(base + ".ffn2.b", tensor<Real>(1, d_pad));
      ls.push_back(std::move(lay));
    }
    whd1 = ps.add(prefix + ".head1.w", detail::dense_weight_init<Real>(rs, d_pad, d_pad));
    bhd1 = ps.add(prefix + ".head1.b", tensor<Real>(1, d_pad));
    whd2 = ps.add(prefix + ".head2.w", detail::linear_weight_init<Real>(rs, 1, d_pad));
    bhd2 = ps.add(prefix + ".head2.b", tensor<Real>(1, 1));
  }
};

// One multi-head attention application without the head merge: per head,
// Softmax(QK^T/sqrt(d_head)) V with invalid keys masked to -inf. Returns the
// concatenated per-head outputs, same shape as the inputs.
template <typename Real>
ad::var<Real> self_attention(const ad::var<Real>& q, const ad::var<Real>& k,
                             const ad::var<Real>& v,
                             std::shared_ptr<const std::vector<uint8_t>> key_valid, int64_t t,
                             int64_t heads) {
  return ad::batched_attention(q, k, v, std::move(key_valid), t, heads);
}

template <typename Real>
struct voltran_out {
  ad::var<Real> logits;   // S x N, one blending logit per view
  ad::var<Real> agg_out;  // S x d_pad, aggregation-token output
};

// view_tokens: (S*N) x d_tok, sample-major; validity: S*N flags.
// Each sample must keep at least one valid view.
template <typename Real>
voltran_out<Real> voltran_forward(const voltran_params<Real>& vp, const ad::var<Real>& view_tokens,
                                  std::shared_ptr<const std::vector<uint8_t>> validity,
                                  int64_t n_views) {
  VT_CHECK(view_tokens->val.cols == vp.d_tok, "voltran_forward: token width ",
           view_tokens->val.cols, " != ", vp.d_tok);
  VT_CHECK(n_views >= 1 && view_tokens->val.rows % n_views == 0,
           "voltran_forward: rows not a multiple of n_views");
  VT_CHECK(static_cast<int64_t>(validity->size()) == view_tokens->val.rows,
           "voltran_forward: validity size");
  int64_t s = view_tokens->val.rows / n_views, t = n_views + 1;

  // Interleave: rows s*(N+1) form [agg, view_1..view_N] per sample.
  auto idx = std::make_shared<std::vector<int64_t>>();
  idx->reserve(static_cast<size_t>(s * t));
  auto key_valid = std::make_shared<std::vector<uint8_t>>();
  key_valid->reserve(static_cast<size_t>(s * t));
  for (int64_t i = 0; i < s; ++i) {
    int64_t n_ok = 0;
    idx->push_back(i);  // row i of the tiled agg block
    key_valid->push_back(1);
    for (int64_t j = 0; j < n_views; ++j) {
      idx->push_back(s + i * n_views + j);
      uint8_t ok = (*validity)[static_cast<size_t>(i * n_views + j)];
      key_valid->push_back(ok);
      n_ok += ok ? 1 : 0;
    }
    VT_CHECK(n_ok >= 1, "voltran_forward: sample ", i, " has no valid view");
  }
  auto stacked = ad::concat_rows<Real>({ad::tile_rows(vp.agg_token, s), view_tokens});
  auto x = ad::pad_cols(
      ad::gather_rows(stacked, std::shared_ptr<const std::vector<int64_t>>(idx)), vp.d_pad);

  // linear_exact everywhere on the sequence: a GEMM's rounding depends on a
  // row's position (packet interior vs tail), which would leak token order.
  std::shared_ptr<const std::vector<uint8_t>> kv = key_valid;
  for (const auto& lay : vp.ls) {
    auto h = ad::layer_norm(x, lay.g1, lay.b1);
    auto at = self_attention(ad::linear_exact(h, lay.wq, lay.bq),
                             ad::linear_exact(h, lay.wk, lay.bk),
                             ad::linear_exact(h, lay.wv, lay.bv), kv, t, vp.heads);
    x = ad::add(x, ad::linear_exact(at, lay.wh, lay.bh));
    auto h2 = ad::layer_norm(x, lay.g2, lay.b2);
    x = ad::add(x, ad::linear_exact(ad::relu(ad::linear_exact(h2, lay.wf1, lay.bf1)), lay.wf2,
                                    lay.bf2));
  }

  auto scores =
      ad::linear_exact(ad::relu(ad::linear_exact(x, vp.whd1, vp.bhd1)), vp.whd2, vp.bhd2);
  std::vector<ad::var<Real>> cols;
  for (int64_t j = 1; j <= static_cast<int64_t>(n_views); ++j)
    cols.push_back(ad::strided_rows(scores, j, t));
  voltran_out<Real> out;
  out.logits = ad::concat_cols(cols);
  out.agg_out = ad::strided_rows(x, 0, t);
  return out;
}

// Softmax over valid views: omega_i >= 0, sum over valid = 1, invalid = 0.
template <typename Real>
ad::var<Real> blend_weights(const ad::var<Real>& logits,
                            std::shared_ptr<const std::vector<uint8_t>> validity) {
  auto mask = std::make_shared<std::vector<uint8_t>>(validity->begin(), validity->end());
  return ad::softmax_rows_masked(logits, mask);
}

// Ablation baseline: uniform logits over valid views (no learned aggregation).
template <typename Real>
ad::var<Real> mean_pool_baseline(int64_t s, int64_t n_views,
                                 std::shared_ptr<const std::vector<uint8_t>> validity) {
  VT_CHECK(static_cast<int64_t>(validity->size()) == s * n_views,
           "mean_pool_baseline: validity size");
  for (int64_t i = 0; i < s; ++i) {
    int64_t n_ok = 0;
    for (int64_t j = 0; j < n_views; ++j)
      n_ok += (*validity)[static_cast<size_t>(i * n_views + j)] ? 1 : 0;
    VT_CHECK(n_ok >= 1, "mean_pool_baseline: sample ", i, " has no valid view");
  }
  return ad::make_const(tensor<Real>(s, n_views));
}

}  // namespace voltran
