#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voltran/core/init.hpp"
#include "voltran/core/ops.hpp"
#include "voltran/core/optim.hpp"
#include "voltran/core/rng.hpp"

// HyperNetwork-generated SDF: per-layer 3-layer generators map a conditioning
// embedding to the weights and biases of an SDF MLP, which is then evaluated
// with dynamically generated weights. Nothing per-scene is stored; weights
// are regenerated on every forward pass.
//
// The SDF input is the concatenation [p (3) | volume feature (C_vol) |
// mean image feature (C) | mean color (3)], d = 3 + C_vol + C + 3.
namespace voltran {

struct sdf_arch {
  int64_t d_in = 0;
  std::vector<int64_t> hidden;
  int64_t geo_feats = 0;  // SDF output is 1 + geo_feats channels

  int64_t n_layers() const { return static_cast<int64_t>(hidden.size()) + 1; }
  int64_t layer_in(int64_t l) const { return l == 0 ? d_in : hidden[static_cast<size_t>(l - 1)]; }
  int64_t layer_out(int64_t l) const {
    return l == n_layers() - 1 ? 1 + geo_feats : hidden[static_cast<size_t>(l)];
  }
  void validate() const {
    VT_CHECK(d_in >= 4, "sdf_arch: input dim must cover position plus features");
    VT_CHECK(!hidden.empty(), "sdf_arch: need at least one hidden layer");
    for (int64_t h : hidden) VT_CHECK(h >= 1, "sdf_arch: hidden dims must be >= 1");
    VT_CHECK(geo_feats >= 0, "sdf_arch: geo_feats must be >= 0");
  }
};

// Weights of the SDF MLP as tape nodes (generated, or hand-built in tests).
template <typename Real>
struct generated_weights {
  sdf_arch arch;
  std::vector<ad::var<Real>> w;  // per layer: out_l x in_l, already 1/sqrt(in_l)-scaled
  std::vector<ad::var<Real>> b;  // per layer: 1 x out_l
};

enum class hyper_init {
  geometric,  // zero final generator layers + constant bias pattern: init SDF ~ coarse sphere
  random,     // fully random generators: conditioning path live from step 0
};

template <typename Real>
struct hyper_generator {
  static constexpr Real softplus_beta = Real(100);

  sdf_arch arch;
  int64_t d_emb = 0, hidden = 0;
  struct layer_gen {
    ad::var<Real> w0, b0, w1, b1, w2, b2;  // d_emb -> h -> h -> out*(in+1)
  };
  std::vector<layer_gen> gens;

  hyper_generator(ad::param_store<Real>& ps, const std::string& prefix, const sdf_arch& arch_,
                  int64_t d_emb_, int64_t hidden_, hyper_init mode, rng_stream& rs)
      : arch(arch_), d_emb(d_emb_), hidden(hidden_) {
    arch.validate();
    VT_CHECK(d_emb > 0 && hidden > 0, "hyper_generator: embedding/hidden dims must be positive");
    for (int64_t l = 0; l < arch.n_layers(); ++l) {
      int64_t in = arch.layer_in(l), out = arch.layer_out(l);
      int64_t flat = out * (in + 1);
      layer_gen g;
      std::string base = prefix + ".gen" + std::to_string(l);
      g.w0 = ps.add(base + ".w0", detail::dense_weight_init<Real>(rs, hidden, d_emb));
      g.b0 = ps.add(base + ".b0", tensor<Real>(1, hidden));
      g.w1 = ps.add(base + ".w1", detail::dense_weight_init<Real>(rs, hidden, hidden));
      g.b1 = ps.add(base + ".b1", tensor<Real>(1, hidden));
      if (mode == hyper_init::random) {
        tensor<Real> w2(flat, hidden);
        Real std = Real(0.1) / std::sqrt(Real(hidden));
        for (int64_t i = 0; i < flat; ++i)
          for (int64_t j = 0; j < hidden; ++j) w2(i, j) = static_cast<Real>(rs.normal(0.0, std));
        g.w2 = ps.add(base + ".w2", std::move(w2));
        g.b2 = ps.add(base + ".b2", tensor<Real>(1, flat));
      } else {
        g.w2 = ps.add(base + ".w2", tensor<Real>(flat, hidden));
        g.b2 = ps.add(base + ".b2", geometric_bias_pattern(l, rs));
      }
      gens.push_back(std::move(g));
    }
    if (mode == hyper_init::geometric) calibrate_sphere(rs);
  }

  // e (1 x d_emb) -> per-layer (matrix, bias) tape nodes. The matrix part of
  // each generator output is reshaped row-major to (out x in) and scaled by
  // 1/sqrt(in) before use; the bias is used unscaled.
  generated_weights<Real> generate(const ad::var<Real>& e) const {
    VT_CHECK(e->val.rows == 1 && e->val.cols == d_emb,
             "generate_weights: embedding must be 1 x ", d_emb, ", got ", e->val.rows, " x ",
             e->val.cols);
    generated_weights<Real> out;
    out.arch = arch;
    for (int64_t l = 0; l < arch.n_layers(); ++l) {
      const auto& g = gens[static_cast<size_t>(l)];
      int64_t in = arch.layer_in(l), outd = arch.layer_out(l);
      auto h0 = ad::relu(ad::linear(e, g.w0, g.b0));
      auto h1 = ad::relu(ad::linear(h0, g.w1, g.b1));
      auto flat = ad::linear(h1, g.w2, g.b2);  // 1 x out*(in+1)
      auto wmat = ad::reshape(ad::slice_cols(flat, 0, outd * in), outd, in);
      out.w.push_back(ad::scale(wmat, Real(1) / std::sqrt(Real(in))));
      out.b.push_back(ad::slice_cols(flat, outd * in, outd));
    }
    return out;
  }

 private:
  // Constant bias pattern for the final generator layer: encodes, in the
  // (matrix | bias) flat layout, an SDF that is approximately |p| - 0.5.
  // Layer 0 projects the 3 positional inputs onto random directions (feature
  // columns zero so arbitrary features cannot disturb the init surface);
  // deeper hidden layers pass activations through; the output layer is
  // calibrated after construction (see calibrate_sphere).
  tensor<Real> geometric_bias_pattern(int64_t l, rng_stream& rs) {
    int64_t in = arch.layer_in(l), out = arch.layer_out(l);
    tensor<Real> w(out, in), b(1, out);
    Real pre = std::sqrt(Real(in));  // cancels the 1/sqrt(in) use-time scaling
    if (l == 0) {
      // Antipodal pairs of a randomly rotated Fibonacci hemisphere:
      // softplus(d.p) + softplus(-d.p) ~ |d.p|, and the quasi-uniform spread
      // keeps mean_j |d_j.p| nearly direction-independent, so the init level
      // set is nearly round (iid directions leave ~10% lumpiness at h=48).
      double q[4], qn;
      do {
        for (double& x : q) x = rs.normal(0.0, 1.0);
        qn = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3];
      } while (qn < 1e-12);
      for (double& x : q) x /= std::sqrt(qn);
      double R[3][3] = {{1 - 2 * (q[2] * q[2] + q[3] * q[3]), 2 * (q[1] * q[2] - q[0] * q[3]),
                         2 * (q[1] * q[3] + q[0] * q[2])},
                        {2 * (q[1] * q[2] + q[0] * q[3]), 1 - 2 * (q[1] * q[1] + q[3] * q[3]),
                         2 * (q[2] * q[3] - q[0] * q[1])},
                        {2 * (q[1] * q[3] - q[0] * q[2]), 2 * (q[2] * q[3] + q[0] * q[1]),
                         1 - 2 * (q[1] * q[1] + q[2] * q[2])}};
      int64_t pairs = out / 2;
      for (int64_t m = 0; m < pairs; ++m) {
        double z = (double(m) + 0.5) / double(pairs);
        double rxy = std::sqrt(std::max(0.0, 1.0 - z * z));
        double phi = double(m) * 2.399963229728653;  // golden angle
        double d0[3] = {rxy * std::cos(phi), rxy * std::sin(phi), z};
        for (int64_t c = 0; c < 3; ++c) {
          double d = R[c][0] * d0[0] + R[c][1] * d0[1] + R[c][2] * d0[2];
          w(2 * m, c) = static_cast<Real>(d) * pre;
          w(2 * m + 1, c) = static_cast<Real>(-d) * pre;
        }
      }
      if (out % 2) {  // odd width: one extra random direction
        double d[3], n2;
        do {
          for (double& x : d) x = rs.normal(0.0, 1.0);
          n2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        } while (n2 < 1e-12);
        double n = std::sqrt(n2);
        for (int64_t c = 0; c < 3; ++c) w(out - 1, c) = static_cast<Real>(d[c] / n) * pre;
      }
    } else if (l < arch.n_layers() - 1) {
      for (int64_t r = 0; r < out; ++r) w(r, r % in) = pre;  // pass-through
    } else {
      for (int64_t c = 0; c < in; ++c) w(0, c) = pre / Real(in);  // mean; refit later
      b(0, 0) = Real(-0.5);
    }
    tensor<Real> flat(1, out * (in + 1));
    for (int64_t r = 0; r < out; ++r)
      for (int64_t c = 0; c < in; ++c) flat(0, r * in + c) = w(r, c);
    for (int64_t r = 0; r < out; ++r) flat(0, out * in + r) = b(0, r);
    return flat;
  }

  // Fit of the output layer's (gain, bias) so the initial SDF matches
  // |p| - 0.5 over random points. The hidden response u ~ c(direction)*|p|
  // carries multiplicative direction noise, which would bias an ordinary
  // least-squares slope low (regression dilution); instrumenting by r = |p|
  // (gain = cov(r,y)/cov(r,u)) is immune to it. Operates directly on the
  // stored bias patterns; runs once at construction.
  void calibrate_sphere(rng_stream& rs) {
    int64_t last = arch.n_layers() - 1;
    int64_t n_pts = 512;
    double su = 0, sy = 0, sr = 0, sru = 0, sry = 0;
    std::vector<double> act(static_cast<size_t>(arch.d_in)), next;
    for (int64_t i = 0; i < n_pts; ++i) {
      double p[3], r2 = 0;
      for (double& x : p) {
        x = rs.uniform(-1.1, 1.1);
        r2 += x * x;
      }
      std::fill(act.begin(), act.end(), 0.0);
      for (int a = 0; a < 3; ++a) act[static_cast<size_t>(a)] = p[a];
      for (int64_t l = 0; l < last; ++l) {
        int64_t in = arch.layer_in(l), out = arch.layer_out(l);
        const auto& flat = gens[static_cast<size_t>(l)].b2->val;
        next.assign(static_cast<size_t>(out), 0.0);
        for (int64_t r = 0; r < out; ++r) {
          double z = flat(0, out * in + r);
          for (int64_t c = 0; c < in; ++c)
            z += flat(0, r * in + c) / std::sqrt(double(in)) * act[static_cast<size_t>(c)];
          double bz = double(softplus_beta) * z;  // softplus(z)
          next[static_cast<size_t>(r)] =
              bz > 30.0 ? z : std::log1p(std::exp(bz)) / double(softplus_beta);
        }
        act = next;
      }
      double u = 0;  // current output row: mean of final activations
      for (double a : act) u += a;
      u /= double(act.size());
      double r = std::sqrt(r2), y = r - 0.5;
      su += u;
      sy += y;
      sr += r;
      sru += r * u;
      sry += r * y;
    }
    double n = double(n_pts), det = sru * n - sr * su;
    VT_CHECK(std::abs(det) > 1e-12, "geometric init: degenerate calibration system");
    double gain = (sry * n - sr * sy) / det;
    double bias = (sy - gain * su) / n;
    auto& flat = gens[static_cast<size_t>(last)].b2->val;
    int64_t in = arch.layer_in(last), out = arch.layer_out(last);
    Real pre = std::sqrt(Real(in));
    for (int64_t c = 0; c < in; ++c) flat(0, c) = static_cast<Real>(gain / double(in)) * pre;
    flat(0, out * in) = static_cast<Real>(bias);
  }
};

// Batched SDF evaluation: x (S x d_in) -> s (S x 1), geo (S x geo_feats).
template <typename Real>
struct sdf_eval {
  ad::var<Real> s, geo;
};

template <typename Real>
sdf_eval<Real> sdf_forward(const generated_weights<Real>& gw, const ad::var<Real>& x) {
  VT_CHECK(x->val.cols == gw.arch.d_in, "sdf_forward: input cols ", x->val.cols,
           " != arch d_in ", gw.arch.d_in);
  auto cur = x;
  int64_t last = gw.arch.n_layers() - 1;
  for (int64_t l = 0; l < last; ++l)
    cur = ad::softplus(ad::linear(cur, gw.w[static_cast<size_t>(l)], gw.b[static_cast<size_t>(l)]),
                       hyper_generator<Real>::softplus_beta);
  auto out = ad::linear(cur, gw.w[static_cast<size_t>(last)], gw.b[static_cast<size_t>(last)]);
  sdf_eval<Real> r;
  r.s = ad::slice_cols(out, 0, 1);
  if (gw.arch.geo_feats > 0) r.geo = ad::slice_cols(out, 1, gw.arch.geo_feats);
  return r;
}

// SDF plus its gradient w.r.t. the 3 positional coordinates, holding the
// concatenated features fixed. The gradient is computed by forward tangent
// propagation inside the tape, so it is itself differentiable (the Eikonal
// loss trains through it).
template <typename Real>
struct sdf_eval_grad {
  ad::var<Real> s, geo, grad;  // grad: S x 3
};

template <typename Real>
sdf_eval_grad<Real> sdf_forward_with_spatial_gradient(const generated_weights<Real>& gw,
                                                      const ad::var<Real>& x) {
  VT_CHECK(x->val.cols == gw.arch.d_in, "sdf_spatial_gradient: input cols mismatch");
  int64_t s_rows = x->val.rows, d = gw.arch.d_in;
  tensor<Real> t0(3 * s_rows, d);
  for (int64_t a = 0; a < 3; ++a)
    for (int64_t i = 0; i < s_rows; ++i) t0(a * s_rows + i, a) = Real(1);
  auto tan = ad::make_const(std::move(t0));

  auto cur = x;
  int64_t last = gw.arch.n_layers() - 1;
  for (int64_t l = 0; l < last; ++l) {
    const auto& w = gw.w[static_cast<size_t>(l)];
    auto z = ad::linear(cur, w, gw.b[static_cast<size_t>(l)]);
    auto gate = ad::sigmoid(ad::scale(z, hyper_generator<Real>::softplus_beta));
    tan = ad::mul(ad::matmul_nt(tan, w), ad::tile_rows(gate, 3));
    cur = ad::softplus(z, hyper_generator<Real>::softplus_beta);
  }
  auto out = ad::linear(cur, gw.w[static_cast<size_t>(last)], gw.b[static_cast<size_t>(last)]);
  auto gfull = ad::matmul_nt(tan, gw.w[static_cast<size_t>(last)]);  // 3S x (1+g)
  auto gs = ad::slice_cols(gfull, 0, 1);
  sdf_eval_grad<Real> r;
  r.s = ad::slice_cols(out, 0, 1);
  if (gw.arch.geo_feats > 0) r.geo = ad::slice_cols(out, 1, gw.arch.geo_feats);
  std::vector<ad::var<Real>> comps = {ad::slice_rows(gs, 0, s_rows),
                                      ad::slice_rows(gs, s_rows, s_rows),
                                      ad::slice_rows(gs, 2 * s_rows, s_rows)};
  r.grad = ad::concat_cols(comps);
  return r;
}

}  // namespace voltran
