// Finite-difference checks for every tape op, double precision.
#include <catch2/catch_amalgamated.hpp>

#include "gradcheck.hpp"
#include "voltran/core/ops.hpp"
#include "voltran/core/ops_nn.hpp"
#include "voltran/core/optim.hpp"

using namespace voltran;
namespace ad = voltran::ad;
using vd = ad::var<double>;

TEST_CASE("grad: elementwise binary ops") {
  rng_stream rs(11);
  auto a = rand_leaf(rs, 3, 4), b = rand_leaf(rs, 3, 4, 0.5);
  gradcheck([&] { return project_scalar(ad::add(a, b), 1); }, {a, b});
  gradcheck([&] { return project_scalar(ad::sub(a, b), 2); }, {a, b});
  gradcheck([&] { return project_scalar(ad::mul(a, b), 3); }, {a, b});
  gradcheck([&] { return project_scalar(ad::div(a, b), 4); }, {a, b});
}

TEST_CASE("grad: affine, mul_const, scalar var") {
  rng_stream rs(12);
  auto a = rand_leaf(rs, 2, 5);
  auto s = rand_leaf(rs, 1, 1);
  tensor<double> k(2, 5);
  for (auto& x : k.v) x = rs.uniform(-1, 1);
  gradcheck([&] { return project_scalar(ad::affine(a, 1.7, -0.3), 5); }, {a});
  gradcheck([&, k] { return project_scalar(ad::mul_const(a, k), 6); }, {a});
  gradcheck([&] { return project_scalar(ad::mul_scalar_var(a, s), 7); }, {a, s});
}

TEST_CASE("grad: nonlinearities") {
  rng_stream rs(13);
  auto a = rand_leaf(rs, 3, 3, 0.05);
  gradcheck([&] { return project_scalar(ad::relu(a), 8); }, {a});
  gradcheck([&] { return project_scalar(ad::sigmoid(a), 9); }, {a});
  gradcheck([&] { return project_scalar(ad::log_sigmoid(a), 10); }, {a});
  gradcheck([&] { return project_scalar(ad::softplus(a, 100.0), 11); }, {a}, 1e-7, 1e-6, 1e-3);
  gradcheck([&] { return project_scalar(ad::softplus(a, 1.0), 12); }, {a});
  gradcheck([&] { return project_scalar(ad::exp_(a), 13); }, {a});
  gradcheck([&] { return project_scalar(ad::square(a), 14); }, {a});
  gradcheck([&] { return project_scalar(ad::abs_(a), 15); }, {a});
  gradcheck([&] { return project_scalar(ad::clamp_max(a, 0.4), 16); }, {a});

  // positive inputs for sqrt
  tensor<double> p(3, 3);
  for (auto& x : p.v) x = rs.uniform(0.3, 1.5);
  auto pp = ad::make_leaf(std::move(p));
  gradcheck([&] { return project_scalar(ad::sqrt_safe(pp), 17); }, {pp});
}

TEST_CASE("nonlinearity values are stable in the tails") {
  auto x = ad::make_leaf(tensor<double>::from({-500.0, 500.0, 0.0}, 3, 1));
  auto sg = ad::sigmoid(x);
  CHECK(sg->val(0, 0) == Catch::Approx(0.0).margin(1e-200));
  CHECK(sg->val(1, 0) == Catch::Approx(1.0));
  CHECK(sg->val(2, 0) == Catch::Approx(0.5));
  auto ls = ad::log_sigmoid(x);
  CHECK(ls->val(0, 0) == Catch::Approx(-500.0));
  CHECK(ls->val(1, 0) == Catch::Approx(0.0).margin(1e-200));
  CHECK(std::isfinite(ad::softplus(x, 100.0)->val(1, 0)));
  CHECK(ad::softplus(x, 100.0)->val(1, 0) == Catch::Approx(500.0));
}

TEST_CASE("grad: matmul family") {
  rng_stream rs(14);
  auto a = rand_leaf(rs, 3, 4), b = rand_leaf(rs, 4, 2), bt = rand_leaf(rs, 2, 4);
  auto w = rand_leaf(rs, 5, 4), bias = rand_leaf(rs, 1, 5);
  gradcheck([&] { return project_scalar(ad::matmul(a, b), 18); }, {a, b});
  gradcheck([&] { return project_scalar(ad::matmul_nt(a, bt), 19); }, {a, bt});
  gradcheck([&] { return project_scalar(ad::linear(a, w, bias), 20); }, {a, w, bias});
}

TEST_CASE("grad: broadcasts and reductions") {
  rng_stream rs(15);
  auto x = rand_leaf(rs, 4, 3);
  auto rv = rand_leaf(rs, 1, 3);
  auto cv = rand_leaf(rs, 4, 1);
  gradcheck([&] { return project_scalar(ad::add_rowvec(x, rv), 21); }, {x, rv});
  gradcheck([&] { return project_scalar(ad::add_colbroadcast(x, cv), 22); }, {x, cv});
  gradcheck([&] { return ad::sum_all(x); }, {x});
  gradcheck([&] { return ad::mean_all(x); }, {x});
  gradcheck([&] { return project_scalar(ad::row_sum(x), 23); }, {x});
  gradcheck([&] { return project_scalar(ad::mean_rows(x), 24); }, {x});
}

TEST_CASE("grad: shape ops") {
  rng_stream rs(16);
  auto a = rand_leaf(rs, 4, 3), b = rand_leaf(rs, 4, 2), c = rand_leaf(rs, 2, 3);
  gradcheck([&] { return project_scalar(ad::reshape(a, 2, 6), 25); }, {a});
  gradcheck([&] { return project_scalar(ad::concat_cols<double>({a, b}), 26); }, {a, b});
  gradcheck([&] { return project_scalar(ad::concat_rows<double>({a, c}), 27); }, {a, c});
  gradcheck([&] { return project_scalar(ad::slice_cols(a, 1, 2), 28); }, {a});
  gradcheck([&] { return project_scalar(ad::slice_rows(a, 1, 2), 29); }, {a});
  gradcheck([&] { return project_scalar(ad::pad_cols(a, 5), 30); }, {a});
  gradcheck([&] { return project_scalar(ad::strided_rows(a, 1, 2), 31); }, {a});
  gradcheck([&] { return project_scalar(ad::repeat_interleave_rows(a, 3), 32); }, {a});
  gradcheck([&] { return project_scalar(ad::tile_rows(a, 3), 33); }, {a});
}

TEST_CASE("grad: layer_norm") {
  rng_stream rs(17);
  auto x = rand_leaf(rs, 3, 6);
  auto g = rand_leaf(rs, 1, 6), b = rand_leaf(rs, 1, 6);
  gradcheck([&] { return project_scalar(ad::layer_norm(x, g, b), 34); }, {x, g, b}, 1e-6, 1e-7,
            1e-4);
}

TEST_CASE("grad+values: masked softmax") {
  rng_stream rs(18);
  auto x = rand_leaf(rs, 3, 4);
  auto mask = std::make_shared<std::vector<uint8_t>>(std::vector<uint8_t>{
      1, 1, 1, 1,  //
      1, 0, 1, 0,  //
      0, 0, 0, 0,  //
  });
  auto y = ad::softmax_rows_masked(x, mask);
  CHECK(y->val.m().row(0).sum() == Catch::Approx(1.0));
  CHECK(y->val.m().row(1).sum() == Catch::Approx(1.0));
  CHECK(y->val(1, 1) == 0.0);
  CHECK(y->val(1, 3) == 0.0);
  CHECK(y->val.m().row(2).norm() == 0.0);
  gradcheck([&] { return project_scalar(ad::softmax_rows_masked(x, mask), 35); }, {x});
}

TEST_CASE("grad: conv2d") {
  rng_stream rs(19);
  // k=3 stride 1
  auto x = rand_leaf(rs, 4 * 5, 2);
  auto w = rand_leaf(rs, 3, 9 * 2), b = rand_leaf(rs, 1, 3);
  gradcheck([&] { return project_scalar(ad::conv2d(x, w, b, 4, 5, 3, 1), 36); }, {x, w, b});
  // k=3 stride 2, odd dims
  auto w2 = rand_leaf(rs, 2, 9 * 2), b2 = rand_leaf(rs, 1, 2);
  auto x2 = rand_leaf(rs, 5 * 7, 2);
  gradcheck([&] { return project_scalar(ad::conv2d(x2, w2, b2, 5, 7, 3, 2), 37); }, {x2, w2, b2});
  // k=1: channel mix only
  auto w1 = rand_leaf(rs, 4, 2), b1 = rand_leaf(rs, 1, 4);
  gradcheck([&] { return project_scalar(ad::conv2d(x, w1, b1, 4, 5, 1, 1), 38); }, {x, w1, b1});
}

TEST_CASE("conv2d identity kernel reproduces input") {
  rng_stream rs(20);
  auto x = rand_leaf(rs, 3 * 3, 2);
  tensor<double> w(2, 2);
  w(0, 0) = 1;
  w(1, 1) = 1;
  auto y = ad::conv2d(x, ad::make_const(std::move(w)), ad::make_const(tensor<double>(1, 2)), 3, 3,
                      1, 1);
  CHECK((y->val.m() - x->val.m()).norm() == 0.0);
}

TEST_CASE("grad: conv3d") {
  rng_stream rs(21);
  auto x = rand_leaf(rs, 3 * 4 * 5, 2);
  auto w = rand_leaf(rs, 2, 27 * 2), b = rand_leaf(rs, 1, 2);
  gradcheck([&] { return project_scalar(ad::conv3d(x, w, b, 3, 4, 5, 3), 39); }, {x, w, b});
  auto w1 = rand_leaf(rs, 3, 2), b1 = rand_leaf(rs, 1, 3);
  gradcheck([&] { return project_scalar(ad::conv3d(x, w1, b1, 3, 4, 5, 1), 40); }, {x, w1, b1});
}

TEST_CASE("grad: conv3d stride 2 and upsample3d") {
  rng_stream rs(51);
  auto x = rand_leaf(rs, 4 * 4 * 4, 2);
  auto w = rand_leaf(rs, 3, 27 * 2), b = rand_leaf(rs, 1, 3);
  auto y = ad::conv3d(x, w, b, 4, 4, 4, 3, 2);
  REQUIRE(y->val.rows == 2 * 2 * 2);
  gradcheck([&] { return project_scalar(ad::conv3d(x, w, b, 4, 4, 4, 3, 2), 52); }, {x, w, b});

  auto x5 = rand_leaf(rs, 5 * 4 * 3, 2);  // odd extents: ceil division
  auto y5 = ad::conv3d(x5, w, b, 5, 4, 3, 3, 2);
  REQUIRE(y5->val.rows == 3 * 2 * 2);
  gradcheck([&] { return project_scalar(ad::conv3d(x5, w, b, 5, 4, 3, 3, 2), 53); }, {x5, w, b});

  auto u = rand_leaf(rs, 2 * 2 * 2, 2);
  auto up = ad::upsample3d_nearest(u, 2, 2, 2, 4, 4, 4);
  REQUIRE(up->val.rows == 64);
  CHECK(up->val.m().row((0 * 4 + 0) * 4 + 1) == u->val.m().row(0));
  CHECK(up->val.m().row((3 * 4 + 3) * 4 + 3) == u->val.m().row(7));
  gradcheck([&] { return project_scalar(ad::upsample3d_nearest(u, 2, 2, 2, 4, 4, 4), 54); }, {u});
  gradcheck([&] { return project_scalar(ad::upsample3d_nearest(u, 2, 2, 2, 3, 4, 3), 55); }, {u});
}

TEST_CASE("grad+values: masked variance over groups") {
  // spec'd example shape: two valid views with values 0 and 2 -> variance 1.
  auto x = ad::make_leaf(tensor<double>::from({0.0, 2.0, 7.0}, 3, 1));
  auto valid = std::make_shared<const std::vector<uint8_t>>(std::vector<uint8_t>{1, 1, 0});
  auto v = ad::masked_variance_groups(x, valid, 3);
  REQUIRE(v->val.rows == 1);
  CHECK(v->val(0, 0) == 1.0);

  rng_stream rs(56);
  auto x2 = rand_leaf(rs, 4 * 3, 2);  // 4 groups of 3
  auto valid2 = std::make_shared<const std::vector<uint8_t>>(
      std::vector<uint8_t>{1, 1, 1, 1, 1, 0, 1, 0, 0, 0, 0, 0});
  auto v2 = ad::masked_variance_groups(x2, valid2, 3);
  CHECK(v2->val.m().row(2).norm() == 0.0);  // one valid member
  CHECK(v2->val.m().row(3).norm() == 0.0);  // none valid
  gradcheck([&] { return project_scalar(ad::masked_variance_groups(x2, valid2, 3), 57); }, {x2});

  // identical members -> exactly zero, even for awkward float values
  auto x3 = ad::make_leaf(tensor<double>::full(3, 2, 0.1 + 1.0 / 3.0));
  auto all = std::make_shared<const std::vector<uint8_t>>(std::vector<uint8_t>{1, 1, 1});
  CHECK(ad::masked_variance_groups(x3, all, 3)->val.m().norm() == 0.0);
}

TEST_CASE("masked variance is exactly permutation invariant (float)") {
  rng_stream rs(58);
  int64_t nn = 7, c = 3;
  tensor<float> base(nn, c);
  std::vector<uint8_t> valid(nn);
  for (int64_t i = 0; i < nn; ++i) {
    valid[i] = rs.uniform(0.0, 1.0) < 0.8 ? 1 : 0;
    for (int64_t j = 0; j < c; ++j) base(i, j) = static_cast<float>(rs.normal(0.0, 3.0));
  }
  auto ref = ad::masked_variance_groups(ad::make_const(tensor<float>(base)),
                                        std::make_shared<const std::vector<uint8_t>>(valid), nn);
  std::vector<int64_t> perm(nn);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 pg(99);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(perm.begin(), perm.end(), pg);
    tensor<float> px(nn, c);
    std::vector<uint8_t> pv(nn);
    for (int64_t i = 0; i < nn; ++i) {
      px.m().row(i) = base.m().row(perm[i]);
      pv[i] = valid[perm[i]];
    }
    auto got = ad::masked_variance_groups(ad::make_const(std::move(px)),
                                          std::make_shared<const std::vector<uint8_t>>(pv), nn);
    REQUIRE(got->val.m() == ref->val.m());  // bitwise
  }
}

TEST_CASE("grad: upsample2d nearest with odd crop") {
  rng_stream rs(22);
  auto x = rand_leaf(rs, 3 * 4, 2);
  gradcheck([&] { return project_scalar(ad::upsample2d_nearest(x, 3, 4, 6, 8), 41); }, {x});
  gradcheck([&] { return project_scalar(ad::upsample2d_nearest(x, 3, 4, 5, 7), 42); }, {x});
}

TEST_CASE("grad: bilinear gather with clamping and invalid rows") {
  rng_stream rs(23);
  auto stack = rand_leaf(rs, 2 * 3 * 4, 2);  // 2 views, 3x4 maps
  auto qs = std::make_shared<std::vector<ad::gather2d_query<double>>>();
  qs->push_back({0, 1.3, 0.7, 1});
  qs->push_back({1, -0.5, 2.9, 1});   // clamps left/bottom
  qs->push_back({1, 3.0, 2.0, 1});    // exact far corner
  qs->push_back({0, 2.0, 1.0, 0});    // invalid: zero row, no grad
  std::shared_ptr<const std::vector<ad::gather2d_query<double>>> cqs = qs;
  auto y = ad::bilinear_gather(stack, 3, 4, cqs);
  CHECK(y->val.m().row(3).norm() == 0.0);
  CHECK(y->val.m().row(2) == stack->val.m().row(1 * 12 + 2 * 4 + 3));
  gradcheck([&] { return project_scalar(ad::bilinear_gather(stack, 3, 4, cqs), 43); }, {stack});
}

TEST_CASE("grad: trilinear gather w.r.t. volume and points") {
  rng_stream rs(24);
  auto vol = rand_leaf(rs, 3 * 4 * 5, 2);
  tensor<double> p = tensor<double>::from(
      {
          0.23, -0.41, 0.11,   //
          -0.77, 0.52, -0.33,  //
          1.50, 0.10, 0.20,    // x outside: clamped, no coord grad on x
      },
      3, 3);
  auto pts = ad::make_leaf(std::move(p));
  std::array<double, 3> lo{-1, -1, -1}, hi{1, 1, 1};
  std::vector<uint8_t> inside;
  auto y = ad::trilinear_gather(vol, 3, 4, 5, lo, hi, pts, &inside);
  CHECK(inside == std::vector<uint8_t>({1, 1, 0}));
  gradcheck([&] { return project_scalar(ad::trilinear_gather(vol, 3, 4, 5, lo, hi, pts), 44); },
            {vol, pts});
}

TEST_CASE("trilinear gather at grid vertices returns stored values") {
  // 2x2x2 grid over [0,1]^3: corners map to rows exactly.
  tensor<double> vol(8, 1);
  for (int i = 0; i < 8; ++i) vol(i, 0) = 10.0 + i;
  auto v = ad::make_const(std::move(vol));
  auto pts = ad::make_const(tensor<double>::from({0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 1}, 4, 3));
  std::array<double, 3> lo{0, 0, 0}, hi{1, 1, 1};
  auto y = ad::trilinear_gather(v, 2, 2, 2, lo, hi, pts);
  CHECK(y->val(0, 0) == 10.0);  // row (z*2+y)*2+x = 0
  CHECK(y->val(1, 0) == 11.0);  // x=1 -> row 1
  CHECK(y->val(2, 0) == 12.0);  // y=1 -> row 2
  CHECK(y->val(3, 0) == 17.0);  // (1,1,1) -> row 7
}

TEST_CASE("grad+values: batched attention with invalid keys") {
  rng_stream rs(25);
  int64_t t = 3, h = 2, dh = 2, s = 2;
  auto q = rand_leaf(rs, s * t, h * dh), k = rand_leaf(rs, s * t, h * dh),
       v = rand_leaf(rs, s * t, h * dh);
  auto valid =
      std::make_shared<const std::vector<uint8_t>>(std::vector<uint8_t>{1, 1, 0, 1, 1, 1});
  gradcheck([&] { return project_scalar(ad::batched_attention(q, k, v, valid, t, h), 45); },
            {q, k, v});

  // manual 1-sample, 1-head, dh=1 reference
  auto q1 = ad::make_leaf(tensor<double>::from({1.0, 2.0}, 2, 1));
  auto k1 = ad::make_leaf(tensor<double>::from({0.5, -1.0}, 2, 1));
  auto v1 = ad::make_leaf(tensor<double>::from({2.0, 3.0}, 2, 1));
  auto ok = std::make_shared<const std::vector<uint8_t>>(std::vector<uint8_t>{1, 1});
  auto out = ad::batched_attention(q1, k1, v1, ok, 2, 1);
  double p00 = std::exp(0.5) / (std::exp(0.5) + std::exp(-1.0));
  double p10 = std::exp(1.0) / (std::exp(1.0) + std::exp(-2.0));
  CHECK(out->val(0, 0) == Catch::Approx(p00 * 2.0 + (1 - p00) * 3.0).epsilon(1e-12));
  CHECK(out->val(1, 0) == Catch::Approx(p10 * 2.0 + (1 - p10) * 3.0).epsilon(1e-12));

  // masking key 1 collapses every row to v[0]
  auto m0 = std::make_shared<const std::vector<uint8_t>>(std::vector<uint8_t>{1, 0});
  auto out2 = ad::batched_attention(q1, k1, v1, m0, 2, 1);
  CHECK(out2->val(0, 0) == Catch::Approx(2.0));
  CHECK(out2->val(1, 0) == Catch::Approx(2.0));
}

TEST_CASE("grad: grouped ops") {
  rng_stream rs(26);
  auto w = rand_leaf(rs, 3, 4);
  auto vals = rand_leaf(rs, 12, 2);
  gradcheck([&] { return project_scalar(ad::group_weighted_sum(w, vals), 46); }, {w, vals});

  auto x = rand_leaf(rs, 6, 2);
  auto valid =
      std::make_shared<const std::vector<uint8_t>>(std::vector<uint8_t>{1, 0, 1, 0, 0, 0});
  auto y = ad::masked_mean_groups(x, valid, 3);
  CHECK(y->val.m().row(0) == ((x->val.m().row(0) + x->val.m().row(2)) * 0.5));
  CHECK(y->val.m().row(1).norm() == 0.0);
  gradcheck([&] { return project_scalar(ad::masked_mean_groups(x, valid, 3), 47); }, {x});
}

TEST_CASE("grad+values: exclusive row cumprod (zeros included)") {
  auto u = ad::make_leaf(tensor<double>::from({0.5, 0.0, 3.0, 2.0, 1.0, -1.0}, 2, 3));
  auto t = ad::exclusive_cumprod_rows(u);
  CHECK(t->val(0, 0) == 1.0);
  CHECK(t->val(0, 1) == 0.5);
  CHECK(t->val(0, 2) == 0.0);
  CHECK(t->val(1, 0) == 1.0);
  CHECK(t->val(1, 1) == 2.0);
  CHECK(t->val(1, 2) == 2.0);
  gradcheck([&] { return project_scalar(ad::exclusive_cumprod_rows(u), 48); }, {u});

  rng_stream rs(27);
  auto u2 = rand_leaf(rs, 3, 6);
  gradcheck([&] { return project_scalar(ad::exclusive_cumprod_rows(u2), 49); }, {u2});
}

TEST_CASE("values: group weighted sum hand case") {
  // two groups of three rows, hand-checkable weights
  auto x = ad::make_leaf(tensor<double>::from({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}, 6, 2));
  auto w = ad::make_leaf(tensor<double>::from({1.0, 0.0, 0.5, 0.0, 2.0, 0.0}, 2, 3));
  auto y = ad::group_weighted_sum(w, x);
  CHECK(y->val(0, 0) == 1.0 + 0.5 * 5.0);
  CHECK(y->val(0, 1) == 2.0 + 0.5 * 6.0);
  CHECK(y->val(1, 0) == 2.0 * 9.0);
  CHECK(y->val(1, 1) == 2.0 * 10.0);
}

TEST_CASE("grad+values: linear_exact matches linear") {
  rng_stream rs(30);
  auto x = rand_leaf(rs, 7, 4);
  auto w = rand_leaf(rs, 5, 4);
  auto b = rand_leaf(rs, 1, 5);
  auto a = ad::linear(x, w, b);
  auto e = ad::linear_exact(x, w, b);
  CHECK((a->val.m() - e->val.m()).cwiseAbs().maxCoeff() < 1e-12);
  gradcheck([&] { return project_scalar(ad::linear_exact(x, w, b), 52); }, {x, w, b});
}

TEST_CASE("grad: fan-in accumulation through shared subexpressions") {
  rng_stream rs(28);
  auto x = rand_leaf(rs, 2, 3);
  gradcheck(
      [&] {
        auto sq = ad::square(x);
        auto y = ad::add(ad::mul(sq, x), sq);  // x used by three paths
        return project_scalar(y, 50);
      },
      {x});
}

TEST_CASE("grad: small end-to-end block (linear -> LN -> attention -> softplus)") {
  rng_stream rs(29);
  int64_t t = 3, h = 2, dh = 2, s = 2, d = h * dh;
  auto x = rand_leaf(rs, s * t, 5);
  auto wq = rand_leaf(rs, d, 5), wk = rand_leaf(rs, d, 5), wv = rand_leaf(rs, d, 5);
  auto bq = rand_leaf(rs, 1, d), bk = rand_leaf(rs, 1, d), bv = rand_leaf(rs, 1, d);
  auto g = rand_leaf(rs, 1, 5), be = rand_leaf(rs, 1, 5);
  auto valid =
      std::make_shared<const std::vector<uint8_t>>(std::vector<uint8_t>{1, 0, 1, 1, 1, 1});
  gradcheck(
      [&] {
        auto xn = ad::layer_norm(x, g, be);
        auto at = ad::batched_attention(ad::linear(xn, wq, bq), ad::linear(xn, wk, bk),
                                        ad::linear(xn, wv, bv), valid, t, h);
        return ad::mean_all(ad::softplus(at, 1.0));
      },
      {x, wq, wk, wv, bq, bk, bv, g, be}, 1e-6, 1e-7, 1e-4);
}

TEST_CASE("attention and masked softmax are exactly permutation equivariant (float)") {
  rng_stream rs(60);
  int64_t t = 6, h = 2, dh = 3, d = h * dh;
  tensor<float> q(t, d), k(t, d), v(t, d), lg(1, t);
  std::vector<uint8_t> valid(t, 1);
  valid[4] = 0;
  for (int64_t i = 0; i < t; ++i) {
    lg(0, i) = static_cast<float>(rs.normal(0.0, 2.0));
    for (int64_t j = 0; j < d; ++j) {
      q(i, j) = static_cast<float>(rs.normal(0.0, 1.0));
      k(i, j) = static_cast<float>(rs.normal(0.0, 1.0));
      v(i, j) = static_cast<float>(rs.normal(0.0, 1.0));
    }
  }
  auto ref = ad::batched_attention(ad::make_const(tensor<float>(q)), ad::make_const(tensor<float>(k)),
                                   ad::make_const(tensor<float>(v)),
                                   std::make_shared<const std::vector<uint8_t>>(valid), t, h);
  auto smref = ad::softmax_rows_masked(
      ad::make_const(tensor<float>(lg)),
      std::make_shared<std::vector<uint8_t>>(valid));

  std::vector<int64_t> perm(t);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 pg(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(perm.begin(), perm.end(), pg);
    tensor<float> pq(t, d), pk(t, d), pv(t, d), plg(1, t);
    std::vector<uint8_t> pvalid(t);
    for (int64_t i = 0; i < t; ++i) {
      pq.m().row(i) = q.m().row(perm[i]);
      pk.m().row(i) = k.m().row(perm[i]);
      pv.m().row(i) = v.m().row(perm[i]);
      plg(0, i) = lg(0, perm[i]);
      pvalid[i] = valid[perm[i]];
    }
    auto got = ad::batched_attention(ad::make_const(std::move(pq)), ad::make_const(std::move(pk)),
                                     ad::make_const(std::move(pv)),
                                     std::make_shared<const std::vector<uint8_t>>(pvalid), t, h);
    auto smgot = ad::softmax_rows_masked(ad::make_const(std::move(plg)),
                                         std::make_shared<std::vector<uint8_t>>(pvalid));
    for (int64_t i = 0; i < t; ++i) {
      REQUIRE(got->val.m().row(i) == ref->val.m().row(perm[i]));  // bitwise
      REQUIRE(smgot->val(0, i) == smref->val(0, perm[i]));
    }
  }
}

TEST_CASE("adam updates match a hand-stepped reference") {
  ad::param_store<double> ps;
  auto p = ps.add("p", tensor<double>::from({1.0, -2.0}, 1, 2));
  ad::adam<double> opt(ps);

  // two steps of loss = 0.5*sum(p^2), grad = p
  double m0 = 0, v0 = 0, x = 1.0;
  for (int step = 1; step <= 2; ++step) {
    ps.zero_grad();
    auto loss = ad::scale(ad::sum_all(ad::square(p)), 0.5);
    ad::backward(loss);
    opt.step(ps, 0.1);
    double gref = x;
    m0 = 0.9 * m0 + 0.1 * gref;
    v0 = 0.999 * v0 + 0.001 * gref * gref;
    double mh = m0 / (1 - std::pow(0.9, step));
    double vh = v0 / (1 - std::pow(0.999, step));
    x -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    REQUIRE(p->val(0, 0) == Catch::Approx(x).epsilon(1e-12));
  }
}

TEST_CASE("cosine lr schedule endpoints") {
  CHECK(ad::cosine_lr(5e-4, 0, 2000) == Catch::Approx(5e-4));
  CHECK(ad::cosine_lr(5e-4, 1999, 2000) == Catch::Approx(0.0).margin(1e-12));
  CHECK(ad::cosine_lr(5e-4, 1000, 2000) == Catch::Approx(2.5e-4).epsilon(1e-3));
}
