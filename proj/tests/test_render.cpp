#include <catch2/catch_amalgamated.hpp>

#include "gradcheck.hpp"
#include "voltran/render.hpp"

using namespace voltran;

namespace {

camera_pose cam_on_x_axis(int64_t img, double focal) {
  return look_at_origin(vec3(2.0, 0.0, 0.0), img, focal);
}

std::vector<std::array<int64_t, 2>> all_pixels(int64_t img) {
  std::vector<std::array<int64_t, 2>> px;
  for (int64_t y = 0; y < img; ++y)
    for (int64_t x = 0; x < img; ++x) px.push_back({x, y});
  return px;
}

// analytic first intersection of o + t d with the sphere |p| = r, if any
std::optional<double> ray_sphere(const vec3& o, const vec3& d, double r) {
  double ov = o.dot(d), disc = ov * ov - (o.squaredNorm() - r * r);
  if (disc <= 0) return std::nullopt;
  double t = -ov - std::sqrt(disc);
  if (t <= 0) return std::nullopt;
  return t;
}

}  // namespace

TEST_CASE("rays: bounding-sphere interval, stratification, determinism") {
  auto pose = cam_on_x_axis(9, 12.0);
  rng_stream rs(101);
  auto rb = sample_rays<double>(pose, {{4, 4}}, 16, 1.0, rs);

  // center pixel: camera at distance 2 looking at the origin, unit sphere
  REQUIRE(rb.hit[0] == 1);
  REQUIRE(rb.t_near(0, 0) == 1.0);
  REQUIRE(rb.t_far(0, 0) == 3.0);
  REQUIRE(rb.dir(0, 0) == -1.0);
  REQUIRE(rb.dir(0, 1) == 0.0);
  REQUIRE(rb.dir(0, 2) == 0.0);

  // one uniform draw per stratum, strictly increasing
  double dt = 2.0 / 16.0;
  for (int64_t j = 0; j < 16; ++j) {
    CHECK(rb.t(0, j) >= 1.0 + double(j) * dt);
    CHECK(rb.t(0, j) <= 1.0 + double(j + 1) * dt);
    if (j) CHECK(rb.t(0, j) > rb.t(0, j - 1));
  }
  // points lie on the ray
  for (int64_t j = 0; j < 16; ++j) {
    CHECK(rb.points(j, 0) == Catch::Approx(2.0 - rb.t(0, j)).margin(1e-12));
    CHECK(std::abs(rb.points(j, 1)) < 1e-12);
    CHECK(std::abs(rb.points(j, 2)) < 1e-12);
  }

  // same seed -> bitwise identical samples
  rng_stream r1(7), r2(7);
  auto a = sample_rays<double>(pose, all_pixels(9), 8, 1.0, r1);
  auto b = sample_rays<double>(pose, all_pixels(9), 8, 1.0, r2);
  REQUIRE(a.t.m() == b.t.m());
  REQUIRE(a.points.m() == b.points.m());

  // a wide-angle corner ray misses the unit sphere entirely
  auto wide = cam_on_x_axis(9, 3.0);
  rng_stream rw(3);
  auto miss = sample_rays<double>(wide, {{0, 0}}, 4, 1.0, rw);
  REQUIRE(miss.hit[0] == 0);
}

TEST_CASE("sdf_to_alpha: hand cases and range") {
  auto k200 = ad::make_const(tensor<double>::scalar(200.0));

  // constant SDF along the ray: no level-set crossing, alpha exactly zero
  auto sc = ad::make_const(tensor<double>::full(4, 1, 0.3));
  auto ac = sdf_to_alpha(sc, 1, 4, k200);
  for (int64_t j = 0; j < 4; ++j) REQUIRE(ac->val(0, j) == 0.0);

  // hard crossing: + to - with large inv_std -> alpha ~ 1; padded tail 0
  auto sx = ad::make_const(tensor<double>::from({0.5, -0.5}, 2, 1));
  auto ax = sdf_to_alpha(sx, 1, 2, k200);
  CHECK(ax->val(0, 0) > 1.0 - 1e-12);
  REQUIRE(ax->val(0, 1) == 0.0);

  // monotonically increasing SDF: clamped to exactly zero
  auto si = ad::make_const(tensor<double>::from({-0.2, 0.1, 0.4}, 3, 1));
  auto ai = sdf_to_alpha(si, 1, 3, k200);
  for (int64_t j = 0; j < 3; ++j) REQUIRE(ai->val(0, j) == 0.0);

  // random fields stay in [0,1]
  rng_stream rs(55);
  auto k5 = ad::make_const(tensor<double>::scalar(5.0));
  auto sr = rand_leaf(rs, 6 * 12, 1);
  auto ar = sdf_to_alpha(sr, 6, 12, k5);
  for (int64_t i = 0; i < 6; ++i)
    for (int64_t j = 0; j < 12; ++j) {
      CHECK(ar->val(i, j) >= 0.0);
      CHECK(ar->val(i, j) <= 1.0);
    }
}

TEST_CASE("composite: hand examples") {
  // single opaque sample
  auto a1 = ad::make_const(tensor<double>::scalar(1.0));
  auto c1 = ad::make_const(tensor<double>::from({1.0, 0.0, 0.0}, 1, 3));
  auto r1 = composite(a1, c1, tensor<double>::scalar(1.5));
  REQUIRE(r1.color->val(0, 0) == 1.0);
  REQUIRE(r1.color->val(0, 1) == 0.0);
  REQUIRE(r1.color->val(0, 2) == 0.0);
  REQUIRE(r1.depth->val(0, 0) == 1.5);
  REQUIRE(r1.acc->val(0, 0) == 1.0);
  REQUIRE(r1.pixel->val(0, 0) == 1.0);
  REQUIRE(r1.pixel->val(0, 1) == 0.0);

  // hand telescoping: w = (0.5, 0.25)
  auto a2 = ad::make_const(tensor<double>::from({0.5, 0.5}, 1, 2));
  auto c2 = ad::make_const(tensor<double>::from({1, 1, 1, 0, 0, 0}, 2, 3));
  auto r2 = composite(a2, c2, tensor<double>::from({1.0, 2.0}, 1, 2));
  for (int64_t c = 0; c < 3; ++c) REQUIRE(r2.color->val(0, c) == 0.5);
  REQUIRE(r2.depth->val(0, 0) == 1.0);
  REQUIRE(r2.acc->val(0, 0) == 0.75);
  for (int64_t c = 0; c < 3; ++c) REQUIRE(r2.pixel->val(0, c) == 0.75);

  // degenerate ray renders as pure white background
  auto a3 = ad::make_const(tensor<double>::from({0.9, 0.9}, 1, 2));
  auto r3 = composite(a3, c2, tensor<double>::from({1.0, 2.0}, 1, 2), {0});
  REQUIRE(r3.acc->val(0, 0) == 0.0);
  REQUIRE(r3.depth->val(0, 0) == 0.0);
  for (int64_t c = 0; c < 3; ++c) REQUIRE(r3.pixel->val(0, c) == 1.0);
}

TEST_CASE("composite: conservation, monotonicity, depth range, loop oracle") {
  rng_stream rs(56);
  int64_t n = 6, m = 16;
  tensor<double> av(n, m), cv(n * m, 3), tv(n, m);
  for (int64_t i = 0; i < n; ++i) {
    double t0 = rs.uniform(0.5, 1.0);
    for (int64_t j = 0; j < m; ++j) {
      av(i, j) = 1.0 / (1.0 + std::exp(-rs.normal(0.0, 2.0)));
      tv(i, j) = t0 + double(j) * 0.1 + rs.uniform(0.0, 0.09);
      for (int64_t c = 0; c < 3; ++c) cv(i * m + j, c) = rs.uniform(0.0, 1.0);
    }
  }
  auto r = composite(ad::make_const(tensor<double>(av)), ad::make_const(tensor<double>(cv)),
                     tensor<double>(tv));

  for (int64_t i = 0; i < n; ++i) {
    // telescoping: sum_j T_j alpha_j = 1 - prod_j (1 - alpha_j)
    double prod = 1;
    for (int64_t j = 0; j < m; ++j) prod *= 1.0 - av(i, j);
    CHECK(std::abs(r.acc->val(i, 0) - (1.0 - prod)) < 1e-12);
    CHECK(r.acc->val(i, 0) <= 1.0 + 1e-12);

    for (int64_t j = 0; j < m; ++j) {
      CHECK(r.trans->val(i, j) >= 0.0);
      CHECK(r.trans->val(i, j) <= 1.0);
      if (j) CHECK(r.trans->val(i, j) <= r.trans->val(i, j - 1));
    }
    CHECK(r.depth->val(i, 0) >= tv(i, 0) * r.acc->val(i, 0) - 1e-12);
    CHECK(r.depth->val(i, 0) <= tv(i, m - 1) * r.acc->val(i, 0) + 1e-12);

    // scalar prefix-product loop oracle
    double T = 1, acc = 0, D = 0, C[3] = {0, 0, 0};
    for (int64_t j = 0; j < m; ++j) {
      double w = T * av(i, j);
      acc += w;
      D += w * tv(i, j);
      for (int64_t c = 0; c < 3; ++c) C[c] += w * cv(i * m + j, c);
      T *= 1.0 - av(i, j);
    }
    CHECK(std::abs(r.acc->val(i, 0) - acc) < 1e-12);
    CHECK(std::abs(r.depth->val(i, 0) - D) < 1e-12);
    for (int64_t c = 0; c < 3; ++c) CHECK(std::abs(r.color->val(i, c) - C[c]) < 1e-12);
  }
}

TEST_CASE("render_rays: exact-sphere field reproduces analytic depth") {
  auto pose = look_at_origin(vec3(1.3, -1.1, 0.9).normalized() * 2.0, 33, 40.0);
  rng_stream rs(77);
  auto rb = sample_rays<double>(pose, all_pixels(33), 128, 1.0, rs);

  auto field = [&](const ad::var<double>& pts) {
    int64_t nm = pts->val.rows;
    tensor<double> s(nm, 1), col(nm, 3);
    for (int64_t i = 0; i < nm; ++i) {
      s(i, 0) = std::sqrt(pts->val(i, 0) * pts->val(i, 0) + pts->val(i, 1) * pts->val(i, 1) +
                          pts->val(i, 2) * pts->val(i, 2)) -
                0.5;
      col(i, 0) = 0.3;
      col(i, 1) = 0.6;
      col(i, 2) = 0.9;
    }
    return std::pair{ad::make_const(std::move(s)), ad::make_const(std::move(col))};
  };
  auto inv_std = ad::make_const(tensor<double>::scalar(200.0));
  auto out = render_rays(field, rb, inv_std);

  int64_t n_hit = 0, n_bg = 0;
  double err_sum = 0, bound_sum = 0;
  for (int64_t i = 0; i < rb.n; ++i) {
    vec3 o(rb.origin(i, 0), rb.origin(i, 1), rb.origin(i, 2));
    vec3 d(rb.dir(i, 0), rb.dir(i, 1), rb.dir(i, 2));
    CHECK(out.acc->val(i, 0) <= 1.0 + 1e-6);
    auto tstar = ray_sphere(o, d, 0.5);
    double closest = (o - o.dot(d) * d).norm();
    if (tstar && closest < 0.45 && n_hit < 100) {
      ++n_hit;
      err_sum += std::abs(out.depth->val(i, 0) - *tstar);
      bound_sum += 2.0 * (rb.t_far(i, 0) - rb.t_near(i, 0)) / double(rb.m);
      // all view colors equal k => composited color is k * acc
      for (int64_t c = 0; c < 3; ++c)
        CHECK(std::abs(out.color->val(i, c) - (0.3 * double(c + 1)) * out.acc->val(i, 0)) <
              1e-12);
    } else if (rb.hit[i] && closest > 0.55 && n_bg < 100) {
      ++n_bg;  // hits the bounding sphere but clearly misses the object
      CHECK(out.acc->val(i, 0) < 0.01);
    }
  }
  REQUIRE(n_hit == 100);
  REQUIRE(n_bg >= 50);
  CHECK(err_sum / double(n_hit) < bound_sum / double(n_hit));
}

TEST_CASE("grad: renderer path (sdf, colors, inv_std) vs finite differences") {
  rng_stream rs(57);
  int64_t n = 3, m = 6;
  auto s = rand_leaf(rs, n * m, 1);
  s->val.a() *= 0.4;
  auto colors = rand_leaf(rs, n * m, 3);
  tensor<double> k(1, 1);
  k(0, 0) = 4.0;
  auto inv_std = ad::make_leaf(std::move(k));
  tensor<double> tv(n, m);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) tv(i, j) = 1.0 + 0.2 * double(j) + rs.uniform(0.0, 0.15);

  gradcheck(
      [&] {
        auto alpha = sdf_to_alpha(s, n, m, inv_std);
        auto out = composite(alpha, colors, tensor<double>(tv));
        return ad::add(ad::add(project_scalar(out.pixel, 901), project_scalar(out.depth, 902)),
                       project_scalar(out.trans, 903));
      },
      {s, colors, inv_std}, 1e-6, 1e-8, 1e-4);
}
