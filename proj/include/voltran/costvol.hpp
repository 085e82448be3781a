#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "voltran/core/ops_nn.hpp"
#include "voltran/core/optim.hpp"
#include "voltran/featnet.hpp"
#include "voltran/scenes.hpp"

// Neural encoding volume: project voxel-grid vertices into every view,
// bilinearly gather per-view 2D features, fuse across views by masked
// population variance, regularize with a small dense 3D encoder-decoder,
// and expose trilinear sampling.
//
// Vertex flattening follows the library grid convention: row (z*Ry + y)*Rx + x.
namespace voltran {

struct voxel_grid {
  int64_t rx = 32, ry = 32, rz = 32;
  std::array<double, 3> lo{-1.0, -1.0, -1.0};
  std::array<double, 3> hi{1.0, 1.0, 1.0};

  void validate() const {
    VT_CHECK(rx >= 2 && ry >= 2 && rz >= 2, "voxel_grid: resolution must be >= 2 per axis");
    for (int a = 0; a < 3; ++a)
      VT_CHECK(hi[a] > lo[a], "voxel_grid: degenerate bounds on axis ", a);
  }
  int64_t vertex_count() const { return rx * ry * rz; }

  template <typename Real>
  tensor<Real> vertex_positions() const {
    validate();
    tensor<Real> p(vertex_count(), 3);
    double sx = (hi[0] - lo[0]) / double(rx - 1), sy = (hi[1] - lo[1]) / double(ry - 1),
           sz = (hi[2] - lo[2]) / double(rz - 1);
    int64_t r = 0;
    for (int64_t z = 0; z < rz; ++z)
      for (int64_t y = 0; y < ry; ++y)
        for (int64_t x = 0; x < rx; ++x, ++r) {
          p(r, 0) = static_cast<Real>(lo[0] + sx * double(x));
          p(r, 1) = static_cast<Real>(lo[1] + sy * double(y));
          p(r, 2) = static_cast<Real>(lo[2] + sz * double(z));
        }
    return p;
  }
};

// Per-vertex, per-view gathered features, vertex-major: row g*N + i.
// Invalid projections hold zero features.
template <typename Real>
struct warped_samples {
  ad::var<Real> features;  // (G*N) x C
  std::shared_ptr<const std::vector<uint8_t>> validity;
  int64_t n_views = 0;
};

// Projects every grid vertex into every view and bilinearly samples the
// feature maps at (u, v)/stride. Validity uses full-resolution image bounds:
// depth > 0 and 0 <= u < width, 0 <= v < height.
template <typename Real>
warped_samples<Real> warp_features(const std::vector<feat_map<Real>>& featmaps,
                                   const std::vector<camera_pose>& poses, const voxel_grid& grid,
                                   int64_t stride) {
  VT_CHECK(featmaps.size() == poses.size(), "warp_features: featmaps/poses count mismatch: ",
           featmaps.size(), " vs ", poses.size());
  VT_CHECK(!featmaps.empty(), "warp_features: need at least one view");
  int64_t n = static_cast<int64_t>(featmaps.size());
  int64_t hf = featmaps[0].h, wf = featmaps[0].w;
  std::vector<ad::var<Real>> maps;
  for (const auto& fm : featmaps) {
    VT_CHECK(fm.h == hf && fm.w == wf, "warp_features: feature map sizes differ");
    maps.push_back(fm.map);
  }
  auto stack = n == 1 ? maps[0] : ad::concat_rows(maps);

  tensor<Real> verts = grid.vertex_positions<Real>();
  int64_t g = verts.rows;
  auto queries = std::make_shared<std::vector<ad::gather2d_query<Real>>>();
  queries->reserve(static_cast<size_t>(g * n));
  auto validity = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(g * n));
  for (int64_t v = 0; v < g; ++v) {
    Eigen::Vector3d p(verts(v, 0), verts(v, 1), verts(v, 2));
    for (int64_t i = 0; i < n; ++i) {
      auto pr = poses[static_cast<size_t>(i)].project(p);
      (*validity)[static_cast<size_t>(v * n + i)] = pr.valid ? 1 : 0;
      queries->push_back({i, static_cast<Real>(pr.u / double(stride)),
                          static_cast<Real>(pr.v / double(stride)), pr.valid ? uint8_t(1) : uint8_t(0)});
    }
  }
  auto feats = ad::bilinear_gather(stack, hf, wf, std::shared_ptr<const std::vector<ad::gather2d_query<Real>>>(queries));
  return {feats, std::shared_ptr<const std::vector<uint8_t>>(validity), n};
}

// Masked population variance across views -> raw cost volume (G x C).
// Exactly permutation-invariant over views; identical views give exactly zero.
template <typename Real>
ad::var<Real> variance_fuse(const warped_samples<Real>& ws) {
  return ad::masked_variance_groups(ws.features, ws.validity, ws.n_views);
}

// Dense 3D encoder-decoder with skip connections: two stride-2 levels down,
// 1x1 decoders with lateral skips back up. Downsampling factor 4.
template <typename Real>
struct cost_regularizer {
  static constexpr int64_t downsample_factor = 4;
  int64_t c_in, c_out;
  ad::var<Real> w_in, b_in;    // 1x1 compress c_in -> 8
  ad::var<Real> w_e1, b_e1;    // 3x3x3 stride 2, 8 -> 16
  ad::var<Real> w_e2, b_e2;    // 3x3x3 stride 2, 16 -> 32
  ad::var<Real> w_d1, b_d1;    // 1x1 decode 32 -> 16 (+ skip from e1)
  ad::var<Real> w_s1, b_s1;    // 1x1 skip lateral 16 -> 16
  ad::var<Real> w_d0, b_d0;    // 1x1 decode 16 -> c_out (+ skip from input level)
  ad::var<Real> w_s0, b_s0;    // 1x1 skip lateral 8 -> c_out

  cost_regularizer(ad::param_store<Real>& ps, const std::string& prefix, int64_t c_in_,
                   int64_t c_out_, rng_stream& rs)
      : c_in(c_in_), c_out(c_out_) {
    auto conv = [&](const char* name, int64_t cout, int64_t k, int64_t cin, ad::var<Real>& w,
                    ad::var<Real>& b) {
      tensor<Real> wt(cout, k * k * k * cin);
      Real std = std::sqrt(Real(2) / Real(k * k * k * cin));
      for (int64_t i = 0; i < wt.rows; ++i)
        for (int64_t j = 0; j < wt.cols; ++j) wt(i, j) = static_cast<Real>(rs.normal(0.0, std));
      w = ps.add(prefix + "." + name + ".w", std::move(wt));
      b = ps.add(prefix + "." + name + ".b", tensor<Real>(1, cout));
    };
    conv("in", 8, 1, c_in, w_in, b_in);
    conv("e1", 16, 3, 8, w_e1, b_e1);
    conv("e2", 32, 3, 16, w_e2, b_e2);
    conv("d1", 16, 1, 32, w_d1, b_d1);
    conv("s1", 16, 1, 16, w_s1, b_s1);
    conv("d0", c_out, 1, 16, w_d0, b_d0);
    conv("s0", c_out, 1, 8, w_s0, b_s0);
  }

  // raw (G x c_in) -> encoding volume (G x c_out)
  ad::var<Real> apply(const ad::var<Real>& raw, const voxel_grid& grid) const {
    VT_CHECK(raw->val.cols == c_in, "regularize: raw cost channels ", raw->val.cols,
             " != configured ", c_in);
    VT_CHECK(raw->val.rows == grid.vertex_count(), "regularize: raw cost rows != grid vertices");
    VT_CHECK(grid.rx % downsample_factor == 0 && grid.ry % downsample_factor == 0 &&
                 grid.rz % downsample_factor == 0,
             "regularize: resolution must be divisible by ", downsample_factor);
    int64_t x0 = grid.rx, y0 = grid.ry, z0 = grid.rz;
    int64_t x1 = x0 / 2, y1 = y0 / 2, z1 = z0 / 2;
    int64_t x2 = x0 / 4, y2 = y0 / 4, z2 = z0 / 4;
    auto c0 = ad::relu(ad::conv3d(raw, w_in, b_in, x0, y0, z0, 1));
    auto e1 = ad::relu(ad::conv3d(c0, w_e1, b_e1, x0, y0, z0, 3, 2));
    auto e2 = ad::relu(ad::conv3d(e1, w_e2, b_e2, x1, y1, z1, 3, 2));
    auto u1 = ad::upsample3d_nearest(e2, x2, y2, z2, x1, y1, z1);
    auto d1 = ad::relu(ad::add(ad::conv3d(u1, w_d1, b_d1, x1, y1, z1, 1),
                               ad::conv3d(e1, w_s1, b_s1, x1, y1, z1, 1)));
    auto u0 = ad::upsample3d_nearest(d1, x1, y1, z1, x0, y0, z0);
    return ad::add(ad::conv3d(u0, w_d0, b_d0, x0, y0, z0, 1),
                   ad::conv3d(c0, w_s0, b_s0, x0, y0, z0, 1));
  }
};

// Trilinear sample of the encoding volume at arbitrary points (clamped to the
// grid bounds; `inside` flags report which points needed no clamping).
template <typename Real>
ad::var<Real> sample_volume(const ad::var<Real>& vol, const voxel_grid& grid,
                            const ad::var<Real>& pts, std::vector<uint8_t>* inside = nullptr) {
  VT_CHECK(vol->val.rows == grid.vertex_count(), "sample_volume: volume rows != grid vertices");
  std::array<Real, 3> lo{static_cast<Real>(grid.lo[0]), static_cast<Real>(grid.lo[1]),
                         static_cast<Real>(grid.lo[2])};
  std::array<Real, 3> hi{static_cast<Real>(grid.hi[0]), static_cast<Real>(grid.hi[1]),
                         static_cast<Real>(grid.hi[2])};
  return ad::trilinear_gather(vol, grid.rx, grid.ry, grid.rz, lo, hi, pts, inside);
}

}  // namespace voltran
