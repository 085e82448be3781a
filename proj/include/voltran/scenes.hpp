#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "voltran/core/check.hpp"
#include "voltran/core/rng.hpp"
#include "voltran/io/image.hpp"

// Synthetic scene generation: pinhole cameras on a ring, analytic SDF
// scenes (min-union of primitives), a sphere-traced ground-truth renderer,
// and controlled view corruption for robustness ablations.
namespace voltran {

using vec3 = Eigen::Vector3d;
using mat3 = Eigen::Matrix3d;

// ---------------------------------------------------------------------------
// cameras
// ---------------------------------------------------------------------------

// Pinhole camera, world->camera mapping p_cam = R*p + t, pixel = K*p_cam
// with perspective divide. Camera looks down +z of its own frame; pixel y
// grows downward. Continuous pixel coords: integer pixel (ix, iy) has its
// center at (ix + 0.5, iy + 0.5).
struct camera_pose {
  mat3 K = mat3::Identity();
  mat3 R = mat3::Identity();
  vec3 t = vec3::Zero();
  int64_t width = 0, height = 0;

  vec3 center() const { return -R.transpose() * t; }

  struct projection {
    double u = 0, v = 0, depth = 0;
    bool valid = false;
  };

  projection project(const vec3& p) const {
    vec3 pc = R * p + t;
    projection out;
    out.depth = pc.z();
    if (pc.z() <= 0) return out;
    out.u = K(0, 0) * pc.x() / pc.z() + K(0, 2);
    out.v = K(1, 1) * pc.y() / pc.z() + K(1, 2);
    out.valid = out.u >= 0 && out.u < double(width) && out.v >= 0 && out.v < double(height);
    return out;
  }

  struct ray {
    vec3 origin, dir;  // dir is unit length
  };

  // Ray through continuous pixel position (u, v).
  ray ray_at(double u, double v) const {
    vec3 dc((u - K(0, 2)) / K(0, 0), (v - K(1, 2)) / K(1, 1), 1.0);
    ray r;
    r.origin = center();
    r.dir = (R.transpose() * dc).normalized();
    return r;
  }

  void validate() const {
    VT_CHECK((R * R.transpose() - mat3::Identity()).norm() < 1e-6, "camera R not orthonormal");
    VT_CHECK(std::abs(R.determinant() - 1.0) < 1e-6, "camera R determinant != +1");
    VT_CHECK(K(0, 0) > 0 && K(1, 1) > 0, "camera focal lengths must be positive");
    VT_CHECK(K(0, 2) >= 0 && K(0, 2) < double(width), "camera cx outside image");
    VT_CHECK(K(1, 2) >= 0 && K(1, 2) < double(height), "camera cy outside image");
  }
};

// World->camera rotation for a camera at `center` looking at the origin,
// image up aligned with world +z where possible.
inline camera_pose look_at_origin(const vec3& center, int64_t img_size, double focal_px) {
  VT_CHECK(center.norm() > 1e-9, "camera center at origin");
  vec3 z = (-center).normalized();
  vec3 up(0, 0, 1);
  if (std::abs(z.dot(up)) > 1.0 - 1e-8) up = vec3(0, 1, 0);
  vec3 x = z.cross(up).normalized();  // right in image space
  vec3 y = z.cross(x);                // down in image space (world-down for upright cams)
  camera_pose cp;
  cp.R.row(0) = x;
  cp.R.row(1) = y;
  cp.R.row(2) = z;
  cp.t = -cp.R * center;
  cp.K = mat3::Identity();
  cp.K(0, 0) = cp.K(1, 1) = focal_px;
  cp.K(0, 2) = cp.K(1, 2) = double(img_size) / 2.0;
  cp.width = cp.height = img_size;
  cp.validate();
  return cp;
}

// n cameras at uniform azimuths on [0, 360), fixed elevation and radius,
// all looking at the origin; returned in azimuth order.
inline std::vector<camera_pose> make_camera_ring(int64_t n_views, double elevation_deg,
                                                 double radius, int64_t img_size,
                                                 double focal_px) {
  VT_CHECK(n_views >= 1, "need at least one view");
  VT_CHECK(radius > 1.0, "camera ring must lie outside the unit scene bound");
  VT_CHECK(focal_px > 0 && img_size > 0);
  double el = elevation_deg * M_PI / 180.0;
  VT_CHECK(std::abs(std::cos(el)) > 1e-6, "ring degenerates at the poles");
  std::vector<camera_pose> poses;
  for (int64_t i = 0; i < n_views; ++i) {
    double az = 2.0 * M_PI * double(i) / double(n_views);
    vec3 c(radius * std::cos(el) * std::cos(az), radius * std::cos(el) * std::sin(az),
           radius * std::sin(el));
    poses.push_back(look_at_origin(c, img_size, focal_px));
  }
  return poses;
}

// ---------------------------------------------------------------------------
// analytic SDF scenes
// ---------------------------------------------------------------------------

enum class prim_kind { sphere, box, torus };

// size meaning: sphere (radius, -, -); box (half extents);
// torus (major radius, minor radius, -). rot maps local -> world.
struct primitive {
  prim_kind kind = prim_kind::sphere;
  vec3 center = vec3::Zero();
  mat3 rot = mat3::Identity();
  vec3 size = vec3(0.5, 0.5, 0.5);
  vec3 albedo = vec3(0.8, 0.8, 0.8);
};

inline double primitive_sdf(const primitive& pr, const vec3& p) {
  vec3 q = pr.rot.transpose() * (p - pr.center);
  switch (pr.kind) {
    case prim_kind::sphere:
      return q.norm() - pr.size.x();
    case prim_kind::box: {
      vec3 d = q.cwiseAbs() - pr.size;
      double outside = d.cwiseMax(0.0).norm();
      double inside = std::min(d.maxCoeff(), 0.0);
      return outside + inside;
    }
    case prim_kind::torus: {
      double ring = std::hypot(q.x(), q.y()) - pr.size.x();
      return std::hypot(ring, q.z()) - pr.size.y();
    }
  }
  VT_CHECK(false, "unknown primitive kind");
  return 0;
}

inline double primitive_circumradius(const primitive& pr) {
  switch (pr.kind) {
    case prim_kind::sphere:
      return pr.size.x();
    case prim_kind::box:
      return pr.size.norm();
    case prim_kind::torus:
      return pr.size.x() + pr.size.y();
  }
  return 0;
}

// Min-union of exact primitive SDFs; albedo follows the nearest primitive.
struct analytic_scene {
  std::vector<primitive> prims;

  void validate() const {
    for (const auto& pr : prims)
      VT_CHECK(pr.center.norm() + primitive_circumradius(pr) <= 1.0 + 1e-9,
               "primitive escapes the unit bounding sphere");
  }

  double sdf(const vec3& p) const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& pr : prims) best = std::min(best, primitive_sdf(pr, p));
    return best;
  }

  struct sample {
    double sdf = std::numeric_limits<double>::infinity();
    vec3 albedo = vec3::Zero();
  };

  sample eval(const vec3& p) const {
    sample s;
    for (const auto& pr : prims) {
      double d = primitive_sdf(pr, p);
      if (d < s.sdf) {
        s.sdf = d;
        s.albedo = pr.albedo;
      }
    }
    return s;
  }

  vec3 normal(const vec3& p, double h = 1e-5) const {
    vec3 n;
    for (int j = 0; j < 3; ++j) {
      vec3 e = vec3::Zero();
      e[j] = h;
      n[j] = sdf(p + e) - sdf(p - e);
    }
    double len = n.norm();
    return len > 0 ? vec3(n / len) : vec3(0, 0, 1);
  }
};

inline mat3 rot_z(double angle) {
  return Eigen::AngleAxisd(angle, vec3::UnitZ()).toRotationMatrix();
}

inline analytic_scene rotate_scene_z(const analytic_scene& s, double angle) {
  analytic_scene out = s;
  mat3 rz = rot_z(angle);
  for (auto& pr : out.prims) {
    pr.center = rz * pr.center;
    pr.rot = rz * pr.rot;
  }
  return out;
}

// Random 1-3 primitive scene inside the unit bounding sphere.
inline analytic_scene random_scene(uint64_t seed) {
  rng_stream rs(seed);
  analytic_scene scene;
  int64_t n = rs.uniform_int(1, 3);
  for (int64_t i = 0; i < n; ++i) {
    primitive pr;
    int64_t kind = rs.uniform_int(0, 2);
    pr.kind = kind == 0 ? prim_kind::sphere : (kind == 1 ? prim_kind::box : prim_kind::torus);
    vec3 axis(rs.normal(), rs.normal(), rs.normal());
    if (axis.norm() < 1e-6) axis = vec3(0, 0, 1);
    pr.rot = Eigen::AngleAxisd(rs.uniform(0, 2 * M_PI), axis.normalized()).toRotationMatrix();
    switch (pr.kind) {
      case prim_kind::sphere:
        pr.size = vec3(rs.uniform(0.2, 0.45), 0, 0);
        break;
      case prim_kind::box:
        pr.size = vec3(rs.uniform(0.12, 0.3), rs.uniform(0.12, 0.3), rs.uniform(0.12, 0.3));
        break;
      case prim_kind::torus:
        pr.size = vec3(rs.uniform(0.2, 0.35), rs.uniform(0.06, 0.12), 0);
        break;
    }
    double cr = primitive_circumradius(pr);
    double max_off = std::max(0.0, 0.98 - cr);
    vec3 dir(rs.normal(), rs.normal(), rs.normal());
    if (dir.norm() < 1e-6) dir = vec3(1, 0, 0);
    pr.center = dir.normalized() * rs.uniform(0.0, max_off);
    pr.albedo = vec3(rs.uniform(0.15, 0.95), rs.uniform(0.15, 0.95), rs.uniform(0.15, 0.95));
    scene.prims.push_back(pr);
  }
  scene.validate();
  return scene;
}

// ---------------------------------------------------------------------------
// ground-truth rendering
// ---------------------------------------------------------------------------

// One view: RGB in [0,1] on white background, depth as ray parameter t
// (0 at misses), binary foreground mask.
struct rendered_view {
  imagef rgb, depth, mask;
};

namespace detail {

// March along the ray; on contact, bracket the first sign change and
// bisect so reported depth error is far below hit_eps even at grazing
// incidence. Returns miss if the ray never contacts the scene.
inline std::optional<double> trace_ray(const analytic_scene& scene, const vec3& o, const vec3& d,
                                       int64_t max_steps, double hit_eps) {
  // clip to a slightly padded unit bounding sphere
  double b = o.dot(d);
  double c = o.dot(o) - 1.1025;  // radius 1.05
  double disc = b * b - c;
  if (disc <= 0) return std::nullopt;
  double t = std::max(0.0, -b - std::sqrt(disc));
  double t_far = -b + std::sqrt(disc);
  for (int64_t step = 0; step < max_steps && t <= t_far; ++step) {
    double s = scene.sdf(o + t * d);
    if (s < hit_eps) {
      // bracket a sign change ahead of t, then bisect
      double lo = t, hi = t;
      double probe = std::max(hit_eps, 1e-12);
      bool bracketed = false;
      for (int64_t k = 0; k < 64; ++k) {
        hi = lo + probe;
        if (scene.sdf(o + hi * d) < 0) {
          bracketed = true;
          break;
        }
        lo = hi;
        probe *= 1.5;
      }
      if (!bracketed) return t;
      for (int k = 0; k < 60; ++k) {
        double mid = 0.5 * (lo + hi);
        (scene.sdf(o + mid * d) < 0 ? hi : lo) = mid;
      }
      return 0.5 * (lo + hi);
    }
    t += s;
  }
  return std::nullopt;
}

}  // namespace detail

inline rendered_view sphere_trace_render(const analytic_scene& scene, const camera_pose& pose,
                                         int64_t max_steps = 256, double hit_eps = 1e-5) {
  VT_CHECK(max_steps >= 1 && hit_eps > 0);
  rendered_view out;
  out.rgb = imagef(pose.width, pose.height, 3);
  out.depth = imagef(pose.width, pose.height, 1);
  out.mask = imagef(pose.width, pose.height, 1);
  out.rgb.fill(1.0f);  // white background
  for (int64_t iy = 0; iy < pose.height; ++iy) {
    for (int64_t ix = 0; ix < pose.width; ++ix) {
      auto ray = pose.ray_at(double(ix) + 0.5, double(iy) + 0.5);
      auto hit = detail::trace_ray(scene, ray.origin, ray.dir, max_steps, hit_eps);
      if (!hit) continue;
      vec3 p = ray.origin + *hit * ray.dir;
      auto sm = scene.eval(p);
      vec3 n = scene.normal(p);
      double lambert = std::max(0.0, n.dot(-ray.dir));  // headlight at the camera
      for (int64_t ch = 0; ch < 3; ++ch)
        out.rgb.at(ix, iy, ch) = float(std::clamp(sm.albedo[ch] * lambert, 0.0, 1.0));
      out.depth.at(ix, iy) = float(*hit);
      out.mask.at(ix, iy) = 1.0f;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// view sets and corruption
// ---------------------------------------------------------------------------

struct view_set {
  std::vector<imagef> images;  // RGB
  std::vector<imagef> depths;  // ray-parameter depth, 0 = background
  std::vector<imagef> masks;   // 1 = foreground
  std::vector<camera_pose> poses;

  int64_t n_views() const { return static_cast<int64_t>(images.size()); }

  void validate() const {
    VT_CHECK(images.size() == depths.size() && images.size() == masks.size() &&
                 images.size() == poses.size() && !images.empty(),
             "view set arrays disagree");
    for (size_t i = 0; i < images.size(); ++i)
      for (int64_t px = 0; px < masks[i].w * masks[i].h; ++px)
        VT_CHECK((depths[i].v[px] > 0) == (masks[i].v[px] > 0.5f),
                 "depth/mask disagree at a pixel");
  }
};

inline view_set render_view_set(const analytic_scene& scene, const std::vector<camera_pose>& poses,
                                int64_t max_steps = 256, double hit_eps = 1e-5) {
  view_set vs;
  for (const auto& p : poses) {
    auto rv = sphere_trace_render(scene, p, max_steps, hit_eps);
    vs.images.push_back(std::move(rv.rgb));
    vs.depths.push_back(std::move(rv.depth));
    vs.masks.push_back(std::move(rv.mask));
    vs.poses.push_back(p);
  }
  return vs;
}

struct corruption_spec {
  double color_jitter_sigma = 0.0;
  double pose_jitter_deg = 0.0;
  int64_t occluder_count = 0;
  uint64_t seed = 0;
};

// Record of what was done to each view, for tests and run logs.
struct corruption_record {
  struct rect {
    int64_t x0, y0, x1, y1;  // half-open
  };
  std::vector<std::vector<rect>> occluders;  // per view
  std::vector<vec3> gains;
  std::vector<mat3> rotations;  // applied in-camera
};

// Pose error is simulated by rotating the camera about its own center,
// which acts on the image as the homography K * dR^T * K^-1 (contents
// shift; the stored nominal pose is deliberately left untouched). Depth as
// ray parameter is invariant under such rotation, so depth/mask warp with
// the same homography. View 0 is never modified.
inline view_set corrupt_views(const view_set& vs, const corruption_spec& spec,
                              corruption_record* record = nullptr) {
  VT_CHECK(spec.color_jitter_sigma >= 0 && spec.pose_jitter_deg >= 0 && spec.occluder_count >= 0,
           "corruption magnitudes must be nonnegative");
  view_set out = vs;
  if (record) {
    record->occluders.assign(vs.images.size(), {});
    record->gains.assign(vs.images.size(), vec3(1, 1, 1));
    record->rotations.assign(vs.images.size(), mat3::Identity());
  }
  for (int64_t vi = 1; vi < vs.n_views(); ++vi) {
    rng_stream rs(fork_seed(spec.seed, static_cast<uint64_t>(vi)));
    const auto& pose = vs.poses[vi];
    int64_t w = vs.images[vi].w, h = vs.images[vi].h;

    if (spec.pose_jitter_deg > 0) {
      vec3 axis(rs.normal(), rs.normal(), rs.normal());
      if (axis.norm() < 1e-9) axis = vec3(0, 0, 1);
      double ang = rs.normal(0.0, spec.pose_jitter_deg * M_PI / 180.0);
      mat3 dr = Eigen::AngleAxisd(ang, axis.normalized()).toRotationMatrix();
      if (record) record->rotations[vi] = dr;
      // sample source pixel: p_src = K * dR^T * K^-1 * p_dst
      mat3 hmg = pose.K * dr.transpose() * pose.K.inverse();
      imagef rgb(w, h, 3), dep(w, h, 1), msk(w, h, 1);
      rgb.fill(1.0f);
      for (int64_t iy = 0; iy < h; ++iy)
        for (int64_t ix = 0; ix < w; ++ix) {
          vec3 src = hmg * vec3(double(ix) + 0.5, double(iy) + 0.5, 1.0);
          double su = src.x() / src.z() - 0.5, sv = src.y() / src.z() - 0.5;
          if (src.z() <= 0 || su < 0 || su > double(w - 1) || sv < 0 || sv > double(h - 1))
            continue;  // border: white background, empty depth/mask
          for (int64_t ch = 0; ch < 3; ++ch)
            rgb.at(ix, iy, ch) = vs.images[vi].bilinear(su, sv, ch);
          int64_t nu = std::llround(su), nv = std::llround(sv);
          float m = vs.masks[vi].at(nu, nv);
          msk.at(ix, iy) = m;
          dep.at(ix, iy) = m > 0.5f ? vs.depths[vi].at(nu, nv) : 0.0f;
        }
      out.images[vi] = std::move(rgb);
      out.depths[vi] = std::move(dep);
      out.masks[vi] = std::move(msk);
    }

    if (spec.color_jitter_sigma > 0) {
      vec3 gain(std::max(0.0, 1.0 + rs.normal(0.0, spec.color_jitter_sigma)),
                std::max(0.0, 1.0 + rs.normal(0.0, spec.color_jitter_sigma)),
                std::max(0.0, 1.0 + rs.normal(0.0, spec.color_jitter_sigma)));
      if (record) record->gains[vi] = gain;
      for (int64_t px = 0; px < w * h; ++px)
        for (int64_t ch = 0; ch < 3; ++ch) {
          float& x = out.images[vi].v[px * 3 + ch];
          x = std::clamp(x * float(gain[ch]), 0.0f, 1.0f);
        }
    }

    // RGB-only occluders: geometry targets stay clean, mimicking views
    // whose appearance disagrees with their nominal pose/depth.
    for (int64_t k = 0; k < spec.occluder_count; ++k) {
      int64_t rw = rs.uniform_int(w / 8, w / 3), rh = rs.uniform_int(h / 8, h / 3);
      int64_t x0 = rs.uniform_int(0, w - rw), y0 = rs.uniform_int(0, h - rh);
      vec3 color(rs.uniform(0, 1), rs.uniform(0, 1), rs.uniform(0, 1));
      if (record) record->occluders[vi].push_back({x0, y0, x0 + rw, y0 + rh});
      for (int64_t iy = y0; iy < y0 + rh; ++iy)
        for (int64_t ix = x0; ix < x0 + rw; ++ix)
          for (int64_t ch = 0; ch < 3; ++ch)
            out.images[vi].at(ix, iy, ch) = float(color[ch]);
    }
  }
  return out;
}

}  // namespace voltran
