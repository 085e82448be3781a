#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <optional>
#include <sstream>
#include <string>

#include "voltran/io/image.hpp"
#include "voltran/scenes.hpp"

// On-disk dataset layout (one directory per object):
//   meta.json                   cameras, image size, optional scene + notes
//   view_###.ppm                8-bit RGB
//   view_###_depth.pfm          float depth (ray parameter, 0 = background)
//   view_###_mask.pfm           float {0,1} foreground mask
namespace voltran {

using json = nlohmann::json;

namespace detail {

inline std::string view_stem(int64_t i) {
  std::ostringstream os;
  os << "view_" << std::setw(3) << std::setfill('0') << i;
  return os.str();
}

inline json mat3_to_json(const mat3& m) {
  json a = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a.push_back(m(r, c));
  return a;
}

inline mat3 mat3_from_json(const json& a) {
  VT_CHECK(a.is_array() && a.size() == 9, "bad 3x3 matrix in meta.json");
  mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = a[static_cast<size_t>(r * 3 + c)].get<double>();
  return m;
}

inline json vec3_to_json(const vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline vec3 vec3_from_json(const json& a) {
  VT_CHECK(a.is_array() && a.size() == 3, "bad 3-vector in meta.json");
  return vec3(a[0].get<double>(), a[1].get<double>(), a[2].get<double>());
}

inline const char* kind_name(prim_kind k) {
  switch (k) {
    case prim_kind::sphere: return "sphere";
    case prim_kind::box: return "box";
    case prim_kind::torus: return "torus";
  }
  return "sphere";
}

inline prim_kind kind_from_name(const std::string& s) {
  if (s == "sphere") return prim_kind::sphere;
  if (s == "box") return prim_kind::box;
  if (s == "torus") return prim_kind::torus;
  VT_CHECK(false, "unknown primitive kind in meta.json: ", s);
  return prim_kind::sphere;
}

}  // namespace detail

inline json scene_to_json(const analytic_scene& scene) {
  json prims = json::array();
  for (const auto& pr : scene.prims)
    prims.push_back({{"kind", detail::kind_name(pr.kind)},
                     {"center", detail::vec3_to_json(pr.center)},
                     {"rot", detail::mat3_to_json(pr.rot)},
                     {"size", detail::vec3_to_json(pr.size)},
                     {"albedo", detail::vec3_to_json(pr.albedo)}});
  return json{{"primitives", prims}};
}

inline analytic_scene scene_from_json(const json& j) {
  analytic_scene scene;
  for (const auto& p : j.at("primitives")) {
    primitive pr;
    pr.kind = detail::kind_from_name(p.at("kind").get<std::string>());
    pr.center = detail::vec3_from_json(p.at("center"));
    pr.rot = detail::mat3_from_json(p.at("rot"));
    pr.size = detail::vec3_from_json(p.at("size"));
    pr.albedo = detail::vec3_from_json(p.at("albedo"));
    scene.prims.push_back(pr);
  }
  scene.validate();
  return scene;
}

struct dataset {
  view_set views;
  std::optional<analytic_scene> scene;  // present for synthetic data
  json meta;                            // full manifest as loaded/written
};

inline void write_dataset(const view_set& vs, const std::string& dir,
                          const analytic_scene* scene = nullptr, json extra = json::object()) {
  vs.validate();
  std::filesystem::create_directories(dir);
  json views = json::array();
  for (int64_t i = 0; i < vs.n_views(); ++i) {
    const auto& p = vs.poses[i];
    views.push_back({{"width", p.width},
                     {"height", p.height},
                     {"K", detail::mat3_to_json(p.K)},
                     {"R", detail::mat3_to_json(p.R)},
                     {"t", detail::vec3_to_json(p.t)}});
    std::string stem = dir + "/" + detail::view_stem(i);
    write_ppm(vs.images[i], stem + ".ppm");
    write_pfm(vs.depths[i], stem + "_depth.pfm");
    write_pfm(vs.masks[i], stem + "_mask.pfm");
  }
  json meta{{"n_views", vs.n_views()}, {"views", views}};
  if (scene) meta["scene"] = scene_to_json(*scene);
  for (auto& [k, val] : extra.items()) meta[k] = val;
  std::ofstream f(dir + "/meta.json");
  VT_CHECK(f.good(), "cannot write ", dir, "/meta.json");
  f << meta.dump(2) << "\n";
}

inline dataset read_dataset(const std::string& dir) {
  std::string meta_path = dir + "/meta.json";
  std::ifstream f(meta_path);
  VT_CHECK(f.good(), "dataset manifest missing: ", meta_path);
  dataset ds;
  try {
    ds.meta = json::parse(f);
  } catch (const json::exception& e) {
    VT_CHECK(false, "cannot parse ", meta_path, ": ", e.what());
  }
  int64_t n = ds.meta.at("n_views").get<int64_t>();
  VT_CHECK(static_cast<int64_t>(ds.meta.at("views").size()) == n, "n_views mismatch in ",
           meta_path);
  for (int64_t i = 0; i < n; ++i) {
    const json& jv = ds.meta.at("views")[static_cast<size_t>(i)];
    camera_pose p;
    p.width = jv.at("width").get<int64_t>();
    p.height = jv.at("height").get<int64_t>();
    p.K = detail::mat3_from_json(jv.at("K"));
    p.R = detail::mat3_from_json(jv.at("R"));
    p.t = detail::vec3_from_json(jv.at("t"));
    p.validate();
    std::string stem = dir + "/" + detail::view_stem(i);
    ds.views.poses.push_back(p);
    ds.views.images.push_back(read_ppm(stem + ".ppm"));
    ds.views.depths.push_back(read_pfm(stem + "_depth.pfm"));
    ds.views.masks.push_back(read_pfm(stem + "_mask.pfm"));
    VT_CHECK(ds.views.images.back().w == p.width && ds.views.images.back().h == p.height,
             "image size disagrees with meta.json: ", stem, ".ppm");
  }
  if (ds.meta.contains("scene")) ds.scene = scene_from_json(ds.meta.at("scene"));
  return ds;
}

}  // namespace voltran
