#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "voltran/core/check.hpp"

// Run configuration. Defaults are the desk-scale profile; paper_preset()
// switches the sizes the reference setup uses. Serialized as nested JSON
// ("train.lr" lives at {"train": {"lr": ...}}); unknown keys are rejected so
// typos fail loudly.
namespace voltran {

using nlohmann::json;

struct config {
  // data / cameras
  int64_t n_views = 8;
  int64_t img_size = 64;
  double ring_elevation_deg = 20.0;
  double ring_radius = 2.0;
  double focal_px = 0.0;  // 0 -> 0.8 * img_size
  int64_t scene_seed = 7;
  // image features
  int64_t feat_channels = 16;
  int64_t feat_stride = 4;
  int64_t d_emb = 64;
  // cost volume
  int64_t grid_res = 32;
  int64_t vol_channels = 8;
  // hypernetwork + sdf
  int64_t hyper_hidden = 32;
  std::vector<int64_t> sdf_hidden = {48, 48};
  int64_t geo_feats = 4;
  // view aggregator
  int64_t heads = 5;
  int64_t layers = 2;
  int64_t ffn_mult = 2;
  bool mean_pool = false;  // ablation: uniform blend weights instead of attention
  // renderer
  int64_t n_samples = 64;
  double inv_std_init = 20.0;
  double bound_radius = 1.0;
  // training
  int64_t iters = 2000;
  int64_t rays_per_batch = 512;
  double lr = 5e-4;
  double bg_ratio = 0.3;
  double w_depth = 1.0;
  double w_eik = 0.1;
  double w_sparse = 0.02;
  double sparse_tau = 10.0;
  uint64_t seed = 1;
  int64_t log_every = 50;
  int64_t checkpoint_every = 500;
  // evaluation
  int64_t mc_res = 64;
  int64_t surface_samples = 10000;
  double fscore_thresh = 0.05;
  int64_t iou_res = 64;

  double focal() const { return focal_px > 0 ? focal_px : 0.8 * static_cast<double>(img_size); }

  void validate() const {
    VT_CHECK(n_views >= 2, "config: n_views must be >= 2");
    VT_CHECK(img_size >= 16, "config: img_size must be >= 16");
    VT_CHECK(ring_radius > 1.0, "config: ring_radius must exceed the unit bound");
    VT_CHECK(feat_stride == 1 || feat_stride == 2 || feat_stride == 4,
             "config: feat_stride must be 1, 2 or 4");
    VT_CHECK(feat_channels > 0 && d_emb > 0 && vol_channels > 0, "config: channel sizes");
    VT_CHECK(grid_res >= 8, "config: grid_res must be >= 8");
    VT_CHECK(hyper_hidden > 0 && geo_feats >= 0, "config: hypernetwork sizes");
    VT_CHECK(!sdf_hidden.empty(), "config: sdf_hidden must list at least one layer");
    VT_CHECK(heads > 0 && layers > 0 && ffn_mult > 0, "config: aggregator sizes");
    VT_CHECK(n_samples >= 1, "config: n_samples must be >= 1");
    VT_CHECK(inv_std_init > 0, "config: inv_std_init must be positive");
    VT_CHECK(iters > 0 && rays_per_batch > 0, "config: training sizes");
    VT_CHECK(lr > 0, "config: lr must be positive");
    VT_CHECK(bg_ratio >= 0 && bg_ratio <= 1, "config: bg_ratio in [0,1]");
    VT_CHECK(mc_res >= 2 && iou_res >= 2 && surface_samples > 0, "config: eval sizes");
  }
};

// Sizes from the reference setup: wider embedding, finer volume, more views.
inline config paper_preset() {
  config c;
  c.n_views = 32;
  c.img_size = 256;
  c.d_emb = 768;
  c.grid_res = 96;
  c.vol_channels = 16;
  c.sdf_hidden = {256, 256};
  c.iters = 300000;
  return c;
}

namespace detail {

struct config_field {
  std::string path;
  std::function<json(const config&)> get;
  std::function<void(config&, const json&)> set;
};

template <typename T>
json field_to_json(const T& v) {
  return json(v);
}

template <typename T>
void field_from_json(T& v, const json& j, const std::string& path) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      VT_CHECK(j.is_boolean(), "config: '", path, "' expects a boolean");
    } else if constexpr (std::is_arithmetic_v<T>) {
      VT_CHECK(j.is_number(), "config: '", path, "' expects a number");
      if constexpr (std::is_integral_v<T>)
        VT_CHECK(j.is_number_integer() || j.is_number_unsigned(), "config: '", path,
                 "' expects an integer");
    }
    v = j.get<T>();
  } catch (const json::exception& e) {
    throw check_error("config: bad value for '" + path + "': " + e.what());
  }
}

inline const std::vector<config_field>& config_fields() {
  static const std::vector<config_field> fields = [] {
    std::vector<config_field> fs;
    auto bind = [&fs](const char* path, auto config::* mem) {
      fs.push_back({path, [mem](const config& c) { return field_to_json(c.*mem); },
                    [mem, p = std::string(path)](config& c, const json& j) {
                      field_from_json(c.*mem, j, p);
                    }});
    };
    bind("data.n_views", &config::n_views);
    bind("data.img_size", &config::img_size);
    bind("data.ring_elevation_deg", &config::ring_elevation_deg);
    bind("data.ring_radius", &config::ring_radius);
    bind("data.focal_px", &config::focal_px);
    bind("data.scene_seed", &config::scene_seed);
    bind("featnet.channels", &config::feat_channels);
    bind("featnet.stride", &config::feat_stride);
    bind("featnet.d_emb", &config::d_emb);
    bind("costvol.grid_res", &config::grid_res);
    bind("costvol.channels", &config::vol_channels);
    bind("sdf.hyper_hidden", &config::hyper_hidden);
    bind("sdf.hidden", &config::sdf_hidden);
    bind("sdf.geo_feats", &config::geo_feats);
    bind("voltran.heads", &config::heads);
    bind("voltran.layers", &config::layers);
    bind("voltran.ffn_mult", &config::ffn_mult);
    bind("voltran.mean_pool", &config::mean_pool);
    bind("render.n_samples", &config::n_samples);
    bind("render.inv_std_init", &config::inv_std_init);
    bind("render.bound_radius", &config::bound_radius);
    bind("train.iters", &config::iters);
    bind("train.rays_per_batch", &config::rays_per_batch);
    bind("train.lr", &config::lr);
    bind("train.bg_ratio", &config::bg_ratio);
    bind("train.w_depth", &config::w_depth);
    bind("train.w_eik", &config::w_eik);
    bind("train.w_sparse", &config::w_sparse);
    bind("train.sparse_tau", &config::sparse_tau);
    bind("train.seed", &config::seed);
    bind("train.log_every", &config::log_every);
    bind("train.checkpoint_every", &config::checkpoint_every);
    bind("eval.mc_res", &config::mc_res);
    bind("eval.surface_samples", &config::surface_samples);
    bind("eval.fscore_thresh", &config::fscore_thresh);
    bind("eval.iou_res", &config::iou_res);
    return fs;
  }();
  return fields;
}

inline const config_field* find_config_field(const std::string& path) {
  for (const auto& f : config_fields())
    if (f.path == path) return &f;
  return nullptr;
}

inline void flatten_json(const json& j, const std::string& prefix,
                         std::map<std::string, json>& out) {
  VT_CHECK(j.is_object(), "config: expected an object at '", prefix.empty() ? "<root>" : prefix,
           "'");
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it.value().is_object())
      flatten_json(it.value(), path, out);
    else
      out[path] = it.value();
  }
}

}  // namespace detail

inline json config_to_json(const config& c) {
  json j = json::object();
  for (const auto& f : detail::config_fields()) {
    json* cur = &j;
    std::string rest = f.path;
    for (size_t dot = rest.find('.'); dot != std::string::npos; dot = rest.find('.')) {
      cur = &(*cur)[rest.substr(0, dot)];
      rest = rest.substr(dot + 1);
    }
    (*cur)[rest] = f.get(c);
  }
  return j;
}

// Applies a (possibly partial) nested JSON document on top of `c`.
// Unknown keys are an error.
inline void config_apply_json(config& c, const json& j) {
  std::map<std::string, json> flat;
  detail::flatten_json(j, "", flat);
  for (const auto& [path, value] : flat) {
    const auto* f = detail::find_config_field(path);
    VT_CHECK(f != nullptr, "config: unknown key '", path, "'");
    f->set(c, value);
  }
}

inline config config_from_json(const json& j) {
  config c;
  config_apply_json(c, j);
  return c;
}

// Applies "dotted.path=value" (value parsed as JSON, bare words as strings).
inline void config_apply_override(config& c, const std::string& kv) {
  auto eq = kv.find('=');
  VT_CHECK(eq != std::string::npos && eq > 0, "override must look like key=value, got '", kv, "'");
  std::string path = kv.substr(0, eq), raw = kv.substr(eq + 1);
  const auto* f = detail::find_config_field(path);
  VT_CHECK(f != nullptr, "config: unknown key '", path, "'");
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = json(raw);
  f->set(c, value);
}

}  // namespace voltran
