#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "voltran/core/check.hpp"

namespace voltran {

// Interleaved float raster, row-major top-down; values nominally in [0,1]
// for RGB, scene units for depth.
struct imagef {
  int64_t w = 0, h = 0, c = 0;
  std::vector<float> v;

  imagef() = default;
  imagef(int64_t w_, int64_t h_, int64_t c_)
      : w(w_), h(h_), c(c_), v(static_cast<size_t>(w_ * h_ * c_), 0.0f) {}

  float& at(int64_t x, int64_t y, int64_t ch = 0) {
    return v[static_cast<size_t>((y * w + x) * c + ch)];
  }
  float at(int64_t x, int64_t y, int64_t ch = 0) const {
    return v[static_cast<size_t>((y * w + x) * c + ch)];
  }

  void fill(float x) { std::fill(v.begin(), v.end(), x); }

  // (u, v) in pixel-index space (0..w-1), edge-clamped.
  float bilinear(double u, double vv, int64_t ch) const {
    u = std::clamp(u, 0.0, double(w - 1));
    vv = std::clamp(vv, 0.0, double(h - 1));
    int64_t x0 = std::min(static_cast<int64_t>(std::floor(u)), w - 1);
    int64_t y0 = std::min(static_cast<int64_t>(std::floor(vv)), h - 1);
    int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    double fx = u - double(x0), fy = vv - double(y0);
    return float((1 - fx) * (1 - fy) * at(x0, y0, ch) + fx * (1 - fy) * at(x1, y0, ch) +
                 (1 - fx) * fy * at(x0, y1, ch) + fx * fy * at(x1, y1, ch));
  }
};

// ---------------------------------------------------------------------------
// PPM (P6, 8-bit RGB) and PFM (32-bit float) readers/writers
// ---------------------------------------------------------------------------

inline void write_ppm(const imagef& img, const std::string& path) {
  VT_CHECK(img.c == 3, "write_ppm wants a 3-channel image");
  std::ofstream f(path, std::ios::binary);
  VT_CHECK(f.good(), "cannot open for write: ", path);
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(img.w) * 3);
  for (int64_t y = 0; y < img.h; ++y) {
    for (int64_t x = 0; x < img.w; ++x)
      for (int64_t ch = 0; ch < 3; ++ch)
        row[x * 3 + ch] =
            static_cast<uint8_t>(std::lround(std::clamp(img.at(x, y, ch), 0.0f, 1.0f) * 255.0f));
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  VT_CHECK(f.good(), "short write: ", path);
}

namespace detail {
inline void skip_pnm_ws(std::istream& in) {
  while (true) {
    int ch = in.peek();
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      return;
    }
  }
}
}  // namespace detail

inline imagef read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  VT_CHECK(f.good(), "cannot open: ", path);
  std::string magic;
  f >> magic;
  VT_CHECK(magic == "P6", "not a P6 ppm: ", path);
  detail::skip_pnm_ws(f);
  int64_t w, h, maxval;
  f >> w;
  detail::skip_pnm_ws(f);
  f >> h;
  detail::skip_pnm_ws(f);
  f >> maxval;
  VT_CHECK(maxval == 255, "only 8-bit ppm supported: ", path);
  f.get();  // single whitespace after maxval
  imagef img(w, h, 3);
  std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
  for (int64_t y = 0; y < h; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    VT_CHECK(f.good(), "truncated ppm: ", path);
    for (int64_t x = 0; x < w; ++x)
      for (int64_t ch = 0; ch < 3; ++ch) img.at(x, y, ch) = float(row[x * 3 + ch]) / 255.0f;
  }
  return img;
}

// PFM stores rows bottom-to-top; negative scale marks little-endian.
inline void write_pfm(const imagef& img, const std::string& path) {
  VT_CHECK(img.c == 1 || img.c == 3, "pfm supports 1 or 3 channels");
  std::ofstream f(path, std::ios::binary);
  VT_CHECK(f.good(), "cannot open for write: ", path);
  f << (img.c == 1 ? "Pf" : "PF") << "\n" << img.w << " " << img.h << "\n-1.0\n";
  for (int64_t y = img.h - 1; y >= 0; --y)
    f.write(reinterpret_cast<const char*>(&img.v[static_cast<size_t>(y * img.w * img.c)]),
            static_cast<std::streamsize>(img.w * img.c * sizeof(float)));
  VT_CHECK(f.good(), "short write: ", path);
}

inline imagef read_pfm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  VT_CHECK(f.good(), "cannot open: ", path);
  std::string magic;
  f >> magic;
  VT_CHECK(magic == "Pf" || magic == "PF", "not a pfm: ", path);
  int64_t w, h;
  double scale;
  f >> w >> h >> scale;
  VT_CHECK(scale < 0, "big-endian pfm unsupported: ", path);
  f.get();
  imagef img(w, h, magic == "Pf" ? 1 : 3);
  for (int64_t y = h - 1; y >= 0; --y) {
    f.read(reinterpret_cast<char*>(&img.v[static_cast<size_t>(y * w * img.c)]),
           static_cast<std::streamsize>(w * img.c * sizeof(float)));
    VT_CHECK(f.good(), "truncated pfm: ", path);
  }
  return img;
}

}  // namespace voltran
