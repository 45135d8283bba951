#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "wstrack/tensor.hpp"

namespace wstrack {

// 8-bit RGB frame as stored on disk (binary PPM).
struct Image8 {
  int w = 0, h = 0;
  std::vector<uint8_t> rgb;  // interleaved, row-major

  Image8() = default;
  Image8(int w_, int h_, uint8_t fill = 0) : w(w_), h(h_), rgb(size_t(w_) * h_ * 3, fill) {}

  uint8_t* px(int x, int y) { return rgb.data() + (size_t(y) * w + x) * 3; }
  const uint8_t* px(int x, int y) const { return rgb.data() + (size_t(y) * w + x) * 3; }
};

inline void write_ppm(const std::string& path, const Image8& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_ppm: cannot open " + path);
  os << "P6\n" << img.w << " " << img.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()), std::streamsize(img.rgb.size()));
  if (!os) throw std::runtime_error("write_ppm: write failed for " + path);
}

inline Image8 read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P6") throw std::runtime_error("read_ppm: " + path + " is not binary PPM");
  auto next_int = [&is, &path]() {
    // skip whitespace and '#' comment lines
    while (true) {
      int ch = is.peek();
      if (ch == '#') {
        std::string line;
        std::getline(is, line);
      } else if (std::isspace(ch)) {
        is.get();
      } else {
        break;
      }
    }
    int v;
    if (!(is >> v)) throw std::runtime_error("read_ppm: malformed header in " + path);
    return v;
  };
  int w = next_int(), h = next_int(), maxval = next_int();
  if (maxval != 255) throw std::runtime_error("read_ppm: only maxval 255 supported, " + path);
  is.get();  // single whitespace before payload
  Image8 img(w, h);
  is.read(reinterpret_cast<char*>(img.rgb.data()), std::streamsize(img.rgb.size()));
  if (!is) throw std::runtime_error("read_ppm: truncated payload in " + path);
  return img;
}

// (1, 3, h, w) tensor in [0, 1].
inline Tensor4 image_to_tensor(const Image8& img) {
  Tensor4 t(1, 3, img.h, img.w);
  for (int c = 0; c < 3; ++c) {
    double* dst = t.channel(0, c);
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) dst[y * img.w + x] = img.px(x, y)[c] / 255.0;
  }
  return t;
}

inline uint8_t clamp_byte(double v) {
  return uint8_t(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

inline Image8 tensor_to_image(const Tensor4& t) {
  if (t.c != 3 || t.n != 1) throw std::invalid_argument("tensor_to_image: expects (1,3,h,w)");
  Image8 img(t.w, t.h);
  for (int c = 0; c < 3; ++c) {
    const double* src = t.channel(0, c);
    for (int y = 0; y < t.h; ++y)
      for (int x = 0; x < t.w; ++x) img.px(x, y)[c] = clamp_byte(src[y * t.w + x]);
  }
  return img;
}

using Color = std::array<uint8_t, 3>;

inline void draw_hline(Image8& img, int x0, int x1, int y, Color c, bool dashed = false) {
  if (y < 0 || y >= img.h) return;
  for (int x = std::max(0, x0); x <= std::min(img.w - 1, x1); ++x) {
    if (dashed && (x / 3) % 2 == 1) continue;
    uint8_t* p = img.px(x, y);
    p[0] = c[0]; p[1] = c[1]; p[2] = c[2];
  }
}

inline void draw_vline(Image8& img, int x, int y0, int y1, Color c, bool dashed = false) {
  if (x < 0 || x >= img.w) return;
  for (int y = std::max(0, y0); y <= std::min(img.h - 1, y1); ++y) {
    if (dashed && (y / 3) % 2 == 1) continue;
    uint8_t* p = img.px(x, y);
    p[0] = c[0]; p[1] = c[1]; p[2] = c[2];
  }
}

inline void draw_rect(Image8& img, int x, int y, int w, int h, Color c, bool dashed = false) {
  draw_hline(img, x, x + w - 1, y, c, dashed);
  draw_hline(img, x, x + w - 1, y + h - 1, c, dashed);
  draw_vline(img, x, y, y + h - 1, c, dashed);
  draw_vline(img, x + w - 1, y, y + h - 1, c, dashed);
}

// Blue-to-red ramp for heat map panels.
inline Color heat_color(double v) {
  v = std::clamp(v, 0.0, 1.0);
  double r = std::clamp(1.5 - std::abs(4.0 * v - 3.0), 0.0, 1.0);
  double g = std::clamp(1.5 - std::abs(4.0 * v - 2.0), 0.0, 1.0);
  double b = std::clamp(1.5 - std::abs(4.0 * v - 1.0), 0.0, 1.0);
  return {clamp_byte(r), clamp_byte(g), clamp_byte(b)};
}

inline void blend_pixel(uint8_t* p, Color c, double alpha) {
  for (int i = 0; i < 3; ++i)
    p[i] = uint8_t(std::clamp(std::lround(p[i] * (1.0 - alpha) + c[i] * alpha), 0L, 255L));
}

}  // namespace wstrack
