#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace mfen {

// 8-bit image with interleaved pixels; channels is 1 (grayscale) or 3 (RGB).
struct ImageU8 {
  int w = 0;
  int h = 0;
  int channels = 1;
  std::vector<std::uint8_t> pix;
};

namespace pnm {

inline int read_token(std::istream& in, const std::string& path) {
  // skips whitespace and '#' comments per the PNM grammar
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  require(c != EOF, "unreadable file (truncated header): " + path);
  int value = 0;
  bool any = false;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  require(any, "unreadable file (bad header token): " + path);
  return value;
}

}  // namespace pnm

// Reads binary PGM (P5) or PPM (P6) with maxval <= 255.
inline ImageU8 read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "unreadable file: " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  require(m0 == 'P' && (m1 == '5' || m1 == '6'),
          "unreadable file (not binary PGM/PPM): " + path);
  ImageU8 img;
  img.channels = (m1 == '6') ? 3 : 1;
  img.w = pnm::read_token(in, path);
  img.h = pnm::read_token(in, path);
  const int maxval = pnm::read_token(in, path);
  require(maxval > 0 && maxval <= 255, "unreadable file (maxval > 255): " + path);
  require(img.w >= 1 && img.h >= 1, "unreadable file (empty image): " + path);
  img.pix.resize(static_cast<std::size_t>(img.w) * img.h * img.channels);
  in.read(reinterpret_cast<char*>(img.pix.data()), static_cast<std::streamsize>(img.pix.size()));
  require(in.gcount() == static_cast<std::streamsize>(img.pix.size()),
          "unreadable file (truncated pixel data): " + path);
  return img;
}

inline void write_pnm(const std::string& path, const ImageU8& img) {
  require(img.channels == 1 || img.channels == 3, "write_pnm: channels must be 1 or 3");
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write file: " + path);
  out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pix.data()),
            static_cast<std::streamsize>(img.pix.size()));
  require(out.good(), "cannot write file: " + path);
}

// [0,1] float tensor (1 x C x H x W) from an 8-bit image.
inline Tensor<float> image_to_tensor(const ImageU8& img) {
  Tensor<float> t(Shape{1, img.channels, img.h, img.w});
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x)
        t.at(0, c, y, x) =
            static_cast<float>(img.pix[(static_cast<std::size_t>(y) * img.w + x) * img.channels + c]) /
            255.0f;
  return t;
}

inline ImageU8 tensor_to_image(const Tensor<float>& t) {
  ImageU8 img;
  img.channels = t.shape.c;
  img.h = t.shape.h;
  img.w = t.shape.w;
  img.pix.resize(static_cast<std::size_t>(img.w) * img.h * img.channels);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        const float v = std::clamp(t.at(0, c, y, x), 0.0f, 1.0f);
        img.pix[(static_cast<std::size_t>(y) * img.w + x) * img.channels + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
  return img;
}

// Bilinear resize with the half-pixel center convention.
inline Tensor<float> resize_bilinear(const Tensor<float>& src, int out_h, int out_w) {
  require(out_h >= 1 && out_w >= 1, "resize_bilinear: target size must be >= 1");
  const Shape s = src.shape;
  Tensor<float> dst(Shape{s.n, s.c, out_h, out_w});
  const double sy = static_cast<double>(s.h) / out_h;
  const double sx = static_cast<double>(s.w) / out_w;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const float* sp = src.plane(n, c);
      float* dp = dst.plane(n, c);
      for (int oy = 0; oy < out_h; ++oy) {
        const double fy = std::max(0.0, (oy + 0.5) * sy - 0.5);
        const int y0 = std::min(static_cast<int>(fy), s.h - 1);
        const int y1 = std::min(y0 + 1, s.h - 1);
        const float wy = static_cast<float>(fy - y0);
        for (int ox = 0; ox < out_w; ++ox) {
          const double fx = std::max(0.0, (ox + 0.5) * sx - 0.5);
          const int x0 = std::min(static_cast<int>(fx), s.w - 1);
          const int x1 = std::min(x0 + 1, s.w - 1);
          const float wx = static_cast<float>(fx - x0);
          const float top = sp[y0 * s.w + x0] * (1.0f - wx) + sp[y0 * s.w + x1] * wx;
          const float bot = sp[y1 * s.w + x0] * (1.0f - wx) + sp[y1 * s.w + x1] * wx;
          dp[oy * out_w + ox] = top * (1.0f - wy) + bot * wy;
        }
      }
    }
  return dst;
}

inline Tensor<float> resize_nearest_image(const Tensor<float>& src, int out_h, int out_w) {
  require(out_h >= 1 && out_w >= 1, "resize_nearest_image: target size must be >= 1");
  const Shape s = src.shape;
  Tensor<float> dst(Shape{s.n, s.c, out_h, out_w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const float* sp = src.plane(n, c);
      float* dp = dst.plane(n, c);
      for (int oy = 0; oy < out_h; ++oy) {
        const int iy = static_cast<int>(static_cast<std::int64_t>(oy) * s.h / out_h);
        for (int ox = 0; ox < out_w; ++ox)
          dp[oy * out_w + ox] = sp[iy * s.w + static_cast<std::int64_t>(ox) * s.w / out_w];
      }
    }
  return dst;
}

}  // namespace mfen
