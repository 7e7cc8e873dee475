#pragma once

#include <png.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "fadet/tensor.hpp"

namespace fadet {

// 8-bit RGB image, row-major.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> rgb;  // 3 * width * height

  ImageU8() = default;
  ImageU8(int w, int h) : width(w), height(h), rgb(static_cast<size_t>(3) * w * h, 0) {}

  unsigned char* px(int x, int y) { return &rgb[static_cast<size_t>(3) * (static_cast<size_t>(y) * width + x)]; }
  const unsigned char* px(int x, int y) const {
    return &rgb[static_cast<size_t>(3) * (static_cast<size_t>(y) * width + x)];
  }

  void set(int x, int y, unsigned char r, unsigned char g, unsigned char b) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    unsigned char* p = px(x, y);
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }
};

inline void write_png(const std::string& path, const ImageU8& img) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw UserError("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("png write failed: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Pinned filter/level so identical pixels give identical bytes.
  png_set_compression_level(png, 6);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[static_cast<size_t>(y)] = const_cast<png_bytep>(img.rgb.data() + static_cast<size_t>(3) * y * img.width);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline ImageU8 read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw UserError("cannot open image: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw UserError("malformed PNG: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  ImageU8 img(static_cast<int>(png_get_image_width(png, info)), static_cast<int>(png_get_image_height(png, info)));
  std::vector<png_bytep> rows(static_cast<size_t>(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[static_cast<size_t>(y)] = img.rgb.data() + static_cast<size_t>(3) * y * img.width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

// float CHW [0,1]  <->  8-bit RGB
inline Tensor image_to_chw(const ImageU8& img) {
  Tensor t({3, img.height, img.width});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const unsigned char* p = img.px(x, y);
      for (int c = 0; c < 3; ++c)
        t[(static_cast<int64_t>(c) * img.height + y) * img.width + x] = static_cast<float>(p[c]) / 255.0f;
    }
  return t;
}

inline ImageU8 chw_to_image(const Tensor& t) {
  if (t.ndim() != 3 || t.dim(0) != 3) throw std::runtime_error("chw_to_image: expected 3xHxW");
  int H = t.dim(1), W = t.dim(2);
  ImageU8 img(W, H);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      unsigned char* p = img.px(x, y);
      for (int c = 0; c < 3; ++c) {
        float v = t[(static_cast<int64_t>(c) * H + y) * W + x];
        v = std::min(1.0f, std::max(0.0f, v));
        p[c] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
  return img;
}

// Slice image n out of an NCHW batch.
inline Tensor nth_chw(const Tensor& batch, int n) {
  int C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  Tensor t({C, H, W});
  for (int c = 0; c < C; ++c)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) t[(static_cast<int64_t>(c) * H + h) * W + w] = batch.at(n, c, h, w);
  return t;
}

// ---------------------------------------------------------------------------
// Drawing
// ---------------------------------------------------------------------------

struct Rgb {
  unsigned char r, g, b;
};

inline void draw_hline(ImageU8& img, int x0, int x1, int y, Rgb c) {
  for (int x = x0; x <= x1; ++x) img.set(x, y, c.r, c.g, c.b);
}

inline void draw_vline(ImageU8& img, int x, int y0, int y1, Rgb c) {
  for (int y = y0; y <= y1; ++y) img.set(x, y, c.r, c.g, c.b);
}

inline void draw_rect_outline(ImageU8& img, int x0, int y0, int x1, int y1, Rgb c, int thickness = 1) {
  for (int t = 0; t < thickness; ++t) {
    draw_hline(img, x0, x1, y0 + t, c);
    draw_hline(img, x0, x1, y1 - t, c);
    draw_vline(img, x0 + t, y0, y1, c);
    draw_vline(img, x1 - t, y0, y1, c);
  }
}

// 3x5 glyphs for "0123456789.", enough for confidence labels and axis ticks.
inline const std::array<uint16_t, 11>& tiny_font() {
  // Each glyph: 15 bits row-major, MSB = top-left.
  static const std::array<uint16_t, 11> glyphs = {
      0b111101101101111,  // 0
      0b010110010010111,  // 1
      0b111001111100111,  // 2
      0b111001111001111,  // 3
      0b101101111001001,  // 4
      0b111100111001111,  // 5
      0b111100111101111,  // 6
      0b111001001001001,  // 7
      0b111101111101111,  // 8
      0b111101111001111,  // 9
      0b000000000000010,  // .
  };
  return glyphs;
}

inline void draw_text(ImageU8& img, int x, int y, const std::string& text, Rgb c) {
  int cx = x;
  for (char ch : text) {
    int gi = -1;
    if (ch >= '0' && ch <= '9') gi = ch - '0';
    else if (ch == '.') gi = 10;
    if (gi >= 0) {
      uint16_t bits = tiny_font()[static_cast<size_t>(gi)];
      for (int ry = 0; ry < 5; ++ry)
        for (int rx = 0; rx < 3; ++rx)
          if (bits & (1 << (14 - (ry * 3 + rx)))) img.set(cx + rx, y + ry, c.r, c.g, c.b);
    }
    cx += 4;  // 3px glyph + 1px gap (spaces and unknown chars advance too)
  }
}

inline ImageU8 hstack_images(const std::vector<ImageU8>& images, int gap = 4) {
  int h = 0, w = 0;
  for (const auto& im : images) {
    h = std::max(h, im.height);
    w += im.width;
  }
  w += gap * static_cast<int>(images.size() - 1);
  ImageU8 out(w, h);
  std::fill(out.rgb.begin(), out.rgb.end(), static_cast<unsigned char>(255));
  int xoff = 0;
  for (const auto& im : images) {
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x) {
        const unsigned char* p = im.px(x, y);
        out.set(xoff + x, y, p[0], p[1], p[2]);
      }
    xoff += im.width + gap;
  }
  return out;
}

}  // namespace fadet
