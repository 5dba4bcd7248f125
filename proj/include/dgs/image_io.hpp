#pragma once

#include "dgs/core.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>

namespace dgs {

// ------------------------------------------------------------------- PNG

inline void save_png(const ImageRGB& img, const std::string& path) {
  std::vector<uint8_t> buf(img.size() * 3);
  for (size_t i = 0; i < img.size(); ++i)
    for (int c = 0; c < 3; ++c)
      buf[i * 3 + c] = uint8_t(std::lround(std::clamp(img.px[i][c], 0.0, 1.0) * 255.0));
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = png_uint_32(img.width);
  pi.height = png_uint_32(img.height);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, buf.data(), 0, nullptr))
    throw IoError("png write failed: " + path + " (" + pi.message + ")");
}

inline void save_png(const ImageU8& img, const std::string& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = png_uint_32(img.width);
  pi.height = png_uint_32(img.height);
  pi.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, img.px.data(), 0, nullptr))
    throw IoError("png write failed: " + path + " (" + pi.message + ")");
}

inline ImageRGB load_png_rgb(const std::string& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw IoError("png open failed: " + path + " (" + pi.message + ")");
  pi.format = PNG_FORMAT_RGB;
  std::vector<uint8_t> buf(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr))
    throw IoError("png read failed: " + path + " (" + pi.message + ")");
  ImageRGB img(int(pi.width), int(pi.height));
  for (size_t i = 0; i < img.size(); ++i)
    img.px[i] = Vec3(buf[i * 3], buf[i * 3 + 1], buf[i * 3 + 2]) / 255.0;
  return img;
}

inline ImageU8 load_png_gray(const std::string& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw IoError("png open failed: " + path + " (" + pi.message + ")");
  pi.format = PNG_FORMAT_GRAY;
  ImageU8 img(int(pi.width), int(pi.height));
  if (!png_image_finish_read(&pi, nullptr, img.px.data(), 0, nullptr))
    throw IoError("png read failed: " + path + " (" + pi.message + ")");
  return img;
}

// ------------------------------------------------------------------- PFM
// Little-endian binary float maps, rows stored bottom-to-top, scale -1.

inline void save_pfm(const ImageF& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "Pf\n" << img.width << " " << img.height << "\n-1.0\n";
  std::vector<float> row(img.width);
  for (int y = img.height - 1; y >= 0; --y) {
    for (int x = 0; x < img.width; ++x) row[x] = float(img.at(x, y));
    out.write(reinterpret_cast<const char*>(row.data()), row.size() * sizeof(float));
  }
  if (!out) throw IoError("write failed: " + path);
}

inline ImageF load_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  in >> magic >> w >> h >> scale;
  if (magic != "Pf" || w <= 0 || h <= 0) throw ParseError("not a grayscale PFM: " + path);
  if (scale >= 0) throw ParseError("big-endian PFM unsupported: " + path);
  in.get();  // single whitespace after the scale
  ImageF img(w, h);
  std::vector<float> row(w);
  for (int y = h - 1; y >= 0; --y) {
    in.read(reinterpret_cast<char*>(row.data()), row.size() * sizeof(float));
    if (!in) throw IoError("truncated PFM: " + path);
    for (int x = 0; x < w; ++x) img.at(x, y) = row[x];
  }
  return img;
}

}  // namespace dgs
