// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <cstring>

#include "msu/data.hpp"

namespace msu {

namespace {

struct File {
  std::FILE* f = nullptr;
  ~File() {
    if (f) std::fclose(f);
  }
};

[[noreturn]] void png_fail(const std::filesystem::path& path, const std::string& what) {
  throw DataError(path.string() + ": " + what);
}

void on_png_error(png_structp png, png_const_charp msg) {
  auto* buf = static_cast<char*>(png_get_error_ptr(png));
  std::snprintf(buf, 256, "%s", msg);
  png_longjmp(png, 1);
}

void on_png_warning(png_structp, png_const_charp) {}

}  // namespace

Image read_image_png(const std::filesystem::path& path) {
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str())) {
    png_fail(path, std::string("cannot read PNG (") + im.message + ")");
  }
  im.format = PNG_FORMAT_RGB;
  Image out(im.height, im.width);
  if (!png_image_finish_read(&im, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = im.message;
    png_image_free(&im);
    png_fail(path, "cannot decode PNG (" + msg + ")");
  }
  return out;
}

void write_image_png(const std::filesystem::path& path, const Image& img) {
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.width);
  im.height = static_cast<png_uint_32>(img.height);
  im.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&im, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    png_fail(path, std::string("cannot write PNG (") + im.message + ")");
  }
}

namespace {

// Classic libpng read of an 8-bit palette or grayscale image. Returns an
// empty message on success.
std::string read_indices(std::FILE* fp, Mask& out) {
  char err[256] = "";
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, err, on_png_error, on_png_warning);
  if (!png) return "out of memory";
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return "out of memory";
  }
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return err[0] ? err : "libpng error";
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_PALETTE && color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    return "mask must be palette-indexed or 8-bit grayscale";
  }
  if (color == PNG_COLOR_TYPE_GRAY && depth != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    return "grayscale mask must be 8-bit";
  }
  if (depth < 8) png_set_packing(png);
  png_read_update_info(png, info);
  const auto h = png_get_image_height(png, info);
  const auto w = png_get_image_width(png, info);
  out = Mask(h, w);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = out.labels.data() + static_cast<std::size_t>(y) * w;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return "";
}

std::string write_indices(std::FILE* fp, const Mask& m) {
  char err[256] = "";
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, err, on_png_error, on_png_warning);
  if (!png) return "out of memory";
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return "out of memory";
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(m.height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return err[0] ? err : "libpng error";
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(m.width), static_cast<png_uint_32>(m.height), 8,
               PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::array<png_color, 256> pal{};
  const auto& colors = class_palette();
  for (std::size_t i = 0; i < colors.size(); ++i) pal[i] = {colors[i][0], colors[i][1], colors[i][2]};
  png_set_PLTE(png, info, pal.data(), 256);
  png_write_info(png, info);
  for (std::int64_t y = 0; y < m.height; ++y) {
    rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(m.labels.data() + y * m.width);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return "";
}

}  // namespace

Mask read_mask_png(const std::filesystem::path& path) {
  File f{std::fopen(path.c_str(), "rb")};
  if (!f.f) png_fail(path, "cannot open");
  Mask m;
  const std::string err = read_indices(f.f, m);
  if (!err.empty()) png_fail(path, err);
  return m;
}

void write_mask_png(const std::filesystem::path& path, const Mask& mask) {
  File f{std::fopen(path.c_str(), "wb")};
  if (!f.f) png_fail(path, "cannot open for writing");
  const std::string err = write_indices(f.f, mask);
  if (!err.empty()) png_fail(path, err);
}

}  // namespace msu
