#pragma once

// PNG/JPEG decoding to C×H×W tensors in [0,1], deterministic PNG encoding,
// and the root/<class>/<file> corpus loader.

#include <png.h>
#include <jpeglib.h>

#include <algorithm>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "fedlora/dataset.hpp"
#include "fedlora/errors.hpp"
#include "fedlora/tensor.hpp"

namespace fedlora {

// 8-bit interleaved pixels.
struct RgbImage {
  std::size_t width = 0, height = 0, channels = 3;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& p, const char* mode) {
  FilePtr f(std::fopen(p.c_str(), mode));
  if (!f) throw DataError("cannot open '" + p.string() + "'");
  return f;
}

inline void png_error_fn(png_structp png, png_const_charp msg) {
  *static_cast<std::string*>(png_get_error_ptr(png)) = msg;
  png_longjmp(png, 1);
}
inline void png_warning_fn(png_structp, png_const_charp) {}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace detail

inline RgbImage read_png(const std::filesystem::path& path) {
  auto f = detail::open_file(path, "rb");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("libpng initialisation failed");
  }
  RgbImage img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("'" + path.string() + "': " + err);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_packing(png);
  png_set_expand(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = 3;
  img.pixels.resize(img.width * img.height * 3);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline RgbImage read_jpeg(const std::filesystem::path& path) {
  auto f = detail::open_file(path, "rb");
  jpeg_decompress_struct cinfo{};
  detail::JpegError jerr{};
  cinfo.err = jpeg_std_error(&jerr.mgr);
  jerr.mgr.error_exit = detail::jpeg_error_exit;
  RgbImage img;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DataError("'" + path.string() + "': " + jerr.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = cinfo.output_width;
  img.height = cinfo.output_height;
  img.pixels.resize(img.width * img.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.pixels.data() + cinfo.output_scanline * img.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

// RGB PNG, no timestamps or text chunks, fixed compression: identical pixels
// give identical bytes.
inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
  if (img.channels != 3 || img.pixels.size() != img.width * img.height * 3)
    throw DataError("write_png: expected packed RGB pixels");
  std::FILE* raw = std::fopen(path.c_str(), "wb");
  if (!raw) throw std::runtime_error("cannot write '" + path.string() + "'");
  detail::FilePtr f(raw);
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng initialisation failed");
  }
  std::vector<png_bytep> rows(img.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("'" + path.string() + "': " + err);
  }
  png_init_io(png, f.get());
  png_set_compression_level(png, 9);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y)
    rows[y] = const_cast<png_bytep>(img.pixels.data() + y * img.width * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(f.get()) != 0) throw std::runtime_error("short write to '" + path.string() + "'");
}

inline Tensor to_tensor(const RgbImage& img) {
  if (img.width == 0 || img.height == 0) throw DataError("image has a zero dimension");
  const std::size_t plane = img.width * img.height;
  std::vector<double> v(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) v[c * plane + i] = img.pixels[i * 3 + c] / 255.0;
  return Tensor({3, img.height, img.width}, std::move(v));
}

// C×H×W in [0,1] (clamped) to 8-bit RGB; a single channel is replicated.
inline RgbImage from_tensor(const Tensor& t) {
  if (t.rank() != 3 || (t.dim(0) != 3 && t.dim(0) != 1)) throw DataError("from_tensor: expected 1×H×W or 3×H×W");
  RgbImage img;
  img.height = t.dim(1);
  img.width = t.dim(2);
  const std::size_t plane = img.width * img.height;
  img.pixels.resize(plane * 3);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = t[(t.dim(0) == 1 ? 0 : c) * plane + i];
      img.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
  return img;
}

inline Tensor load_image(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return to_tensor(read_png(path));
  if (ext == ".jpg" || ext == ".jpeg") return to_tensor(read_jpeg(path));
  throw DataError("unsupported image extension '" + ext + "' for '" + path.string() + "'");
}

// root/<class_name>/<file>.png|jpg. Classes sorted by directory name; each
// image is resized to image_size. Source ids are "<class>/<file>".
inline std::pair<std::vector<LabeledExample>, std::vector<std::string>> load_image_folder(
    const std::filesystem::path& root, std::size_t image_size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw ConfigError("dataset root '" + root.string() + "' is not a directory");
  std::vector<std::string> classes;
  for (const auto& d : fs::directory_iterator(root))
    if (d.is_directory()) classes.push_back(d.path().filename().string());
  std::sort(classes.begin(), classes.end());
  if (classes.size() < 2) throw ConfigError("dataset root '" + root.string() + "' needs at least 2 class folders");
  std::vector<LabeledExample> out;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(root / classes[c])) {
      std::string ext = f.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
      if (f.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) files.push_back(f.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files)
      out.push_back({imageops::resize(load_image(f), image_size), c, classes[c] + "/" + f.filename().string()});
  }
  return {std::move(out), std::move(classes)};
}

}  // namespace fedlora
