#include "blobdiff/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <stdexcept>

#include <png.h>

namespace blobdiff {
namespace {

struct FileCloser {
  std::FILE* f = nullptr;
  ~FileCloser() {
    if (f) std::fclose(f);
  }
};

uint8_t to_byte(double v) {
  const double u = (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5;
  return static_cast<uint8_t>(std::lround(u * 255.0));
}

}  // namespace

void write_png(const std::string& path, const Tensor& chw) {
  if (chw.rank() != 3 || (chw.shape[0] != 1 && chw.shape[0] != 3))
    throw std::invalid_argument("write_png: expects [C,h,w] with C of 1 or 3");
  const int C = chw.shape[0], h = chw.shape[1], w = chw.shape[2];
  if (h < 1 || w < 1) throw std::invalid_argument("write_png: empty image");

  FileCloser fc;
  fc.f = std::fopen(path.c_str(), "wb");
  if (!fc.f) throw std::runtime_error("write_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("write_png: png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("write_png: png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png: encode failed for " + path);
  }
  png_init_io(png, fc.f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               C == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<uint8_t> row(static_cast<size_t>(w) * C);
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < C; ++c)
        row[static_cast<size_t>(x) * C + c] = to_byte(chw.data[c * plane + y * w + x]);
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor read_png(const std::string& path) {
  FileCloser fc;
  fc.f = std::fopen(path.c_str(), "rb");
  if (!fc.f) throw std::runtime_error("read_png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("read_png: png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("read_png: png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: decode failed for " + path);
  }
  png_init_io(png, fc.f);
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  std::vector<uint8_t> bytes(static_cast<size_t>(h) * w * 3);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y)
    rows[y] = bytes.data() + static_cast<size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor out({3, static_cast<int>(h), static_cast<int>(w)});
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out.data[c * plane + static_cast<int64_t>(y) * w + x] =
            bytes[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0 * 2.0 - 1.0;
  return out;
}

void write_frame_sequence(const std::string& dir, const Tensor& frames) {
  if (frames.rank() != 4) throw std::invalid_argument("write_frame_sequence: expects [F,C,h,w]");
  std::filesystem::create_directories(dir);
  const int F = frames.shape[0];
  const int64_t plane = frames.numel() / std::max(F, 1);
  for (int f = 0; f < F; ++f) {
    Tensor one({frames.shape[1], frames.shape[2], frames.shape[3]});
    std::copy_n(frames.data.begin() + f * plane, plane, one.data.begin());
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04d.png", f);
    write_png(dir + "/" + name, one);
  }
}

namespace {

constexpr double kPalette[4][3] = {
    {0.12, 0.35, 0.80},  // blue
    {0.85, 0.20, 0.15},  // red
    {0.10, 0.60, 0.25},  // green
    {0.85, 0.55, 0.10},  // orange
};

void put(Tensor& img, int y, int x, const double rgb[3]) {
  const int h = img.shape[1], w = img.shape[2];
  if (y < 0 || y >= h || x < 0 || x >= w) return;
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int c = 0; c < 3; ++c) img.data[c * plane + static_cast<int64_t>(y) * w + x] = 2.0 * rgb[c] - 1.0;
}

void draw_line(Tensor& img, int y0, int x0, int y1, int x1, const double rgb[3]) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  int x = x0, y = y0;
  while (true) {
    put(img, y, x, rgb);
    if (x == x1 && y == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y += sy;
    }
  }
}

}  // namespace

Tensor line_plot(const std::vector<PlotSeries>& series, int h, int w) {
  if (h < 32 || w < 32) throw std::invalid_argument("line_plot: canvas too small");
  if (series.empty()) throw std::invalid_argument("line_plot: no series");
  Tensor img({3, h, w});
  std::fill(img.data.begin(), img.data.end(), 1.0);  // white

  const int margin = 10;
  const int x0 = margin, x1 = w - margin, y0 = margin, y1 = h - margin;
  const double grid[3] = {0.88, 0.88, 0.88};
  const double axis[3] = {0.55, 0.55, 0.55};
  for (int k = 1; k < 4; ++k) {
    const int gy = y0 + (y1 - y0) * k / 4;
    draw_line(img, gy, x0, gy, x1, grid);
    const int gx = x0 + (x1 - x0) * k / 4;
    draw_line(img, y0, gx, y1, gx, grid);
  }
  draw_line(img, y1, x0, y1, x1, axis);
  draw_line(img, y0, x0, y1, x0, axis);

  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  size_t max_n = 0;
  for (const auto& s : series) {
    max_n = std::max(max_n, s.values.size());
    for (double v : s.values) {
      if (!std::isfinite(v)) throw std::invalid_argument("line_plot: non-finite value");
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (max_n < 2) throw std::invalid_argument("line_plot: series need at least 2 points");
  if (hi - lo < 1e-12) {
    hi += 0.5;
    lo -= 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;

  for (size_t si = 0; si < series.size(); ++si) {
    const auto& v = series[si].values;
    if (v.size() < 2) continue;
    const double* rgb = kPalette[si % 4];
    int py = 0, px = 0;
    for (size_t i = 0; i < v.size(); ++i) {
      const double fx = static_cast<double>(i) / (v.size() - 1);
      const double fy = (v[i] - lo) / (hi - lo);
      const int x = x0 + static_cast<int>(std::lround(fx * (x1 - x0)));
      const int y = y1 - static_cast<int>(std::lround(fy * (y1 - y0)));
      if (i > 0) draw_line(img, py, px, y, x, rgb);
      py = y;
      px = x;
    }
    // Legend swatch: a short bar per series in the top-left corner.
    const int ly = y0 + 2 + static_cast<int>(si) * 4;
    for (int lx = x0 + 2; lx < x0 + 12; ++lx) put(img, ly, lx, rgb);
  }
  return img;
}

void save_line_plot(const std::string& path, const std::vector<PlotSeries>& series, int h,
                    int w) {
  write_png(path, line_plot(series, h, w));
}

}  // namespace blobdiff
