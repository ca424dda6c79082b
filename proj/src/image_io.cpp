#include "ctrpose/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "ctrpose/errors.hpp"

namespace ctrpose {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png_gray(const std::string& path, const Eigen::ArrayXXd& values) {
  const int height = static_cast<int>(values.rows());
  const int width = static_cast<int>(values.cols());
  if (height <= 0 || width <= 0) throw IoError("empty image");

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open " + path + " for writing");

  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_byte> row(width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double v = std::clamp(values(y, x), 0.0, 1.0);
      row[x] = static_cast<png_byte>(std::lround(255.0 * v));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Eigen::ArrayXXd read_png_gray(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path);

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png read failed for " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  // Normalize any input to 8-bit grayscale.
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  if (png_get_color_type(png, info) & PNG_COLOR_MASK_COLOR) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) {
    png_set_palette_to_rgb(png);
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  if (png_get_bit_depth(png, info) < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  png_read_update_info(png, info);

  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  Eigen::ArrayXXd out(height, width);
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  for (int y = 0; y < height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < width; ++x) {
      out(y, x) = row[x] / 255.0;
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

namespace {

void draw_line(Eigen::ArrayXXd* canvas, int x0, int y0, int x1, int y1,
               double value) {
  const int h = static_cast<int>(canvas->rows());
  const int w = static_cast<int>(canvas->cols());
  int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    if (x0 >= 0 && x0 < w && y0 >= 0 && y0 < h) (*canvas)(y0, x0) = value;
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace

void write_polyline_plot(const std::string& path,
                         const std::vector<double>& xs,
                         const std::vector<double>& ys, int width,
                         int height) {
  if (xs.size() != ys.size()) throw ShapeMismatchError("xs/ys size mismatch");
  if (xs.empty()) throw EmptyInputError("nothing to plot");

  Eigen::ArrayXXd canvas = Eigen::ArrayXXd::Constant(height, width, 1.0);
  const int margin = 20;
  const int x0 = margin, x1 = width - 1 - margin;
  const int y0 = margin, y1 = height - 1 - margin;
  draw_line(&canvas, x0, y0, x1, y0, 0.6);
  draw_line(&canvas, x0, y1, x1, y1, 0.6);
  draw_line(&canvas, x0, y0, x0, y1, 0.6);
  draw_line(&canvas, x1, y0, x1, y1, 0.6);

  double xmin = xs[0], xmax = xs[0], ymin = ys[0], ymax = ys[0];
  for (size_t i = 1; i < xs.size(); ++i) {
    xmin = std::min(xmin, xs[i]);
    xmax = std::max(xmax, xs[i]);
    ymin = std::min(ymin, ys[i]);
    ymax = std::max(ymax, ys[i]);
  }
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) ymax = ymin + 1.0;

  auto px = [&](double x) {
    return x0 + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (x1 - x0)));
  };
  auto py = [&](double y) {
    return y1 - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (y1 - y0)));
  };
  for (size_t i = 1; i < xs.size(); ++i) {
    draw_line(&canvas, px(xs[i - 1]), py(ys[i - 1]), px(xs[i]), py(ys[i]), 0.0);
  }
  write_png_gray(path, canvas);
}

}  // namespace ctrpose
