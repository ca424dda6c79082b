#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace ctrpose {

// 8-bit grayscale PNG of values in [0,1]; each pixel stored as
// round(255 * v) after clamping. Throws IoError.
void write_png_gray(const std::string& path, const Eigen::ArrayXXd& values);

// Inverse of write_png_gray up to quantization: returns values / 255.
Eigen::ArrayXXd read_png_gray(const std::string& path);

// Minimal line plot of y(x) on a white canvas with a framed data area;
// enough to eyeball convergence curves without a plotting stack.
void write_polyline_plot(const std::string& path,
                         const std::vector<double>& xs,
                         const std::vector<double>& ys, int width = 640,
                         int height = 480);

}  // namespace ctrpose
