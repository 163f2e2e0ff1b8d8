#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "mvagg/tensor.hpp"

namespace mvagg {

struct Vec2 {
  double x = 0, y = 0;
};

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

// 3x3 double matrix, row-major. All projective algebra runs in float64;
// inversion uses the analytic adjugate with a condition-number guard.
struct Mat3 {
  std::array<double, 9> m{};

  static Mat3 identity();
  static Mat3 scaling(double sx, double sy);
  static Mat3 translation(double tx, double ty);
  static Mat3 from_rows(const Vec3& r0, const Vec3& r1, const Vec3& r2);

  double at(int r, int c) const { return m[static_cast<size_t>(r) * 3 + c]; }
  double& at(int r, int c) { return m[static_cast<size_t>(r) * 3 + c]; }

  Mat3 operator*(const Mat3& o) const;
  Vec3 apply(const Vec3& v) const;
  // Applies to (x, y, 1) and perspective-divides; w must not vanish.
  Vec2 project(double x, double y) const;

  double det() const;
  double norm_inf() const;
  Mat3 inverse() const;  // throws GeometryError when singular or cond > 1e12
};

struct CameraCalibration {
  Mat3 intrinsic;    // upper-triangular, positive focal entries
  Mat3 rotation;     // orthonormal, det +1
  Vec3 translation;  // meters
  int image_h = 0, image_w = 0;

  void validate() const;
};

// Quantized ground plane. world_to_grid maps world homogeneous (X, Y, 1) in
// meters to grid coordinates (gx, gy); the grid corner (0,0) is the world
// origin and one cell is cell_size meters.
struct GroundGrid {
  int rows = 0, cols = 0;
  double cell_size = 0.1;
  Mat3 world_to_grid;

  static GroundGrid make(int rows, int cols, double cell_size);
};

// Pixel coordinates of a world point under the pinhole model.
Vec2 world_to_image(const CameraCalibration& cal, const Vec3& world);

// 3x3 map from a horizontal world plane at height k*dz to image pixels.
// At k = 0 this is the camera projection restricted to the ground plane.
Mat3 theta_at_height(const CameraCalibration& cal, int k, double dz);

// Image pixels -> grid coordinates for the plane described by theta.
Mat3 homography(const GroundGrid& grid, const Mat3& theta);

// One homography per height plane k = 0..planes-1, spaced dz apart.
struct HomographyStack {
  std::vector<Mat3> image_to_grid;
  double dz = 0;

  static HomographyStack build(const CameraCalibration& cal, const GroundGrid& grid, int planes,
                               double dz);
};

// S: feature-map pixel -> image pixel (plain axis scaling).
Mat3 feature_scale(int image_h, int image_w, int feat_h, int feat_w);

// Resamples `feature` onto the grid: each cell (r, c) takes the bilinear
// sample of the feature map at feature_to_grid^-1 * (c, r, 1). Samples
// outside the feature extent are zero.
Tensor warp_to_grid(const Tensor& feature, const Mat3& feature_to_grid, int rows, int cols);
Var warp_to_grid(Tape& tape, Var feature, const Mat3& feature_to_grid, int rows, int cols);

// out(p) = image(A^-1 p), bilinear, zero outside. Used by augmentation.
Tensor affine_warp_image(const Tensor& image, const Mat3& A);

CameraCalibration load_calibration(const std::filesystem::path& path);
void save_calibration(const std::filesystem::path& path, const CameraCalibration& cal);

}  // namespace mvagg
