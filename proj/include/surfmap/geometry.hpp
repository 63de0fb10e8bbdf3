#pragma once

#include <Eigen/Core>
#include "json.hpp"
#include <torch/torch.h>

#include <cstdint>

namespace surfmap {

// Points closer to the image plane than this are treated as behind the camera.
inline constexpr double kMinDepth = 1e-6;

struct ImageSize {
  int width = 64;
  int height = 64;
};

struct Focal {
  double fx = 128.0;
  double fy = 128.0;
};

// Pinhole camera mapping frontalized object coordinates into the image.
//
// Pixel (col, row) has its center at the continuous coordinate (col, row), so
// the image spans [0, W-1] x [0, H-1]. Camera frame is x right, y down,
// z forward; depth is the camera-space z before the perspective division.
struct CameraPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  // Throws ShapeError unless the rotation is orthonormal with det +1 and the
  // intrinsics are positive and finite.
  void validate() const;

  Eigen::Vector3d center() const { return -rotation.transpose() * translation; }
  Eigen::Vector3d forward() const { return rotation.row(2).transpose(); }

  nlohmann::json to_json() const;
  static CameraPose from_json(const nlohmann::json& j);
};

struct Projection {
  Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
  double depth = 0.0;
  bool in_front = false;
};

// X_cam = R * point + t; pixel = (fx x/z + cx, fy y/z + cy). A point with
// depth <= kMinDepth comes back with in_front == false and a zero pixel.
Projection project(const Eigen::Vector3d& point, const CameraPose& cam);

// Inverse of project for a known depth.
Eigen::Vector3d unproject(const Eigen::Vector2d& pixel, double depth, const CameraPose& cam);

struct TensorProjection {
  torch::Tensor pixel;     // [..., 2]
  torch::Tensor depth;     // [...]
  torch::Tensor in_front;  // [...] bool
};

// Differentiable batched projection of points [..., 3]. Behind-camera points
// get their division guarded (pixel is finite but meaningless) and are
// reported through in_front so callers can mask them.
TensorProjection project(const torch::Tensor& points, const CameraPose& cam);

// Camera-space depth only; needs no division and is well defined everywhere.
torch::Tensor camera_depth(const torch::Tensor& points, const CameraPose& cam);

// Bilinear lookup of grid [H, W, C] at coords [N, 2] in [0, 1]^2.
//
// u indexes columns and v rows; (0, 0) is the center of texel (0, 0) and
// (1, 1) the center of texel (H-1, W-1). Coordinates outside the unit square
// are clamped. Differentiable in both grid and coords. Batched form: grid
// [B, H, W, C] with coords [B, N, 2].
torch::Tensor sample_bilinear(const torch::Tensor& grid, const torch::Tensor& coords);

// Bilinear lookup of a UV map [H, W, 2] that treats u as periodic: before
// blending, each corner's u is shifted by an integer to lie within 1/2 of
// reference_u [N], so lookups straddling the seam do not average 0 and 1.
torch::Tensor sample_uv_wrapped(const torch::Tensor& uv_map, const torch::Tensor& coords,
                                const torch::Tensor& reference_u);

// Pixel coordinates -> normalized sampling coordinates for an H x W grid.
torch::Tensor pixel_to_unit(const torch::Tensor& pixel, int64_t width, int64_t height);

// S x S grid of 3D points over UV space plus the chart's validity mask.
struct PositionMap {
  torch::Tensor grid;      // [S, S, 3], row index = v, column index = u
  torch::Tensor validity;  // [S, S] bool

  int64_t resolution() const { return grid.size(0); }
};

// D = avg + residual, texelwise. No clamping here so gradients survive; use
// clamp_to_unit_cube when exporting.
PositionMap compose_posmap(const torch::Tensor& residual, const PositionMap& avg);

PositionMap clamp_to_unit_cube(const PositionMap& posmap);

// UV coordinate of texel (row, col) under the corner-aligned convention.
inline double texel_coord(int64_t index, int64_t resolution) {
  return static_cast<double>(index) / static_cast<double>(resolution - 1);
}

// Camera on a horizontal circle (z up) looking at the origin, azimuth
// 2*pi*index/n_views, lifted by elevation_deg.
CameraPose generate_orbit_camera(int index, int n_views, double radius, double elevation_deg,
                                 ImageSize image_size, Focal focal);

struct TemplateMesh {
  Eigen::MatrixX3d vertices;
  Eigen::MatrixX3i faces;
  Eigen::MatrixX2d uv;

  void validate() const;
};

// Centers the bounding box at the origin and scales the largest extent to 1.
TemplateMesh normalize_mesh(const TemplateMesh& mesh);

}  // namespace surfmap
