#include "surfmap/geometry.hpp"

#include "surfmap/error.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <string>

namespace surfmap {

namespace {

torch::Tensor rotation_tensor(const CameraPose& cam, const torch::TensorOptions& opts) {
  auto r = torch::empty({3, 3}, torch::kFloat64);
  auto acc = r.accessor<double, 2>();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) acc[i][j] = cam.rotation(i, j);
  }
  return r.to(opts);
}

torch::Tensor translation_tensor(const CameraPose& cam, const torch::TensorOptions& opts) {
  auto t = torch::tensor({cam.translation.x(), cam.translation.y(), cam.translation.z()},
                         torch::kFloat64);
  return t.to(opts);
}

torch::Tensor to_camera_frame(const torch::Tensor& points, const CameraPose& cam) {
  if (points.size(-1) != 3) throw ShapeError("project: points must have a trailing dim of 3");
  auto opts = points.options().requires_grad(false);
  return torch::matmul(points, rotation_tensor(cam, opts).t()) + translation_tensor(cam, opts);
}

}  // namespace

void CameraPose::validate() const {
  const double ortho_err = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity())
                               .cwiseAbs()
                               .maxCoeff();
  if (!(ortho_err < 1e-6)) throw ShapeError("camera rotation is not orthonormal");
  if (std::abs(rotation.determinant() - 1.0) > 1e-6) {
    throw ShapeError("camera rotation must have determinant +1");
  }
  if (!translation.allFinite()) throw ShapeError("camera translation is not finite");
  if (!(fx > 0.0 && fy > 0.0 && std::isfinite(fx) && std::isfinite(fy))) {
    throw ShapeError("camera focal lengths must be positive");
  }
  if (!(std::isfinite(cx) && std::isfinite(cy))) throw ShapeError("principal point not finite");
  if (width <= 0 || height <= 0) throw ShapeError("camera image size must be positive");
}

nlohmann::json CameraPose::to_json() const {
  nlohmann::json j;
  std::vector<double> r;
  r.reserve(9);
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 3; ++k) r.push_back(rotation(i, k));
  }
  j["R"] = r;
  j["t"] = {translation.x(), translation.y(), translation.z()};
  j["fx"] = fx;
  j["fy"] = fy;
  j["cx"] = cx;
  j["cy"] = cy;
  j["W"] = width;
  j["H"] = height;
  return j;
}

CameraPose CameraPose::from_json(const nlohmann::json& j) {
  CameraPose cam;
  try {
    const auto r = j.at("R").get<std::vector<double>>();
    const auto t = j.at("t").get<std::vector<double>>();
    if (r.size() != 9 || t.size() != 3) throw ShapeError("camera json: R needs 9 and t 3 values");
    for (int i = 0; i < 3; ++i) {
      for (int k = 0; k < 3; ++k) cam.rotation(i, k) = r[3 * i + k];
      cam.translation(i) = t[i];
    }
    cam.fx = j.at("fx").get<double>();
    cam.fy = j.at("fy").get<double>();
    cam.cx = j.at("cx").get<double>();
    cam.cy = j.at("cy").get<double>();
    cam.width = j.at("W").get<int>();
    cam.height = j.at("H").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ShapeError(std::string("camera json: ") + e.what());
  }
  cam.validate();
  return cam;
}

Projection project(const Eigen::Vector3d& point, const CameraPose& cam) {
  const Eigen::Vector3d x = cam.rotation * point + cam.translation;
  Projection out;
  out.depth = x.z();
  out.in_front = x.z() > kMinDepth;
  if (out.in_front) {
    out.pixel = {cam.fx * x.x() / x.z() + cam.cx, cam.fy * x.y() / x.z() + cam.cy};
  }
  return out;
}

Eigen::Vector3d unproject(const Eigen::Vector2d& pixel, double depth, const CameraPose& cam) {
  const Eigen::Vector3d x{(pixel.x() - cam.cx) / cam.fx * depth,
                          (pixel.y() - cam.cy) / cam.fy * depth, depth};
  return cam.rotation.transpose() * (x - cam.translation);
}

TensorProjection project(const torch::Tensor& points, const CameraPose& cam) {
  const auto x = to_camera_frame(points, cam);
  auto depth = x.select(-1, 2);
  auto in_front = depth > kMinDepth;
  // Substitute a harmless depth so the unused branch cannot poison gradients.
  auto safe = torch::where(in_front, depth, torch::ones_like(depth));
  auto px = x.select(-1, 0) / safe * cam.fx + cam.cx;
  auto py = x.select(-1, 1) / safe * cam.fy + cam.cy;
  return {torch::stack({px, py}, -1), depth, in_front};
}

torch::Tensor camera_depth(const torch::Tensor& points, const CameraPose& cam) {
  return to_camera_frame(points, cam).select(-1, 2);
}

torch::Tensor sample_bilinear(const torch::Tensor& grid, const torch::Tensor& coords) {
  const bool batched = grid.dim() == 4;
  if (!batched && grid.dim() != 3) throw ShapeError("sample_bilinear: grid must be [H,W,C]");
  if (coords.size(-1) != 2 || coords.dim() != grid.dim() - 1) {
    throw ShapeError("sample_bilinear: coords must be [N,2] (or [B,N,2] for batched grids)");
  }
  auto g = batched ? grid : grid.unsqueeze(0);
  auto c = batched ? coords : coords.unsqueeze(0);
  if (g.size(0) != c.size(0)) throw ShapeError("sample_bilinear: batch size mismatch");

  const int64_t batch = g.size(0);
  const int64_t h = g.size(1);
  const int64_t w = g.size(2);
  const int64_t ch = g.size(3);
  const int64_t n = c.size(1);

  auto x = c.select(-1, 0).clamp(0.0, 1.0) * static_cast<double>(w - 1);
  auto y = c.select(-1, 1).clamp(0.0, 1.0) * static_cast<double>(h - 1);
  // Lower corner stays inside [0, size-2] so (1, 1) lands on the last texel
  // with weight 1 rather than indexing past the edge.
  // NaN coordinates index texel 0 and propagate through the weights.
  auto x0 = torch::nan_to_num(x.detach(), 0.0).floor().clamp(0.0, static_cast<double>(std::max<int64_t>(w - 2, 0)));
  auto y0 = torch::nan_to_num(y.detach(), 0.0).floor().clamp(0.0, static_cast<double>(std::max<int64_t>(h - 2, 0)));
  auto wx = (x - x0).unsqueeze(-1);
  auto wy = (y - y0).unsqueeze(-1);
  auto ix0 = x0.to(torch::kLong);
  auto iy0 = y0.to(torch::kLong);
  auto ix1 = (ix0 + 1).clamp_max(w - 1);
  auto iy1 = (iy0 + 1).clamp_max(h - 1);

  auto flat = g.reshape({batch, h * w, ch});
  auto gather = [&](const torch::Tensor& iy, const torch::Tensor& ix) {
    auto idx = (iy * w + ix).unsqueeze(-1).expand({batch, n, ch});
    return flat.gather(1, idx);
  };
  auto out = gather(iy0, ix0) * (1 - wx) * (1 - wy) + gather(iy0, ix1) * wx * (1 - wy) +
             gather(iy1, ix0) * (1 - wx) * wy + gather(iy1, ix1) * wx * wy;
  return batched ? out : out.squeeze(0);
}

torch::Tensor sample_uv_wrapped(const torch::Tensor& uv_map, const torch::Tensor& coords,
                                const torch::Tensor& reference_u) {
  if (uv_map.dim() != 3 || uv_map.size(2) != 2) throw ShapeError("sample_uv_wrapped: uv map must be [H,W,2]");
  if (coords.dim() != 2 || coords.size(1) != 2) throw ShapeError("sample_uv_wrapped: coords must be [N,2]");
  if (reference_u.dim() != 1 || reference_u.size(0) != coords.size(0)) {
    throw ShapeError("sample_uv_wrapped: reference_u must be [N]");
  }
  const int64_t h = uv_map.size(0);
  const int64_t w = uv_map.size(1);
  auto x = coords.select(-1, 0).clamp(0.0, 1.0) * static_cast<double>(w - 1);
  auto y = coords.select(-1, 1).clamp(0.0, 1.0) * static_cast<double>(h - 1);
  // NaN coordinates index texel 0 and propagate through the weights.
  auto x0 = torch::nan_to_num(x.detach(), 0.0).floor().clamp(0.0, static_cast<double>(std::max<int64_t>(w - 2, 0)));
  auto y0 = torch::nan_to_num(y.detach(), 0.0).floor().clamp(0.0, static_cast<double>(std::max<int64_t>(h - 2, 0)));
  auto wx = x - x0;
  auto wy = y - y0;
  auto ix0 = x0.to(torch::kLong);
  auto iy0 = y0.to(torch::kLong);
  auto ix1 = (ix0 + 1).clamp_max(w - 1);
  auto iy1 = (iy0 + 1).clamp_max(h - 1);

  const auto flat = uv_map.reshape({h * w, 2});
  const auto ref = reference_u.detach();
  auto corner = [&](const torch::Tensor& iy, const torch::Tensor& ix) {
    auto c = flat.index_select(0, iy * w + ix);
    auto u = c.select(-1, 0);
    u = u - torch::round(u.detach() - ref);
    return torch::stack({u, c.select(-1, 1)}, -1);
  };
  auto wx1 = wx.unsqueeze(-1);
  auto wy1 = wy.unsqueeze(-1);
  return corner(iy0, ix0) * (1 - wx1) * (1 - wy1) + corner(iy0, ix1) * wx1 * (1 - wy1) +
         corner(iy1, ix0) * (1 - wx1) * wy1 + corner(iy1, ix1) * wx1 * wy1;
}

torch::Tensor pixel_to_unit(const torch::Tensor& pixel, int64_t width, int64_t height) {
  auto scale = torch::tensor({1.0 / static_cast<double>(width - 1),
                              1.0 / static_cast<double>(height - 1)},
                             pixel.options().requires_grad(false));
  return pixel * scale;
}

PositionMap compose_posmap(const torch::Tensor& residual, const PositionMap& avg) {
  if (!residual.sizes().equals(avg.grid.sizes())) {
    throw ShapeError("compose_posmap: residual and average position map differ in shape");
  }
  return {avg.grid + residual, avg.validity};
}

PositionMap clamp_to_unit_cube(const PositionMap& posmap) {
  return {posmap.grid.clamp(-0.5, 0.5), posmap.validity};
}

CameraPose generate_orbit_camera(int index, int n_views, double radius, double elevation_deg,
                                 ImageSize image_size, Focal focal) {
  if (n_views <= 0 || index < 0 || index >= n_views) {
    throw ShapeError("orbit camera index " + std::to_string(index) + " out of range [0, " +
                     std::to_string(n_views) + ")");
  }
  if (!(radius > std::sqrt(3.0) / 2.0)) {
    throw ShapeError("orbit radius must exceed the unit-cube circumsphere (0.87)");
  }
  if (!(std::abs(elevation_deg) < 89.0)) throw ShapeError("orbit elevation must be in (-89, 89)");

  const double azimuth = 2.0 * std::numbers::pi * index / n_views;
  const double elevation = elevation_deg * std::numbers::pi / 180.0;
  const Eigen::Vector3d center{radius * std::cos(elevation) * std::cos(azimuth),
                               radius * std::cos(elevation) * std::sin(azimuth),
                               radius * std::sin(elevation)};
  const Eigen::Vector3d up{0.0, 0.0, 1.0};
  const Eigen::Vector3d forward = -center.normalized();
  const Eigen::Vector3d right = forward.cross(up).normalized();
  const Eigen::Vector3d down = forward.cross(right);

  CameraPose cam;
  cam.rotation.row(0) = right.transpose();
  cam.rotation.row(1) = down.transpose();
  cam.rotation.row(2) = forward.transpose();
  cam.translation = -cam.rotation * center;
  cam.fx = focal.fx;
  cam.fy = focal.fy;
  cam.cx = (image_size.width - 1) / 2.0;
  cam.cy = (image_size.height - 1) / 2.0;
  cam.width = image_size.width;
  cam.height = image_size.height;
  return cam;
}

void TemplateMesh::validate() const {
  if (vertices.rows() == 0) throw ShapeError("mesh has no vertices");
  if (uv.rows() != vertices.rows()) throw ShapeError("mesh needs one uv per vertex");
  if (faces.size() > 0 && (faces.minCoeff() < 0 || faces.maxCoeff() >= vertices.rows())) {
    throw ShapeError("mesh face index out of range");
  }
  if (uv.size() > 0 && (uv.minCoeff() < 0.0 || uv.maxCoeff() > 1.0)) {
    throw ShapeError("mesh uv outside [0,1]^2");
  }
}

TemplateMesh normalize_mesh(const TemplateMesh& mesh) {
  if (mesh.vertices.rows() == 0) throw ShapeError("normalize_mesh: empty mesh");
  const Eigen::RowVector3d lo = mesh.vertices.colwise().minCoeff();
  const Eigen::RowVector3d hi = mesh.vertices.colwise().maxCoeff();
  const double extent = (hi - lo).maxCoeff();
  if (!(extent > 0.0)) throw ShapeError("normalize_mesh: degenerate zero-extent mesh");
  const Eigen::RowVector3d mid = 0.5 * (lo + hi);

  TemplateMesh out = mesh;
  out.vertices = (mesh.vertices.rowwise() - mid) / extent;
  return out;
}

}  // namespace surfmap
