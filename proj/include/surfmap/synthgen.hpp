#pragma once

#include "surfmap/geometry.hpp"

#include "json.hpp"
#include <Eigen/Core>
#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

namespace surfmap {

// One member of the procedural category: a sphere with a radial harmonic
// displacement
//   r(theta, phi) = base_radius * (1 + sum_k a_k sin(k theta + p_k) sin(k phi + q_k))
// where theta is the polar angle from +z and phi the azimuth from +x.
struct InstanceSpec {
  uint64_t seed = 0;
  int n_harmonics = 3;
  double amplitude = 0.1;  // a_max; each |a_k| <= a_max / K
  double base_radius = 0.35;

  void validate() const;
};

struct HarmonicShape {
  double base_radius = 0.35;
  std::vector<double> a, p, q;

  static HarmonicShape from_spec(const InstanceSpec& spec);

  double radius(double theta, double phi) const;
  Eigen::Vector3d point(double theta, double phi) const;
};

// Chart: u = phi / 2pi, v = theta / pi.
inline double chart_theta(double v) { return std::numbers::pi * v; }
inline double chart_phi(double u) { return 2.0 * std::numbers::pi * u; }

struct Instance {
  TemplateMesh mesh;
  PositionMap posmap;  // float64 [S, S, 3]; pole rows invalid
};

// sphere_resolution is the number of polar rings; the mesh uses twice as many
// azimuthal segments. Seam and pole vertices are duplicated per column so every
// triangle carries a consistent UV chart.
Instance make_instance(const InstanceSpec& spec, int sphere_resolution, int posmap_resolution);

// Validity mask of the equirectangular chart: everything except pole rows.
torch::Tensor chart_validity(int posmap_resolution);

struct ShadingParams {
  double ambient = 0.3;
  double diffuse = 0.7;
  double specular = 0.2;
  double shininess = 32.0;
};

struct RenderResult {
  torch::Tensor rgb;    // uint8 [H, W, 3]
  torch::Tensor mask;   // bool [H, W]
  torch::Tensor depth;  // float32 [H, W], 0 on background
  torch::Tensor uv;     // float32 [H, W, 2], u in [0, 1) (seam at u = 0), 0 on background
};

// Fixed albedo colormap of the UV chart; continuous across the u seam.
Eigen::Vector3d uv_albedo(double u, double v);

// Z-buffered rasterization with perspective-correct attribute interpolation
// and Blinn-Phong shading. light_dir is the direction the directional light
// travels (world frame). Throws DataError if no triangle lands in front of the
// camera.
RenderResult rasterize(const TemplateMesh& mesh, const CameraPose& cam,
                       const Eigen::Vector3d& light_dir, const ShadingParams& shading = {});

struct GeneratorConfig {
  std::filesystem::path output_dir = "data/desk";
  int n_instances = 64;
  int n_views = 24;
  int image_size = 64;
  int posmap_resolution = 64;
  int sphere_resolution = 64;
  double orbit_radius = 2.0;
  double elevation_deg = 15.0;
  double focal = 128.0;
  int n_harmonics = 3;
  double amplitude = 0.1;
  double base_radius = 0.35;
  uint64_t seed = 0;
  double train_fraction = 0.75;
  double val_fraction = 0.125;
  int workers = 1;
  ShadingParams shading;

  void validate() const;
  nlohmann::json to_json() const;
  // Unknown keys are a ConfigError.
  static GeneratorConfig from_json(const nlohmann::json& j);
};

struct DatasetSplits {
  std::vector<int> train, val, test;

  const std::vector<int>& get(const std::string& name) const;
};

uint64_t instance_seed(uint64_t dataset_seed, int instance_id);
DatasetSplits make_splits(const GeneratorConfig& config);

// Writes the full on-disk layout under config.output_dir. Output bytes do not
// depend on config.workers.
void generate_dataset(const GeneratorConfig& config);

struct ViewRecord {
  int index = 0;
  double azimuth_deg = 0.0;
  torch::Tensor image;  // float32 [H, W, 3] in [0, 1]
  torch::Tensor rgb;    // uint8 [H, W, 3], as stored
  torch::Tensor mask;   // bool [H, W]
  torch::Tensor depth;  // float32 [H, W]
  torch::Tensor gt_uv;  // float32 [H, W, 2]
  CameraPose camera;
};

struct InstanceRecord {
  int id = 0;
  PositionMap gt_posmap;  // float32
  std::vector<ViewRecord> views;
};

struct Dataset {
  std::filesystem::path root;
  GeneratorConfig config;
  DatasetSplits splits;
  PositionMap avg_posmap;  // float32
  std::vector<InstanceRecord> instances;

  const InstanceRecord& instance(int id) const;
};

// Loads meta, the average position map and the instances of the named splits
// ("train", "val", "test"; empty list loads every split).
Dataset load_dataset(const std::filesystem::path& root, const std::vector<std::string>& splits = {});

PositionMap read_posmap(const std::filesystem::path& f32_path);
void write_posmap(const std::filesystem::path& f32_path, const PositionMap& posmap);

}  // namespace surfmap
