#pragma once

#include "surfmap/geometry.hpp"
#include "surfmap/model.hpp"
#include "surfmap/synthgen.hpp"

#include "json.hpp"
#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace surfmap {

inline const std::vector<double> kReportAlphas = {0.01, 0.03, 0.1};

// UV distance per pixel; with seam_aware the u difference is taken modulo 1.
torch::Tensor uv_distance(const torch::Tensor& pred, const torch::Tensor& gt, bool seam_aware = true);

// 100 * share of foreground pixels with UV distance <= alpha.
double pck_uv(const torch::Tensor& pred, const torch::Tensor& gt, const torch::Tensor& mask, double alpha,
              bool seam_aware = true);

// 100 * share of valid texels with 3D error <= alpha. Validity masks must match.
double pck_posmap(const PositionMap& pred, const PositionMap& gt, double alpha);

// Trapezoid area under pck(alpha) over alpha_i = i / n_thresholds,
// i = 1..n_thresholds, divided by the covered range (1 - 1/n), in percent.
double auc(const std::function<double(double)>& pck, int n_thresholds = 100);

// PCK curve of a fixed set of distances, usable with auc().
std::function<double(double)> pck_curve(const torch::Tensor& distances);

struct PckReport {
  std::map<double, double> uv_pck;
  double uv_auc = 0.0;
  std::map<double, double> posmap_pck;
  int64_t n_pixels = 0;
  int64_t n_instances = 0;
  int64_t n_views = 0;

  nlohmann::json to_json() const;
  static PckReport from_json(const nlohmann::json& j);
};

bool operator==(const PckReport& a, const PckReport& b);

// Anything that maps a batch of images [B, H, W, 3] to network outputs.
using Predictor = std::function<ModelOutput(const torch::Tensor& images, const InstanceRecord& instance)>;

// Evaluation-mode forward pass of a network, without gradients.
Predictor network_predictor(SurfaceMapNet net);

enum class Weighting { kPixel, kInstance };

struct EvalOptions {
  std::vector<double> alphas = kReportAlphas;
  bool seam_aware = true;
  Weighting weighting = Weighting::kPixel;
};

// PCK over every foreground pixel of every view of the loaded instances.
// Position maps are compose(residual, avg) per view; their PCK is averaged
// over views and then over instances.
PckReport evaluate(const Predictor& predictor, const Dataset& dataset, const EvalOptions& options = {});

// Loads the checkpoint and the named split of the dataset it was trained on
// (or `dataset_root` when given) and evaluates.
PckReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::string& split,
                              const std::filesystem::path& dataset_root = {}, const EvalOptions& options = {});

// Foreground pixels colored (R, G, B) = (u, v, 0) and blended at 0.6 over
// the image; background pixels untouched. image is uint8 [H, W, 3].
torch::Tensor overlay_uv(const torch::Tensor& image, const torch::Tensor& uv, const torch::Tensor& mask);

// Viridis-style ramp through five anchors, input clamped to [0, 1].
std::array<uint8_t, 3> scalar_colormap(double t);

inline constexpr double kHeatmapRange = 0.25;

// Per-texel |posmap - avg| mapped through scalar_colormap over
// [0, kHeatmapRange]; invalid texels black. Returns uint8 [S, S, 3].
torch::Tensor deformation_heatmap(const PositionMap& posmap, const PositionMap& avg);

// Markdown table with one row per labelled report.
std::string report_table(const std::vector<std::pair<std::string, PckReport>>& rows,
                         const std::vector<double>& alphas = kReportAlphas);

// Writes report.json (report plus identifiers) and report.md.
void write_report(const std::filesystem::path& dir, const PckReport& report, const std::string& label,
                  const nlohmann::json& identifiers);

// Overlays and heatmaps for the first n views of the split, under dir.
void write_qualitative(const std::filesystem::path& dir, const Predictor& predictor, const Dataset& dataset,
                       int n);

}  // namespace surfmap
