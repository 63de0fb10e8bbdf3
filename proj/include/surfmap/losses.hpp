#pragma once

#include "surfmap/geometry.hpp"
#include "surfmap/model.hpp"

#include "json.hpp"
#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace surfmap {

struct LossWeights {
  double repr = 1.0;
  double vis = 1.0;
  double def = 0.025;
  double uv = 1.0;
  double seg = 1.0;
  // Dense-label terms, used only by supervised training.
  double sup_uv = 0.0;
  double sup_posmap = 0.0;

  void validate() const;
  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
};

// Reference depth for the visibility hinge and for the cross-view occlusion
// test.
enum class DepthReference {
  // Depth of the average surface at the same UV, projected into the camera.
  kAverageAtUv,
  // Depth map of the average surface rendered from the camera, looked up at
  // the reprojected pixel.
  kRenderedAverage,
};

struct LossOptions {
  DepthReference visibility = DepthReference::kAverageAtUv;
  // Drop cross-view terms that land outside the frame, off the target mask,
  // or on occluded surface. Off gives the plain two-way sum.
  bool uv_masking = true;
  DepthReference occlusion = DepthReference::kRenderedAverage;
  double occlusion_tolerance = 0.05;
  // Measure u differences modulo 1.
  bool seam_aware = true;

  void validate() const;
  nlohmann::json to_json() const;
  static LossOptions from_json(const nlohmann::json& j);
};

std::string to_string(DepthReference r);
DepthReference depth_reference_from_string(const std::string& s);

// Per-view weak labels.
struct ViewLabels {
  CameraPose camera;
  torch::Tensor mask;       // bool [H, W]
  torch::Tensor avg_depth;  // float [H, W] average surface rendered from camera, 0 off-surface; may be undefined
};

// Depth of the average position map rendered from `cam` (0 where it does not
// cover the pixel).
torch::Tensor render_average_depth(const PositionMap& avg, const CameraPose& cam);

// Mean over foreground pixels of the squared reprojection distance, in pixel
// units divided by the image width. Points behind the camera cost
// 1 + (H/W)^2. Throws DataError on an empty mask.
torch::Tensor reprojection_loss(const torch::Tensor& uv, const PositionMap& posmap, const CameraPose& cam,
                                const torch::Tensor& mask);

// Mean over foreground pixels of max(0, z - z_ref), z the camera depth of the
// predicted surface point. avg_depth is only read for kRenderedAverage.
torch::Tensor visibility_loss(const torch::Tensor& uv, const PositionMap& posmap, const PositionMap& avg,
                              const CameraPose& cam, const torch::Tensor& mask,
                              DepthReference reference = DepthReference::kAverageAtUv,
                              const torch::Tensor& avg_depth = {});

struct DeformationTerms {
  torch::Tensor smoothness, l2, total;
};

// Smoothness over 4-neighbour pairs of valid texels plus the mean squared
// magnitude over valid texels.
DeformationTerms deformation_terms(const torch::Tensor& residual, const torch::Tensor& validity);
torch::Tensor deformation_reg(const torch::Tensor& residual, const torch::Tensor& validity);

// One side of a view pair: the network's UV map and residual for that view.
struct PairSide {
  torch::Tensor uv;        // [H, W, 2]
  torch::Tensor residual;  // [S, S, 3]
  ViewLabels labels;
};

struct MultiviewTerms {
  torch::Tensor loss;     // mean(1->2) + mean(2->1)
  int64_t n_12 = 0;       // surviving terms per direction
  int64_t n_21 = 0;
};

MultiviewTerms multiview_terms(const PairSide& a, const PairSide& b, const PositionMap& avg,
                               const LossOptions& options = {});
torch::Tensor multiview_uv_loss(const PairSide& a, const PairSide& b, const PositionMap& avg,
                                const LossOptions& options = {});

// Pixelwise binary cross-entropy of the segmentation logits against the mask.
torch::Tensor segmentation_loss(const torch::Tensor& seg_logits, const torch::Tensor& mask);

// Mean over foreground of the squared UV error.
torch::Tensor supervised_uv_loss(const torch::Tensor& uv, const torch::Tensor& gt_uv, const torch::Tensor& mask,
                                 bool seam_aware = true);

// Mean over valid texels of the squared position error.
torch::Tensor supervised_posmap_loss(const torch::Tensor& posmap, const torch::Tensor& gt_posmap,
                                     const torch::Tensor& validity);

// Everything total_loss needs about a batch of B views.
struct LossBatch {
  std::vector<ViewLabels> views;
  // View index pairs (same instance) for the cross-view term.
  std::vector<std::pair<int, int>> pairs;
  torch::Tensor gt_uv;      // [B, H, W, 2]; only for supervised terms
  torch::Tensor gt_posmap;  // [B, S, S, 3]; only for supervised terms
};

struct LossBreakdown {
  torch::Tensor total_tensor;  // differentiable
  double total = 0.0;
  double repr = 0.0, vis = 0.0, def = 0.0, uv = 0.0, seg = 0.0;
  double sup_uv = 0.0, sup_posmap = 0.0;
  LossWeights weights;
  int64_t n_fg_pixels = 0;
  int64_t n_uv_terms = 0;

  // Recombination of the logged terms with the logged weights.
  double recombined() const;
  nlohmann::json to_json() const;
};

// Per-view repr, vis, def and seg averaged over the batch; uv averaged over
// the pairs (0 without pairs); total is the weighted sum. Terms with weight 0
// are still reported but kept out of the graph.
LossBreakdown total_loss(const ModelOutput& outputs, const LossBatch& batch, const PositionMap& avg,
                         const LossWeights& weights, const LossOptions& options = {});

}  // namespace surfmap
