#include "surfmap/losses.hpp"

#include "surfmap/config_util.hpp"
#include "surfmap/error.hpp"
#include "surfmap/log.hpp"
#include "surfmap/synthgen.hpp"

#include <cmath>

namespace surfmap {

using torch::indexing::Slice;

namespace {

// Stand-in depth for pixels the average surface does not cover.
constexpr double kFarDepth = 1e3;

void check_view(const torch::Tensor& uv, const torch::Tensor& mask, const char* where) {
  if (uv.dim() != 3 || uv.size(2) != 2) throw ShapeError(std::string(where) + ": uv must be [H, W, 2]");
  if (mask.dim() != 2 || mask.size(0) != uv.size(0) || mask.size(1) != uv.size(1)) {
    throw ShapeError(std::string(where) + ": mask must be [H, W] matching uv");
  }
}

// Foreground pixel centers [N, 2] as (x, y).
torch::Tensor foreground_pixels(const torch::Tensor& mask, torch::ScalarType dtype) {
  const auto idx = mask.nonzero();
  return torch::stack({idx.select(1, 1), idx.select(1, 0)}, 1).to(dtype);
}

torch::Tensor lookup_reference_depth(const torch::Tensor& avg_depth, const torch::Tensor& pixel) {
  if (!avg_depth.defined()) throw ShapeError("rendered average depth requested but not provided");
  const int64_t h = avg_depth.size(0), w = avg_depth.size(1);
  auto d = avg_depth.to(pixel.scalar_type());
  d = torch::where(d > 0, d, torch::full_like(d, kFarDepth)).unsqueeze(-1);
  return sample_bilinear(d, pixel_to_unit(pixel.detach(), w, h)).squeeze(-1);
}

torch::Tensor wrap_u(const torch::Tensor& diff, bool seam_aware) {
  if (!seam_aware) return diff;
  auto du = diff.select(-1, 0);
  du = du - torch::round(du.detach());
  return torch::stack({du, diff.select(-1, 1)}, -1);
}

void require_foreground(int64_t n, const char* where) {
  if (n == 0) throw DataError(std::string(where) + ": mask has no foreground pixels");
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {repr, vis, def, uv, seg, sup_uv, sup_posmap}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and >= 0");
  }
}

nlohmann::json LossWeights::to_json() const {
  return {{"repr", repr}, {"vis", vis},       {"def", def},
          {"uv", uv},     {"seg", seg},       {"sup_uv", sup_uv},
          {"sup_posmap", sup_posmap}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  config::reject_unknown(j, {"repr", "vis", "def", "uv", "seg", "sup_uv", "sup_posmap"}, "weights");
  LossWeights w;
  config::read(j, "repr", w.repr);
  config::read(j, "vis", w.vis);
  config::read(j, "def", w.def);
  config::read(j, "uv", w.uv);
  config::read(j, "seg", w.seg);
  config::read(j, "sup_uv", w.sup_uv);
  config::read(j, "sup_posmap", w.sup_posmap);
  w.validate();
  return w;
}

std::string to_string(DepthReference r) {
  return r == DepthReference::kAverageAtUv ? "average_at_uv" : "rendered_average";
}

DepthReference depth_reference_from_string(const std::string& s) {
  if (s == "average_at_uv") return DepthReference::kAverageAtUv;
  if (s == "rendered_average") return DepthReference::kRenderedAverage;
  throw ConfigError("unknown depth reference \"" + s + "\" (average_at_uv | rendered_average)");
}

void LossOptions::validate() const {
  if (!(occlusion_tolerance >= 0.0) || !std::isfinite(occlusion_tolerance)) {
    throw ConfigError("occlusion_tolerance must be finite and >= 0");
  }
}

nlohmann::json LossOptions::to_json() const {
  return {{"visibility", to_string(visibility)},
          {"uv_masking", uv_masking},
          {"occlusion", to_string(occlusion)},
          {"occlusion_tolerance", occlusion_tolerance},
          {"seam_aware", seam_aware}};
}

LossOptions LossOptions::from_json(const nlohmann::json& j) {
  config::reject_unknown(j, {"visibility", "uv_masking", "occlusion", "occlusion_tolerance", "seam_aware"},
                         "loss_options");
  LossOptions o;
  std::string vis = to_string(o.visibility), occ = to_string(o.occlusion);
  config::read(j, "visibility", vis);
  config::read(j, "occlusion", occ);
  o.visibility = depth_reference_from_string(vis);
  o.occlusion = depth_reference_from_string(occ);
  config::read(j, "uv_masking", o.uv_masking);
  config::read(j, "occlusion_tolerance", o.occlusion_tolerance);
  config::read(j, "seam_aware", o.seam_aware);
  o.validate();
  return o;
}

torch::Tensor render_average_depth(const PositionMap& avg, const CameraPose& cam) {
  const int64_t s = avg.resolution();
  const auto grid = avg.grid.to(torch::kFloat64).contiguous();
  auto g = grid.accessor<double, 3>();
  TemplateMesh mesh;
  mesh.vertices.resize(s * s, 3);
  mesh.uv.resize(s * s, 2);
  for (int64_t r = 0; r < s; ++r) {
    for (int64_t c = 0; c < s; ++c) {
      const int64_t i = r * s + c;
      mesh.vertices.row(i) << g[r][c][0], g[r][c][1], g[r][c][2];
      mesh.uv.row(i) << texel_coord(c, s), texel_coord(r, s);
    }
  }
  mesh.faces.resize(2 * (s - 1) * (s - 1), 3);
  int64_t f = 0;
  for (int64_t r = 0; r + 1 < s; ++r) {
    for (int64_t c = 0; c + 1 < s; ++c) {
      const int v00 = static_cast<int>(r * s + c), v01 = v00 + 1;
      const int v10 = static_cast<int>(v00 + s), v11 = v10 + 1;
      mesh.faces.row(f++) << v00, v10, v11;
      mesh.faces.row(f++) << v00, v11, v01;
    }
  }
  return rasterize(mesh, cam, cam.forward()).depth;
}

torch::Tensor reprojection_loss(const torch::Tensor& uv, const PositionMap& posmap, const CameraPose& cam,
                                const torch::Tensor& mask) {
  check_view(uv, mask, "reprojection_loss");
  const auto uv_fg = uv.index({mask});
  require_foreground(uv_fg.size(0), "reprojection_loss");
  const auto pts = sample_bilinear(posmap.grid, uv_fg);
  const auto proj = project(pts, cam);
  const double w = static_cast<double>(uv.size(1)), h = static_cast<double>(uv.size(0));
  const auto target = foreground_pixels(mask, proj.pixel.scalar_type());
  const auto sq = ((proj.pixel - target) / w).square().sum(-1);
  const double penalty = 1.0 + (h / w) * (h / w);
  return torch::where(proj.in_front, sq, torch::full_like(sq, penalty)).mean();
}

torch::Tensor visibility_loss(const torch::Tensor& uv, const PositionMap& posmap, const PositionMap& avg,
                              const CameraPose& cam, const torch::Tensor& mask, DepthReference reference,
                              const torch::Tensor& avg_depth) {
  check_view(uv, mask, "visibility_loss");
  const auto uv_fg = uv.index({mask});
  require_foreground(uv_fg.size(0), "visibility_loss");
  const auto pts = sample_bilinear(posmap.grid, uv_fg);
  torch::Tensor z, z_ref;
  if (reference == DepthReference::kAverageAtUv) {
    z = camera_depth(pts, cam);
    z_ref = camera_depth(sample_bilinear(avg.grid.to(pts.scalar_type()), uv_fg), cam);
  } else {
    const auto proj = project(pts, cam);
    z = proj.depth;
    z_ref = lookup_reference_depth(avg_depth, proj.pixel);
  }
  return torch::relu(z - z_ref).mean();
}

DeformationTerms deformation_terms(const torch::Tensor& residual, const torch::Tensor& validity) {
  if (residual.dim() != 3 || residual.size(2) != 3 || !validity.sizes().equals(residual.sizes().slice(0, 2))) {
    throw ShapeError("deformation_reg: residual must be [S, S, 3] with validity [S, S]");
  }
  const auto valid = validity.to(residual.scalar_type());
  const auto dh = (residual.index({Slice(), Slice(1)}) - residual.index({Slice(), Slice(0, -1)})).square().sum(-1);
  const auto vh = valid.index({Slice(), Slice(1)}) * valid.index({Slice(), Slice(0, -1)});
  const auto dv = (residual.index({Slice(1)}) - residual.index({Slice(0, -1)})).square().sum(-1);
  const auto vv = valid.index({Slice(1)}) * valid.index({Slice(0, -1)});
  const auto n_pairs = (vh.sum() + vv.sum()).clamp_min(1.0);
  DeformationTerms t;
  t.smoothness = ((dh * vh).sum() + (dv * vv).sum()) / n_pairs;
  t.l2 = (residual.square().sum(-1) * valid).sum() / valid.sum().clamp_min(1.0);
  t.total = t.smoothness + t.l2;
  return t;
}

torch::Tensor deformation_reg(const torch::Tensor& residual, const torch::Tensor& validity) {
  return deformation_terms(residual, validity).total;
}

namespace {

// Mean over surviving foreground pixels of `from` of the squared UV mismatch
// after transporting through from's surface into `to`. Returns the sum and
// the count so empty directions can be handled by the caller.
std::pair<torch::Tensor, int64_t> transport_direction(const PairSide& from, const PairSide& to,
                                                      const PositionMap& avg, const LossOptions& opt) {
  const auto& mask_from = from.labels.mask;
  const auto uv_from = from.uv.index({mask_from});
  const auto dtype = uv_from.scalar_type();
  const PositionMap surface = compose_posmap(from.residual, {avg.grid.to(from.residual.scalar_type()), avg.validity});
  const auto pts = sample_bilinear(surface.grid, uv_from);
  const auto proj = project(pts, to.labels.camera);
  const int64_t h = to.uv.size(0), w = to.uv.size(1);

  auto keep = proj.in_front;
  if (opt.uv_masking) {
    const auto px = proj.pixel.detach();
    const auto x = px.select(-1, 0), y = px.select(-1, 1);
    keep = keep & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1);
    // All four bilinear corners must be foreground in the target view.
    const auto x0 = x.floor().clamp(0, w - 2).to(torch::kLong);
    const auto y0 = y.floor().clamp(0, h - 2).to(torch::kLong);
    const auto m = to.labels.mask.reshape({-1});
    auto on_mask = m.index({y0 * w + x0}) & m.index({y0 * w + x0 + 1}) & m.index({(y0 + 1) * w + x0}) &
                   m.index({(y0 + 1) * w + x0 + 1});
    keep = keep & on_mask;
    torch::Tensor z_ref;
    if (opt.occlusion == DepthReference::kAverageAtUv) {
      z_ref = camera_depth(sample_bilinear(avg.grid.to(dtype), uv_from), to.labels.camera);
    } else {
      z_ref = lookup_reference_depth(to.labels.avg_depth, px);
    }
    keep = keep & (proj.depth.detach() <= z_ref.detach() + opt.occlusion_tolerance);
  }

  const auto coords = pixel_to_unit(proj.pixel, w, h);
  const auto landing = opt.seam_aware ? sample_uv_wrapped(to.uv, coords, uv_from.select(-1, 0))
                                      : sample_bilinear(to.uv, coords);
  const auto sq = wrap_u(uv_from - landing, opt.seam_aware).square().sum(-1);
  const int64_t n = keep.sum().item<int64_t>();
  return {(sq * keep.to(dtype)).sum(), n};
}

}  // namespace

MultiviewTerms multiview_terms(const PairSide& a, const PairSide& b, const PositionMap& avg,
                               const LossOptions& options) {
  check_view(a.uv, a.labels.mask, "multiview_uv_loss");
  check_view(b.uv, b.labels.mask, "multiview_uv_loss");
  if (!a.uv.sizes().equals(b.uv.sizes())) throw ShapeError("multiview_uv_loss: views differ in size");
  auto [s12, n12] = transport_direction(a, b, avg, options);
  auto [s21, n21] = transport_direction(b, a, avg, options);
  MultiviewTerms t;
  t.n_12 = n12;
  t.n_21 = n21;
  if (n12 == 0 && n21 == 0) log::warn("multiview_uv_loss: view pair shares no visible surface; term is 0");
  auto loss = s12 * 0.0 + s21 * 0.0;
  if (n12 > 0) loss = loss + s12 / static_cast<double>(n12);
  if (n21 > 0) loss = loss + s21 / static_cast<double>(n21);
  t.loss = loss;
  return t;
}

torch::Tensor multiview_uv_loss(const PairSide& a, const PairSide& b, const PositionMap& avg,
                                const LossOptions& options) {
  return multiview_terms(a, b, avg, options).loss;
}

torch::Tensor segmentation_loss(const torch::Tensor& seg_logits, const torch::Tensor& mask) {
  auto logits = seg_logits.dim() == mask.dim() + 1 ? seg_logits.squeeze(-1) : seg_logits;
  if (!logits.sizes().equals(mask.sizes())) throw ShapeError("segmentation_loss: logits and mask differ in shape");
  return torch::binary_cross_entropy_with_logits(logits, mask.to(logits.scalar_type()));
}

torch::Tensor supervised_uv_loss(const torch::Tensor& uv, const torch::Tensor& gt_uv, const torch::Tensor& mask,
                                 bool seam_aware) {
  check_view(uv, mask, "supervised_uv_loss");
  const auto pred = uv.index({mask});
  require_foreground(pred.size(0), "supervised_uv_loss");
  const auto gt = gt_uv.index({mask}).to(pred.scalar_type());
  return wrap_u(pred - gt, seam_aware).square().sum(-1).mean();
}

torch::Tensor supervised_posmap_loss(const torch::Tensor& posmap, const torch::Tensor& gt_posmap,
                                     const torch::Tensor& validity) {
  if (!posmap.sizes().equals(gt_posmap.sizes())) throw ShapeError("supervised_posmap_loss: shape mismatch");
  const auto d = (posmap - gt_posmap.to(posmap.scalar_type())).square().sum(-1);
  const auto valid = validity.to(d.scalar_type());
  return (d * valid).sum() / valid.sum().clamp_min(1.0);
}

double LossBreakdown::recombined() const {
  return weights.repr * repr + weights.vis * vis + weights.def * def + weights.uv * uv + weights.seg * seg +
         weights.sup_uv * sup_uv + weights.sup_posmap * sup_posmap;
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"total", total},   {"repr", repr},     {"vis", vis},
          {"def", def},       {"uv", uv},         {"seg", seg},
          {"sup_uv", sup_uv}, {"sup_posmap", sup_posmap},
          {"weights", weights.to_json()},        {"n_fg_pixels", n_fg_pixels},
          {"n_uv_terms", n_uv_terms}};
}

LossBreakdown total_loss(const ModelOutput& outputs, const LossBatch& batch, const PositionMap& avg,
                         const LossWeights& weights, const LossOptions& options) {
  weights.validate();
  const int64_t b = outputs.batch();
  if (static_cast<int64_t>(batch.views.size()) != b) throw ShapeError("total_loss: batch and outputs differ in size");
  const bool supervised = weights.sup_uv > 0.0 || weights.sup_posmap > 0.0;
  if (supervised && (!batch.gt_uv.defined() || !batch.gt_posmap.defined())) {
    throw ShapeError("total_loss: supervised terms need gt_uv and gt_posmap");
  }

  const auto dtype = outputs.uv.scalar_type();
  const PositionMap avg_t{avg.grid.to(dtype), avg.validity};
  auto zero = outputs.uv.sum() * 0.0;
  torch::Tensor repr = zero, vis = zero, def = zero, seg = zero, sup_uv = zero, sup_pos = zero;
  LossBreakdown out;
  out.weights = weights;

  for (int64_t i = 0; i < b; ++i) {
    const auto& labels = batch.views[i];
    const auto uv = outputs.uv[i];
    const auto residual = outputs.residual[i];
    const auto surface = compose_posmap(residual, avg_t);
    out.n_fg_pixels += labels.mask.sum().item<int64_t>();
    repr = repr + reprojection_loss(uv, surface, labels.camera, labels.mask);
    vis = vis + visibility_loss(uv, surface, avg_t, labels.camera, labels.mask, options.visibility, labels.avg_depth);
    def = def + deformation_reg(residual, avg.validity);
    seg = seg + segmentation_loss(outputs.seg_logits[i], labels.mask);
    if (supervised) {
      sup_uv = sup_uv + supervised_uv_loss(uv, batch.gt_uv[i], labels.mask, options.seam_aware);
      sup_pos = sup_pos + supervised_posmap_loss(surface.grid, batch.gt_posmap[i], avg.validity);
    }
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  repr = repr * inv_b;
  vis = vis * inv_b;
  def = def * inv_b;
  seg = seg * inv_b;
  sup_uv = sup_uv * inv_b;
  sup_pos = sup_pos * inv_b;

  auto uv_term = zero;
  if (!batch.pairs.empty()) {
    for (const auto& [i, j] : batch.pairs) {
      if (i < 0 || j < 0 || i >= b || j >= b || i == j) throw ShapeError("total_loss: bad view pair");
      const PairSide a{outputs.uv[i], outputs.residual[i], batch.views[i]};
      const PairSide c{outputs.uv[j], outputs.residual[j], batch.views[j]};
      auto t = multiview_terms(a, c, avg_t, options);
      out.n_uv_terms += t.n_12 + t.n_21;
      uv_term = uv_term + t.loss;
    }
    uv_term = uv_term / static_cast<double>(batch.pairs.size());
  }

  auto total = zero;
  auto add = [&](double w, const torch::Tensor& term) {
    if (w > 0.0) total = total + w * term;
  };
  add(weights.repr, repr);
  add(weights.vis, vis);
  add(weights.def, def);
  add(weights.uv, uv_term);
  add(weights.seg, seg);
  add(weights.sup_uv, sup_uv);
  add(weights.sup_posmap, sup_pos);

  out.total_tensor = total;
  out.repr = repr.item<double>();
  out.vis = vis.item<double>();
  out.def = def.item<double>();
  out.uv = uv_term.item<double>();
  out.seg = seg.item<double>();
  out.sup_uv = sup_uv.item<double>();
  out.sup_posmap = sup_pos.item<double>();
  out.total = total.item<double>();
  return out;
}

}  // namespace surfmap
