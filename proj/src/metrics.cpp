#include "surfmap/metrics.hpp"

#include "surfmap/error.hpp"
#include "surfmap/io.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace surfmap {

namespace {

std::string alpha_key(double alpha) {
  std::ostringstream os;
  os << alpha;
  return os.str();
}

void require_alpha(double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("PCK threshold must be positive and finite");
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << v;
  return os.str();
}

}  // namespace

torch::Tensor uv_distance(const torch::Tensor& pred, const torch::Tensor& gt, bool seam_aware) {
  if (!pred.sizes().equals(gt.sizes()) || pred.size(-1) != 2) throw ShapeError("uv_distance: shape mismatch");
  const auto p = pred.to(torch::kFloat64), g = gt.to(torch::kFloat64);
  auto du = (p.select(-1, 0) - g.select(-1, 0)).abs();
  if (seam_aware) du = torch::minimum(du, 1.0 - du);
  const auto dv = p.select(-1, 1) - g.select(-1, 1);
  return (du * du + dv * dv).sqrt();
}

double pck_uv(const torch::Tensor& pred, const torch::Tensor& gt, const torch::Tensor& mask, double alpha,
              bool seam_aware) {
  require_alpha(alpha);
  const auto d = uv_distance(pred, gt, seam_aware).index({mask});
  if (d.numel() == 0) throw DataError("pck_uv: mask has no foreground pixels");
  return 100.0 * static_cast<double>((d <= alpha).sum().item<int64_t>()) / static_cast<double>(d.numel());
}

double pck_posmap(const PositionMap& pred, const PositionMap& gt, double alpha) {
  require_alpha(alpha);
  if (!pred.grid.sizes().equals(gt.grid.sizes())) throw ShapeError("pck_posmap: shape mismatch");
  if (!torch::equal(pred.validity, gt.validity)) throw DataError("pck_posmap: validity masks differ");
  const auto diff = pred.grid.to(torch::kFloat64) - gt.grid.to(torch::kFloat64);
  const auto d = (diff.select(-1, 0) * diff.select(-1, 0) + diff.select(-1, 1) * diff.select(-1, 1) +
                  diff.select(-1, 2) * diff.select(-1, 2))
                     .sqrt()
                     .index({gt.validity});
  if (d.numel() == 0) throw DataError("pck_posmap: no valid texels");
  return 100.0 * static_cast<double>((d <= alpha).sum().item<int64_t>()) / static_cast<double>(d.numel());
}

double auc(const std::function<double(double)>& pck, int n_thresholds) {
  if (n_thresholds < 2) throw ConfigError("auc: need at least two thresholds");
  const double n = n_thresholds;
  double area = 0.0;
  double prev = pck(1.0 / n);
  for (int i = 2; i <= n_thresholds; ++i) {
    const double cur = pck(i / n);
    area += 0.5 * (prev + cur) / n;
    prev = cur;
  }
  return area / ((n - 1.0) / n);
}

std::function<double(double)> pck_curve(const torch::Tensor& distances) {
  auto sorted = std::get<0>(distances.to(torch::kFloat64).reshape({-1}).sort());
  std::vector<double> d(sorted.data_ptr<double>(), sorted.data_ptr<double>() + sorted.numel());
  if (d.empty()) throw DataError("pck_curve: no samples");
  return [d = std::move(d)](double alpha) {
    const auto hit = std::upper_bound(d.begin(), d.end(), alpha) - d.begin();
    return 100.0 * static_cast<double>(hit) / static_cast<double>(d.size());
  };
}

nlohmann::json PckReport::to_json() const {
  nlohmann::json uv = nlohmann::json::object(), pm = nlohmann::json::object();
  for (const auto& [a, v] : uv_pck) uv[alpha_key(a)] = v;
  for (const auto& [a, v] : posmap_pck) pm[alpha_key(a)] = v;
  return {{"uv_pck", uv},
          {"uv_auc", uv_auc},
          {"posmap_pck", pm},
          {"n_pixels", n_pixels},
          {"n_instances", n_instances},
          {"n_views", n_views}};
}

PckReport PckReport::from_json(const nlohmann::json& j) {
  PckReport r;
  for (const auto& [k, v] : j.at("uv_pck").items()) r.uv_pck[std::stod(k)] = v.get<double>();
  for (const auto& [k, v] : j.at("posmap_pck").items()) r.posmap_pck[std::stod(k)] = v.get<double>();
  r.uv_auc = j.at("uv_auc").get<double>();
  r.n_pixels = j.at("n_pixels").get<int64_t>();
  r.n_instances = j.at("n_instances").get<int64_t>();
  r.n_views = j.value("n_views", int64_t{0});
  return r;
}

bool operator==(const PckReport& a, const PckReport& b) {
  return a.uv_pck == b.uv_pck && a.uv_auc == b.uv_auc && a.posmap_pck == b.posmap_pck && a.n_pixels == b.n_pixels &&
         a.n_instances == b.n_instances && a.n_views == b.n_views;
}

Predictor network_predictor(SurfaceMapNet net) {
  net->eval();
  return [net](const torch::Tensor& images, const InstanceRecord&) mutable {
    torch::NoGradGuard guard;
    return net->forward(images);
  };
}

PckReport evaluate(const Predictor& predictor, const Dataset& dataset, const EvalOptions& options) {
  if (dataset.instances.empty()) throw DataError("evaluate: no instances loaded");
  for (double a : options.alphas) require_alpha(a);

  PckReport report;
  std::vector<torch::Tensor> all_distances;
  std::map<double, double> uv_sum, pm_sum;
  double auc_sum = 0.0;

  for (const auto& inst : dataset.instances) {
    if (inst.views.empty()) continue;
    std::vector<torch::Tensor> images;
    for (const auto& v : inst.views) images.push_back(v.image);
    const auto out = predictor(torch::stack(images), inst);

    std::vector<torch::Tensor> dists;
    std::map<double, double> pm_inst;
    for (size_t k = 0; k < inst.views.size(); ++k) {
      const auto& v = inst.views[k];
      dists.push_back(uv_distance(out.uv[k], v.gt_uv, options.seam_aware).index({v.mask}));
      const auto posmap = compose_posmap(out.residual[k].to(torch::kFloat64),
                                         {dataset.avg_posmap.grid.to(torch::kFloat64), dataset.avg_posmap.validity});
      for (double a : options.alphas) pm_inst[a] += pck_posmap(posmap, inst.gt_posmap, a);
    }
    const double n_views = static_cast<double>(inst.views.size());
    for (double a : options.alphas) pm_sum[a] += pm_inst[a] / n_views;

    auto d = torch::cat(dists);
    report.n_pixels += d.numel();
    report.n_views += static_cast<int64_t>(inst.views.size());
    ++report.n_instances;
    if (options.weighting == Weighting::kInstance) {
      if (d.numel() == 0) throw DataError("evaluate: instance without foreground pixels");
      const auto curve = pck_curve(d);
      for (double a : options.alphas) uv_sum[a] += curve(a);
      auc_sum += auc(curve);
    }
    all_distances.push_back(d);
  }

  const double n_inst = static_cast<double>(report.n_instances);
  for (double a : options.alphas) report.posmap_pck[a] = pm_sum[a] / n_inst;
  if (options.weighting == Weighting::kInstance) {
    for (double a : options.alphas) report.uv_pck[a] = uv_sum[a] / n_inst;
    report.uv_auc = auc_sum / n_inst;
  } else {
    const auto curve = pck_curve(torch::cat(all_distances));
    for (double a : options.alphas) report.uv_pck[a] = curve(a);
    report.uv_auc = auc(curve);
  }
  return report;
}

PckReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::string& split,
                              const std::filesystem::path& dataset_root, const EvalOptions& options) {
  auto ckpt = load_checkpoint(checkpoint);
  std::filesystem::path root = dataset_root;
  if (root.empty()) {
    if (!ckpt.extra.contains("dataset")) throw DataError("checkpoint does not record its dataset; pass one");
    root = ckpt.extra.at("dataset").get<std::string>();
  }
  const auto ds = load_dataset(root, {split});
  if (ds.instances.empty()) throw DataError("split \"" + split + "\" is empty");
  return evaluate(network_predictor(ckpt.net), ds, options);
}

torch::Tensor overlay_uv(const torch::Tensor& image, const torch::Tensor& uv, const torch::Tensor& mask) {
  if (image.dim() != 3 || image.size(2) != 3 || image.scalar_type() != torch::kUInt8) {
    throw ShapeError("overlay_uv: image must be uint8 [H, W, 3]");
  }
  const auto color = torch::stack({uv.select(-1, 0), uv.select(-1, 1), torch::zeros_like(uv.select(-1, 0))}, -1)
                         .to(torch::kFloat64)
                         .clamp(0.0, 1.0) *
                     255.0;
  const auto blended = (0.6 * color + 0.4 * image.to(torch::kFloat64)).round().clamp(0.0, 255.0).to(torch::kUInt8);
  return torch::where(mask.unsqueeze(-1), blended, image);
}

std::array<uint8_t, 3> scalar_colormap(double t) {
  static constexpr double anchors[5][3] = {
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
  t = std::clamp(std::isfinite(t) ? t : 1.0, 0.0, 1.0);
  const double x = t * 4.0;
  const int i = std::min(3, static_cast<int>(std::floor(x)));
  const double f = x - i;
  std::array<uint8_t, 3> out{};
  for (int c = 0; c < 3; ++c) {
    out[c] = static_cast<uint8_t>(std::lround(anchors[i][c] * (1.0 - f) + anchors[i + 1][c] * f));
  }
  return out;
}

torch::Tensor deformation_heatmap(const PositionMap& posmap, const PositionMap& avg) {
  if (!posmap.grid.sizes().equals(avg.grid.sizes())) throw ShapeError("deformation_heatmap: shape mismatch");
  const auto mag = (posmap.grid.to(torch::kFloat64) - avg.grid.to(torch::kFloat64)).norm(2, -1).contiguous();
  const auto valid = (posmap.validity & avg.validity).contiguous();
  const int64_t s0 = mag.size(0), s1 = mag.size(1);
  auto out = torch::zeros({s0, s1, 3}, torch::kUInt8);
  auto m = mag.accessor<double, 2>();
  auto v = valid.accessor<bool, 2>();
  auto o = out.accessor<uint8_t, 3>();
  for (int64_t r = 0; r < s0; ++r) {
    for (int64_t c = 0; c < s1; ++c) {
      if (!v[r][c]) continue;
      const auto rgb = scalar_colormap(m[r][c] / kHeatmapRange);
      for (int k = 0; k < 3; ++k) o[r][c][k] = rgb[k];
    }
  }
  return out;
}

std::string report_table(const std::vector<std::pair<std::string, PckReport>>& rows,
                         const std::vector<double>& alphas) {
  std::ostringstream os;
  os << "| Method |";
  for (double a : alphas) os << " UV-PCK@" << a << " |";
  os << " UV-AUC |";
  for (double a : alphas) os << " PosMap-PCK@" << a << " |";
  os << "\n|---|";
  for (size_t i = 0; i < 2 * alphas.size() + 1; ++i) os << "---|";
  os << "\n";
  for (const auto& [label, r] : rows) {
    os << "| " << label << " |";
    for (double a : alphas) os << " " << (r.uv_pck.count(a) ? fmt(r.uv_pck.at(a)) : "-") << " |";
    os << " " << fmt(r.uv_auc) << " |";
    for (double a : alphas) os << " " << (r.posmap_pck.count(a) ? fmt(r.posmap_pck.at(a)) : "-") << " |";
    os << "\n";
  }
  return os.str();
}

void write_report(const std::filesystem::path& dir, const PckReport& report, const std::string& label,
                  const nlohmann::json& identifiers) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = identifiers;
  j["label"] = label;
  j["report"] = report.to_json();
  io::write_json(dir / "report.json", j);
  std::ostringstream md;
  md << "# Evaluation: " << label << "\n\n";
  md << report_table({{label, report}});
  md << "\nPixels: " << report.n_pixels << ", views: " << report.n_views << ", instances: " << report.n_instances
     << ". Desk-scale budget; values are percentages.\n";
  io::write_text(dir / "report.md", md.str());
}

void write_qualitative(const std::filesystem::path& dir, const Predictor& predictor, const Dataset& dataset,
                       int n) {
  std::filesystem::create_directories(dir);
  int written = 0;
  for (const auto& inst : dataset.instances) {
    for (size_t k = 0; k < inst.views.size() && written < n; ++k, ++written) {
      const auto& v = inst.views[k];
      const auto out = predictor(v.image.unsqueeze(0), inst);
      const auto mask = out.seg_logits[0].squeeze(-1) > 0;
      const std::string stem = "inst" + std::to_string(inst.id) + "_view" + std::to_string(v.index);
      io::write_png(dir / (stem + "_overlay.png"), overlay_uv(v.rgb, out.uv[0], mask));
      io::write_png(dir / (stem + "_overlay_gt.png"), overlay_uv(v.rgb, v.gt_uv, v.mask));
      const PositionMap posmap = compose_posmap(out.residual[0].to(torch::kFloat64),
                                                {dataset.avg_posmap.grid.to(torch::kFloat64), dataset.avg_posmap.validity});
      io::write_png(dir / (stem + "_deformation.png"), deformation_heatmap(posmap, dataset.avg_posmap));
      io::write_png(dir / (stem + "_deformation_gt.png"), deformation_heatmap(inst.gt_posmap, dataset.avg_posmap));
    }
    if (written >= n) break;
  }
}

}  // namespace surfmap
