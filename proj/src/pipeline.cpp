#include "surfmap/pipeline.hpp"

#include "surfmap/config_util.hpp"
#include "surfmap/error.hpp"
#include "surfmap/io.hpp"
#include "surfmap/log.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace surfmap {

namespace fs = std::filesystem;

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kFixedMesh:
      return "fixed_mesh";
    case TrainMode::kDeformed:
      return "deformed";
    case TrainMode::kSupervised:
      return "supervised";
  }
  return "?";
}

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "fixed_mesh") return TrainMode::kFixedMesh;
  if (s == "deformed") return TrainMode::kDeformed;
  if (s == "supervised") return TrainMode::kSupervised;
  throw ConfigError("mode must be fixed_mesh, deformed or supervised, got \"" + s + "\"");
}

// ---- RunConfig

void RunConfig::validate() const {
  if (dataset.empty()) throw ConfigError("dataset path is empty");
  if (output_dir.empty()) throw ConfigError("output_dir is empty");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (multiview && batch_size % 2 != 0) throw ConfigError("multiview batches hold pairs: batch_size must be even");
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (!(optimizer.lr > 0.0) || !std::isfinite(optimizer.lr)) throw ConfigError("optimizer.lr must be positive");
  if (!(optimizer.decay > 0.0 && optimizer.decay <= 1.0)) throw ConfigError("optimizer.decay must be in (0, 1]");
  if (!(pairing.max_azimuth_deg > 0.0 && pairing.max_azimuth_deg <= 180.0)) {
    throw ConfigError("pairing.max_azimuth_deg must be in (0, 180]");
  }
  if (ablation_seeds.empty()) throw ConfigError("ablation_seeds is empty");
  weights.validate();
  loss.validate();
  model.validate();
  generator.validate();
}

nlohmann::json RunConfig::to_json() const {
  auto gen = generator.to_json();
  gen["output_dir"] = dataset.string();
  return {{"dataset", dataset.string()},
          {"output_dir", output_dir.string()},
          {"mode", to_string(mode)},
          {"multiview", multiview},
          {"seed", seed},
          {"batch_size", batch_size},
          {"steps", steps},
          {"checkpoint_every", checkpoint_every},
          {"optimizer", {{"lr", optimizer.lr}, {"decay", optimizer.decay}}},
          {"pairing", {{"max_azimuth_deg", pairing.max_azimuth_deg}}},
          {"weights", weights.to_json()},
          {"loss", loss.to_json()},
          {"model", model.to_json()},
          {"generator", gen},
          {"ablation_seeds", ablation_seeds}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  config::reject_unknown(j,
                         {"dataset", "output_dir", "mode", "multiview", "seed", "batch_size", "steps",
                          "checkpoint_every", "optimizer", "pairing", "weights", "loss", "model", "generator",
                          "ablation_seeds"},
                         "config");
  RunConfig c;
  std::string s;
  s = c.dataset.string();
  config::read(j, "dataset", s);
  c.dataset = s;
  s = c.output_dir.string();
  config::read(j, "output_dir", s);
  c.output_dir = s;
  s = to_string(c.mode);
  config::read(j, "mode", s);
  c.mode = train_mode_from_string(s);
  config::read(j, "multiview", c.multiview);
  config::read(j, "seed", c.seed);
  config::read(j, "batch_size", c.batch_size);
  config::read(j, "steps", c.steps);
  config::read(j, "checkpoint_every", c.checkpoint_every);
  config::read(j, "ablation_seeds", c.ablation_seeds);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    config::reject_unknown(o, {"lr", "decay"}, "optimizer");
    config::read(o, "lr", c.optimizer.lr);
    config::read(o, "decay", c.optimizer.decay);
  }
  if (j.contains("pairing")) {
    const auto& p = j.at("pairing");
    config::reject_unknown(p, {"max_azimuth_deg"}, "pairing");
    config::read(p, "max_azimuth_deg", c.pairing.max_azimuth_deg);
  }
  if (j.contains("weights")) c.weights = LossWeights::from_json(j.at("weights"));
  if (j.contains("loss")) c.loss = LossOptions::from_json(j.at("loss"));
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
  if (j.contains("generator")) {
    auto g = j.at("generator");
    if (g.contains("output_dir") && g.at("output_dir") != c.dataset.string()) {
      throw ConfigError("generator.output_dir must equal dataset (or be omitted)");
    }
    g.erase("output_dir");
    c.generator = GeneratorConfig::from_json(g);
  }
  c.generator.output_dir = c.dataset;
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = io::read_json(path);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

LossWeights RunConfig::effective_weights() const {
  LossWeights w = weights;
  switch (mode) {
    case TrainMode::kFixedMesh:
      w.def = 0.0;
      w.sup_uv = w.sup_posmap = 0.0;
      break;
    case TrainMode::kDeformed:
      w.sup_uv = w.sup_posmap = 0.0;
      break;
    case TrainMode::kSupervised:
      w.repr = w.vis = w.def = w.uv = 0.0;
      if (w.sup_uv == 0.0 && w.sup_posmap == 0.0) w.sup_uv = w.sup_posmap = 1.0;
      break;
  }
  if (!multiview) w.uv = 0.0;
  return w;
}

std::string RunConfig::hash() const {
  auto j = to_json();
  j.erase("output_dir");
  j.erase("ablation_seeds");
  return io::fnv1a_hex(j.dump());
}

// ---- sampling

std::mt19937_64 step_rng(uint64_t seed, int64_t step) {
  const auto s = static_cast<uint64_t>(step);
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(s),
                    static_cast<uint32_t>(s >> 32)};
  return std::mt19937_64(seq);
}

namespace {

double azimuth_gap(double a, double b) {
  const double d = std::fmod(std::abs(a - b), 360.0);
  return std::min(d, 360.0 - d);
}

int uniform_index(std::mt19937_64& rng, size_t n) {
  return std::uniform_int_distribution<int>(0, static_cast<int>(n) - 1)(rng);
}

}  // namespace

std::vector<PairSample> sample_pair_batch(const Dataset& dataset, int n_pairs, double max_azimuth_deg,
                                          std::mt19937_64& rng) {
  if (dataset.instances.empty()) throw DataError("no instances to sample pairs from");
  std::vector<PairSample> out;
  out.reserve(n_pairs);
  for (int i = 0; i < n_pairs; ++i) {
    const int inst = uniform_index(rng, dataset.instances.size());
    const auto& views = dataset.instances[inst].views;
    if (views.size() < 2) {
      throw DataError("instance " + std::to_string(dataset.instances[inst].id) + " has fewer than two views");
    }
    const int a = uniform_index(rng, views.size());
    std::vector<int> near;
    int nearest = -1;
    double best = 1e300;
    for (int b = 0; b < static_cast<int>(views.size()); ++b) {
      if (b == a) continue;
      const double g = azimuth_gap(views[a].azimuth_deg, views[b].azimuth_deg);
      if (g <= max_azimuth_deg + 1e-9) near.push_back(b);
      if (g < best) {
        best = g;
        nearest = b;
      }
    }
    const int b = near.empty() ? nearest : near[uniform_index(rng, near.size())];
    out.push_back({inst, a, b});
  }
  return out;
}

// ---- training

SurfaceMapNet make_network(const RunConfig& config) {
  SurfaceMapNet net(config.model);
  net->init_parameters(config.seed);
  if (config.mode == TrainMode::kFixedMesh) net->freeze_residual_head();
  return net;
}

namespace {

struct StepBatch {
  torch::Tensor images;
  LossBatch labels;
  std::vector<std::pair<int, int>> ids;  // (instance id, view index)
};

class DepthCache {
 public:
  explicit DepthCache(const PositionMap& avg) : avg_(avg) {}

  const torch::Tensor& get(const CameraPose& cam) {
    const auto key = cam.to_json().dump();
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, render_average_depth(avg_, cam)).first;
    return it->second;
  }

 private:
  const PositionMap& avg_;
  std::map<std::string, torch::Tensor> cache_;
};

StepBatch build_batch(const Dataset& ds, const RunConfig& cfg, bool supervised, DepthCache& depth, int64_t step) {
  auto rng = step_rng(cfg.seed, step);
  std::vector<std::pair<int, int>> picks;  // (instance index, view index)
  StepBatch batch;
  if (cfg.multiview) {
    for (const auto& p : sample_pair_batch(ds, cfg.batch_size / 2, cfg.pairing.max_azimuth_deg, rng)) {
      batch.labels.pairs.emplace_back(static_cast<int>(picks.size()), static_cast<int>(picks.size()) + 1);
      picks.emplace_back(p.instance, p.view_a);
      picks.emplace_back(p.instance, p.view_b);
    }
  } else {
    for (int i = 0; i < cfg.batch_size; ++i) {
      const int inst = uniform_index(rng, ds.instances.size());
      picks.emplace_back(inst, uniform_index(rng, ds.instances[inst].views.size()));
    }
  }
  std::vector<torch::Tensor> images, gt_uv, gt_posmap;
  for (const auto& [i, k] : picks) {
    const auto& inst = ds.instances[i];
    const auto& v = inst.views[k];
    images.push_back(v.image);
    batch.labels.views.push_back({v.camera, v.mask, depth.get(v.camera)});
    batch.ids.emplace_back(inst.id, v.index);
    if (supervised) {
      gt_uv.push_back(v.gt_uv);
      gt_posmap.push_back(inst.gt_posmap.grid);
    }
  }
  batch.images = torch::stack(images);
  if (supervised) {
    batch.labels.gt_uv = torch::stack(gt_uv);
    batch.labels.gt_posmap = torch::stack(gt_posmap);
  }
  return batch;
}

nlohmann::json ids_json(const std::vector<std::pair<int, int>>& ids) {
  auto j = nlohmann::json::array();
  for (const auto& [i, k] : ids) j.push_back({i, k});
  return j;
}

void check_invariants(const RunConfig& cfg, const ModelOutput& out, const LossBreakdown& br, int64_t step) {
  auto fail = [step](const std::string& what) {
    throw Error("invariant violated at step " + std::to_string(step) + ": " + what);
  };
  if (cfg.mode == TrainMode::kFixedMesh && out.residual.abs().max().item<double>() != 0.0) {
    fail("fixed_mesh residual is nonzero");
  }
  if (!cfg.multiview && (br.weights.uv != 0.0 || br.uv != 0.0)) fail("single-view run has a cross-view term");
  if (cfg.mode == TrainMode::kSupervised &&
      (br.weights.repr != 0.0 || br.weights.vis != 0.0 || br.weights.def != 0.0 || br.weights.uv != 0.0)) {
    fail("supervised run has weak-supervision terms");
  }
  if (cfg.mode != TrainMode::kSupervised && (br.weights.sup_uv != 0.0 || br.weights.sup_posmap != 0.0)) {
    fail("weakly supervised run uses dense labels");
  }
}

nlohmann::json checkpoint_extra(const RunConfig& cfg) {
  return {{"dataset", fs::absolute(cfg.dataset).lexically_normal().string()},
          {"config", cfg.to_json()},
          {"config_hash", cfg.hash()},
          {"mode", to_string(cfg.mode)}};
}

}  // namespace

TrainResult train(const RunConfig& config) {
  config.validate();
  const fs::path out = config.output_dir;
  fs::create_directories(out / "checkpoints");
  auto cfg_json = config.to_json();
  cfg_json["config_hash"] = config.hash();
  io::write_json(out / "config.json", cfg_json);

  const auto ds = load_dataset(config.dataset, {"train"});
  if (ds.instances.empty()) throw DataError("training split of " + config.dataset.string() + " is empty");
  if (ds.avg_posmap.grid.size(0) != config.model.posmap_resolution) {
    throw ConfigError("model.posmap_resolution does not match the dataset position maps");
  }
  const auto& v0 = ds.instances.front().views.front();
  if (v0.image.size(0) % config.model.stride() != 0 || v0.image.size(1) % config.model.stride() != 0) {
    throw ConfigError("image size is not divisible by the network stride");
  }

  const auto weights = config.effective_weights();
  const bool supervised = config.mode == TrainMode::kSupervised;
  auto net = make_network(config);
  net->train();
  std::vector<torch::Tensor> params;
  for (auto& p : net->parameters()) {
    if (p.requires_grad()) params.push_back(p);
  }
  torch::optim::Adam opt(params, torch::optim::AdamOptions(config.optimizer.lr));
  DepthCache depth(ds.avg_posmap);
  const auto extra = checkpoint_extra(config);

  TrainResult result;
  result.metrics_log = out / "metrics.jsonl";
  std::ofstream log_file(result.metrics_log, std::ios::trunc);
  if (!log_file) throw DataError("cannot write " + result.metrics_log.string());

  const auto t0 = std::chrono::steady_clock::now();
  for (int64_t step = 1; step <= config.steps; ++step) {
    const auto batch = build_batch(ds, config, supervised, depth, step);
    const double lr =
        config.optimizer.lr * std::pow(config.optimizer.decay, static_cast<double>(step - 1) / config.steps);
    for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);

    opt.zero_grad();
    const auto output = net->forward(batch.images);
    auto br = total_loss(output, batch.labels, ds.avg_posmap, weights, config.loss);
    if (!std::isfinite(br.total)) {
      const auto dump = out / ("nonfinite_step_" + std::to_string(step) + ".json");
      io::write_json(dump, {{"step", step},
                            {"lr", lr},
                            {"loss", br.to_json()},
                            {"views", ids_json(batch.ids)},
                            {"pairs", batch.labels.pairs},
                            {"uv_finite", torch::isfinite(output.uv).all().item<bool>()},
                            {"residual_finite", torch::isfinite(output.residual).all().item<bool>()}});
      save_checkpoint(out / "checkpoints" / "nonfinite.pt", net, step - 1, extra);
      throw NumericError("non-finite loss at step " + std::to_string(step) + "; batch dumped to " + dump.string());
    }
    br.total_tensor.backward();
    opt.step();
    check_invariants(config, output, br, step);

    nlohmann::json line = {{"step", step}, {"lr", lr}, {"loss", br.to_json()}, {"views", ids_json(batch.ids)}};
    log_file << line.dump() << '\n';
    result.last = br;

    if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step != config.steps) {
      save_checkpoint(out / "checkpoints" / ("step_" + std::to_string(step) + ".pt"), net, step, extra);
    }
    if (!log::quiet() && (step % 100 == 0 || step == config.steps)) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "[" << out.filename().string() << "] step " << step << "/" << config.steps << " loss "
                << br.total << " (" << static_cast<int>(secs) << " s)\n";
    }
  }
  log_file.close();
  result.final_checkpoint = out / "checkpoints" / "final.pt";
  save_checkpoint(result.final_checkpoint, net, config.steps, extra);
  return result;
}

// ---- prediction

Prediction make_prediction(const ModelOutput& single, const PositionMap& avg) {
  if (single.batch() != 1) throw ShapeError("make_prediction expects a single view");
  Prediction p;
  p.uv = single.uv[0].detach().to(torch::kFloat32).contiguous();
  p.mask = (single.seg_logits[0].squeeze(-1) > 0).contiguous();
  p.posmap = clamp_to_unit_cube(compose_posmap(single.residual[0].detach().to(avg.grid.scalar_type()), avg));
  return p;
}

Prediction predict(SurfaceMapNet& net, const torch::Tensor& image, const PositionMap& avg, int64_t expected_height,
                   int64_t expected_width) {
  if (image.dim() != 3 || image.size(2) != 3) throw ShapeError("predict: image must be [H, W, 3]");
  if (image.size(0) != expected_height || image.size(1) != expected_width) {
    throw ShapeError("predict: image is " + std::to_string(image.size(1)) + "x" + std::to_string(image.size(0)) +
                     ", the model was trained at " + std::to_string(expected_width) + "x" +
                     std::to_string(expected_height));
  }
  auto x = image.scalar_type() == torch::kUInt8 ? image.to(torch::kFloat32) / 255.0 : image.to(torch::kFloat32);
  net->eval();
  torch::NoGradGuard guard;
  return make_prediction(net->forward(x.unsqueeze(0)), avg);
}

void export_prediction(const fs::path& dir, const Prediction& p, const torch::Tensor& image_u8) {
  fs::create_directories(dir);
  io::write_f32(dir / "uv.f32", p.uv);
  io::write_png(dir / "mask.png", p.mask.to(torch::kUInt8) * 255);
  write_posmap(dir / "posmap.f32", {p.posmap.grid.to(torch::kFloat32), p.posmap.validity});
  io::write_png(dir / "overlay.png", overlay_uv(image_u8, p.uv, p.mask));
}

fs::path checkpoint_dataset(const LoadedCheckpoint& ckpt) {
  if (!ckpt.extra.contains("dataset")) throw DataError("checkpoint does not record its dataset");
  return ckpt.extra.at("dataset").get<std::string>();
}

// ---- ablation

const std::vector<AblationCell>& ablation_cells() {
  static const std::vector<AblationCell> cells = {
      {"fixed_mesh_single", TrainMode::kFixedMesh, false},
      {"fixed_mesh_multi", TrainMode::kFixedMesh, true},
      {"deformed_single", TrainMode::kDeformed, false},
      {"deformed_multi", TrainMode::kDeformed, true},
      {"supervised", TrainMode::kSupervised, false},
  };
  return cells;
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

PckReport median_report(const std::vector<PckReport>& reports) {
  if (reports.empty()) throw DataError("median_report: no reports");
  PckReport m = reports.front();
  auto column = [&](auto getter) {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(getter(r));
    return median(v);
  };
  for (auto& [a, value] : m.uv_pck) value = column([a](const PckReport& r) { return r.uv_pck.at(a); });
  for (auto& [a, value] : m.posmap_pck) value = column([a](const PckReport& r) { return r.posmap_pck.at(a); });
  m.uv_auc = column([](const PckReport& r) { return r.uv_auc; });
  return m;
}

AblationResult run_ablation_suite(const RunConfig& base) {
  base.validate();
  const fs::path root = base.output_dir;
  fs::create_directories(root);
  const auto test = load_dataset(base.dataset, {"test"});
  if (test.instances.empty()) throw DataError("test split of " + base.dataset.string() + " is empty");

  AblationResult result;
  nlohmann::json summary = {{"budget",
                             {{"steps", base.steps},
                              {"batch_size", base.batch_size},
                              {"lr", base.optimizer.lr},
                              {"decay", base.optimizer.decay}}},
                            {"seeds", base.ablation_seeds},
                            {"cells", nlohmann::json::object()}};

  for (uint64_t seed : base.ablation_seeds) {
    RunConfig cfg = base;
    cfg.seed = seed;
    auto net = make_network(cfg);
    const auto r = evaluate(network_predictor(net), test);
    write_report(root / "untrained" / ("seed_" + std::to_string(seed)), r, "untrained", {{"seed", seed}});
    result.untrained.push_back(r);
  }

  for (const auto& cell : ablation_cells()) {
    std::vector<PckReport> reports;
    nlohmann::json runs = nlohmann::json::array();
    for (uint64_t seed : base.ablation_seeds) {
      RunConfig cfg = base;
      cfg.mode = cell.mode;
      cfg.multiview = cell.multiview;
      cfg.seed = seed;
      cfg.output_dir = root / cell.name / ("seed_" + std::to_string(seed));
      const auto report_path = cfg.output_dir / "report.json";
      const auto ckpt_path = cfg.output_dir / "checkpoints" / "final.pt";
      const std::string hash = cfg.hash();
      PckReport r;
      bool reused = false;
      if (fs::exists(report_path) && fs::exists(ckpt_path)) {
        const auto j = io::read_json(report_path);
        if (j.value("config_hash", "") == hash) {
          r = PckReport::from_json(j.at("report"));
          reused = true;
        }
      }
      if (!reused) {
        train(cfg);
        auto ckpt = load_checkpoint(ckpt_path);
        r = evaluate(network_predictor(ckpt.net), test);
        write_report(cfg.output_dir, r, cell.name + "/seed_" + std::to_string(seed),
                     {{"config_hash", hash}, {"checkpoint_id", io::fnv1a_hex(io::read_bytes(ckpt_path))}});
      } else if (!log::quiet()) {
        std::cerr << "[" << cell.name << "/seed_" << seed << "] reusing existing run\n";
      }
      runs.push_back(r.to_json());
      reports.push_back(r);
    }
    const auto med = median_report(reports);
    write_report(root / cell.name, med, cell.name, {{"seeds", base.ablation_seeds}, {"aggregate", "median"}});
    summary["cells"][cell.name] = {{"median", med.to_json()}, {"runs", runs}};
    result.runs.emplace_back(cell.name, reports);
    result.medians.emplace_back(cell.name, med);
  }

  const auto untrained = median_report(result.untrained);
  summary["untrained"] = untrained.to_json();
  std::vector<std::pair<std::string, PckReport>> rows = {{"untrained", untrained}};
  rows.insert(rows.end(), result.medians.begin(), result.medians.end());
  result.table = report_table(rows);
  io::write_json(root / "ablation.json", summary);
  std::ostringstream md;
  md << "# Ablation\n\nMedian over seeds";
  for (auto s : base.ablation_seeds) md << " " << s;
  md << ". Desk-scale budget: " << base.steps << " steps, batch " << base.batch_size << ", lr "
     << base.optimizer.lr << ". Test split, percentages.\n\n"
     << result.table;
  io::write_text(root / "ablation.md", md.str());
  return result;
}

}  // namespace surfmap
