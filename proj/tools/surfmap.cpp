#include "surfmap/error.hpp"
#include "surfmap/io.hpp"
#include "surfmap/log.hpp"
#include "surfmap/metrics.hpp"
#include "surfmap/pipeline.hpp"
#include "surfmap/synthgen.hpp"

#include "CLI11.hpp"

#include <iostream>

namespace fs = std::filesystem;
using namespace surfmap;

namespace {

// checkpoints/<name>.pt lives two levels below its run directory.
fs::path run_dir_of(const fs::path& checkpoint) {
  const auto parent = checkpoint.parent_path();
  return parent.filename() == "checkpoints" ? parent.parent_path() : parent;
}

int64_t trained_image_size(const LoadedCheckpoint& ckpt) {
  const auto root = checkpoint_dataset(ckpt);
  const auto meta = io::read_json(root / "meta.json");
  return meta.at("resolutions").at("image").at(0).get<int64_t>();
}

int cmd_gen_data(const std::string& config_path, int workers) {
  auto cfg = RunConfig::load(config_path);
  if (workers > 0) cfg.generator.workers = workers;
  generate_dataset(cfg.generator);
  std::cout << "dataset written to " << cfg.dataset.string() << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& output_dir, long long seed, int steps) {
  auto cfg = RunConfig::load(config_path);
  if (!output_dir.empty()) cfg.output_dir = output_dir;
  if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
  if (steps > 0) cfg.steps = steps;
  cfg.validate();
  const auto r = train(cfg);
  std::cout << "final checkpoint: " << r.final_checkpoint.string() << "\nmetrics log: " << r.metrics_log.string()
            << "\nfinal loss: " << r.last.total << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& split, const std::string& dataset,
             const std::string& out, const std::string& weighting, bool no_seam) {
  EvalOptions opt;
  if (weighting == "instance") {
    opt.weighting = Weighting::kInstance;
  } else if (weighting != "pixel") {
    throw ConfigError("weighting must be pixel or instance");
  }
  opt.seam_aware = !no_seam;
  auto ckpt = load_checkpoint(checkpoint);
  const fs::path root = dataset.empty() ? checkpoint_dataset(ckpt) : fs::path(dataset);
  const auto ds = load_dataset(root, {split});
  if (ds.instances.empty()) throw DataError("split \"" + split + "\" is empty");
  const auto report = evaluate(network_predictor(ckpt.net), ds, opt);
  const fs::path dir = out.empty() ? run_dir_of(checkpoint) / ("eval_" + split) : fs::path(out);
  write_report(dir, report, fs::path(checkpoint).filename().string() + " on " + split,
               {{"config_hash", ckpt.extra.value("config_hash", "")},
                {"checkpoint_id", io::fnv1a_hex(io::read_bytes(checkpoint))},
                {"checkpoint", checkpoint},
                {"split", split},
                {"weighting", weighting},
                {"seam_aware", opt.seam_aware}});
  std::cout << report_table({{split, report}}, opt.alphas) << "report: " << (dir / "report.json").string() << "\n";
  return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& image_path, const std::string& out) {
  auto ckpt = load_checkpoint(checkpoint);
  const auto avg = read_posmap(checkpoint_dataset(ckpt) / "avg_posmap.f32");
  const auto image = io::read_png(image_path);
  if (image.dim() != 3 || image.size(2) != 3) throw ShapeError("predict: expected an RGB image");
  const int64_t size = trained_image_size(ckpt);
  const auto p = predict(ckpt.net, image, avg, size, size);
  export_prediction(out, p, image);
  std::cout << "prediction written to " << out << "\n";
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& output_dir) {
  auto cfg = RunConfig::load(config_path);
  if (!output_dir.empty()) cfg.output_dir = output_dir;
  const auto r = run_ablation_suite(cfg);
  std::cout << r.table << "written to " << (cfg.output_dir / "ablation.md").string() << "\n";
  return 0;
}

int cmd_overlays(const std::string& checkpoint, int n, const std::string& split, const std::string& out) {
  auto ckpt = load_checkpoint(checkpoint);
  const auto ds = load_dataset(checkpoint_dataset(ckpt), {split});
  if (ds.instances.empty()) throw DataError("split \"" + split + "\" is empty");
  const fs::path dir = out.empty() ? run_dir_of(checkpoint) / "qualitative" : fs::path(out);
  write_qualitative(dir, network_predictor(ckpt.net), ds, n);
  std::cout << "overlays written to " << dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense surface mapping from weak supervision: data, training, evaluation."};
  app.require_subcommand(1);
  int threads = 1;
  bool quiet = false;
  app.add_option("--threads", threads, "Intra-op threads (results are bit-stable per thread count)")
      ->check(CLI::PositiveNumber);
  app.add_flag("-q,--quiet", quiet, "Suppress progress and warnings");

  std::string config, output_dir, checkpoint, split = "test", dataset, out, image, weighting = "pixel";
  int workers = 0, steps = 0, n = 8;
  long long seed = -1;
  bool no_seam = false;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic multi-view dataset");
  gen->add_option("--config", config, "Run configuration (JSON)")->required();
  gen->add_option("--workers", workers, "Generator threads (output does not depend on it)");

  auto* tr = app.add_subcommand("train", "Train one model");
  tr->add_option("--config", config, "Run configuration (JSON)")->required();
  tr->add_option("--output-dir", output_dir, "Override output_dir");
  tr->add_option("--seed", seed, "Override seed");
  tr->add_option("--steps", steps, "Override steps");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--split", split, "train, val or test");
  ev->add_option("--dataset", dataset, "Dataset root (default: the one the checkpoint was trained on)");
  ev->add_option("--out", out, "Report directory (default: <run>/eval_<split>)");
  ev->add_option("--weighting", weighting, "pixel or instance");
  ev->add_flag("--no-seam", no_seam, "Plain Euclidean UV distance");

  auto* pr = app.add_subcommand("predict", "Single-image inference");
  pr->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  pr->add_option("--image", image, "RGB PNG at the training resolution")->required();
  pr->add_option("--out", out, "Output directory")->required();

  auto* ab = app.add_subcommand("ablate", "Train and evaluate every ablation cell");
  ab->add_option("--config", config, "Base run configuration (JSON)")->required();
  ab->add_option("--output-dir", output_dir, "Override output_dir");

  auto* ov = app.add_subcommand("overlays", "UV overlays and deformation heatmaps");
  ov->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ov->add_option("--n", n, "Number of views")->check(CLI::PositiveNumber);
  ov->add_option("--split", split, "train, val or test");
  ov->add_option("--out", out, "Output directory (default: <run>/qualitative)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  torch::set_num_threads(threads);
  log::quiet() = quiet;
  try {
    if (*gen) return cmd_gen_data(config, workers);
    if (*tr) return cmd_train(config, output_dir, seed, steps);
    if (*ev) return cmd_eval(checkpoint, split, dataset, out, weighting, no_seam);
    if (*pr) return cmd_predict(checkpoint, image, out);
    if (*ab) return cmd_ablate(config, output_dir);
    if (*ov) return cmd_overlays(checkpoint, n, split, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
