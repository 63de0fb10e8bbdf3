#pragma once

#include "surfmap/losses.hpp"
#include "surfmap/metrics.hpp"
#include "surfmap/model.hpp"
#include "surfmap/synthgen.hpp"

#include "json.hpp"
#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace surfmap {

enum class TrainMode { kFixedMesh, kDeformed, kSupervised };

std::string to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

struct OptimizerConfig {
  double lr = 1e-3;
  // Exponential schedule: lr * decay^(step / steps). 1 keeps lr constant.
  double decay = 0.1;
};

struct PairingConfig {
  double max_azimuth_deg = 45.0;
};

struct RunConfig {
  std::filesystem::path dataset = "data/desk";
  std::filesystem::path output_dir = "runs/default";
  TrainMode mode = TrainMode::kDeformed;
  bool multiview = true;
  uint64_t seed = 0;
  // Views per step; multiview batches hold batch_size / 2 pairs.
  int batch_size = 8;
  int steps = 2000;
  // 0 writes only the final checkpoint.
  int checkpoint_every = 500;
  OptimizerConfig optimizer;
  PairingConfig pairing;
  LossWeights weights;
  LossOptions loss;
  ModelConfig model;
  // Used by gen-data; output_dir is always `dataset`.
  GeneratorConfig generator;
  // Seeds of the ablation suite.
  std::vector<uint64_t> ablation_seeds = {0, 1, 2};

  void validate() const;
  nlohmann::json to_json() const;
  // Every field optional; unknown fields are a ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  // Weights after the mode rules: fixed_mesh drops the deformation term,
  // supervised keeps only the dense-label and segmentation terms, and
  // single-view drops the cross-view term.
  LossWeights effective_weights() const;
  std::string hash() const;
};

struct PairSample {
  int instance = 0;  // index into Dataset::instances
  int view_a = 0;
  int view_b = 0;
};

// Uniform instance, uniform first view, then a uniform second view among the
// others within max_azimuth_deg. Instances whose views are all farther apart
// fall back to the nearest view. Throws DataError on an instance with fewer
// than two views.
std::vector<PairSample> sample_pair_batch(const Dataset& dataset, int n_pairs, double max_azimuth_deg,
                                          std::mt19937_64& rng);

// Deterministic per-step generator.
std::mt19937_64 step_rng(uint64_t seed, int64_t step);

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path metrics_log;
  LossBreakdown last;
};

// Writes config.json, metrics.jsonl (one LossBreakdown per step) and
// checkpoints/{step_K,final}.pt under config.output_dir. A non-finite loss
// dumps the batch to nonfinite_step_K.json and throws NumericError.
TrainResult train(const RunConfig& config);

// Freshly initialized network for the config, with the mode rules applied.
SurfaceMapNet make_network(const RunConfig& config);

struct Prediction {
  torch::Tensor uv;    // float32 [H, W, 2]
  torch::Tensor mask;  // bool [H, W]
  PositionMap posmap;  // compose(residual, avg), clamped to the unit cube
};

Prediction make_prediction(const ModelOutput& single, const PositionMap& avg);

// Single-image inference. image is uint8 or float [H, W, 3] at the training
// resolution of the dataset; throws ShapeError otherwise.
Prediction predict(SurfaceMapNet& net, const torch::Tensor& image, const PositionMap& avg,
                   int64_t expected_height, int64_t expected_width);

// uv.f32, mask.png, posmap.f32, overlay.png under dir.
void export_prediction(const std::filesystem::path& dir, const Prediction& p, const torch::Tensor& image_u8);

// Dataset root recorded in a checkpoint.
std::filesystem::path checkpoint_dataset(const LoadedCheckpoint& ckpt);

struct AblationCell {
  std::string name;
  TrainMode mode;
  bool multiview;
};

const std::vector<AblationCell>& ablation_cells();

struct AblationResult {
  // Per cell, per seed.
  std::vector<std::pair<std::string, std::vector<PckReport>>> runs;
  // Per cell, metric-wise median over seeds.
  std::vector<std::pair<std::string, PckReport>> medians;
  // Untrained network per seed, evaluated the same way.
  std::vector<PckReport> untrained;
  std::string table;
};

PckReport median_report(const std::vector<PckReport>& reports);

// Trains every cell for every ablation seed with the shared budget, evaluates
// on the test split, writes per-run and per-cell reports and ablation.md /
// ablation.json under base.output_dir. Runs whose report already exists with
// the same config hash are reused.
AblationResult run_ablation_suite(const RunConfig& base);

}  // namespace surfmap
