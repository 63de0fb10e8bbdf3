#pragma once

#include "json.hpp"
#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace surfmap {

// Batched network outputs, channels last.
struct ModelOutput {
  torch::Tensor uv;          // [B, H, W, 2] in [0, 1]
  torch::Tensor seg_logits;  // [B, H, W, 1]
  torch::Tensor residual;    // [B, S, S, 3] in [-r_max, r_max]

  int64_t batch() const { return uv.size(0); }
  // View i as a batch of one.
  ModelOutput slice(int64_t i) const;
};

struct ModelConfig {
  // One encoder stage per entry; stage 0 keeps full resolution, every later
  // stage halves it.
  std::vector<int64_t> encoder_channels = {12, 24, 48, 64};
  // Decoder widths from the bottleneck upwards; one entry per upsampling.
  std::vector<int64_t> decoder_channels = {32, 16, 12};
  std::vector<int64_t> residual_channels = {16, 16, 8, 8};
  int64_t residual_seed_size = 8;  // spatial size of the residual head's latent grid
  int64_t posmap_resolution = 64;
  double r_max = 0.25;

  int64_t stride() const { return int64_t{1} << (encoder_channels.size() - 1); }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

class SurfaceMapNetImpl : public torch::nn::Module {
 public:
  explicit SurfaceMapNetImpl(ModelConfig config);

  // images: [B, H, W, 3] float in [0, 1], H and W divisible by the stride.
  ModelOutput forward(const torch::Tensor& images);

  // Fan-in scaled uniform weights from a generator seeded with `seed`, zero
  // biases, and a zero final residual layer.
  void init_parameters(uint64_t seed);

  // Freezes the residual head (no gradients) and pins its output to zero.
  void freeze_residual_head();
  bool residual_frozen() const { return residual_frozen_; }

  // Named parameters of the residual head only.
  std::vector<torch::Tensor> residual_parameters() const;

  const ModelConfig& config() const { return config_; }

 private:
  struct Block {
    torch::nn::Conv2d a{nullptr}, b{nullptr};
  };
  Block make_block(const std::string& name, int64_t in, int64_t out, int64_t stride, bool two_layers);
  static torch::Tensor run(Block& blk, const torch::Tensor& x);
  torch::Tensor decode(std::vector<Block>& dec, torch::nn::Conv2d& head,
                       const std::vector<torch::Tensor>& skips);

  ModelConfig config_;
  std::vector<Block> encoder_;
  std::vector<Block> uv_decoder_, seg_decoder_;
  torch::nn::Conv2d uv_out_{nullptr}, seg_out_{nullptr};
  torch::nn::Linear residual_fc_{nullptr};
  std::vector<Block> residual_decoder_;
  torch::nn::Conv2d residual_out_{nullptr};
  bool residual_frozen_ = false;
};
TORCH_MODULE(SurfaceMapNet);

// Single-file archive: every parameter under its hierarchical name, plus the
// model config as JSON text and the training step.
void save_checkpoint(const std::filesystem::path& path, SurfaceMapNet& net, int64_t step,
                     const nlohmann::json& extra = {});

struct LoadedCheckpoint {
  SurfaceMapNet net{nullptr};
  int64_t step = 0;
  nlohmann::json extra;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace surfmap
