#include "surfmap/model.hpp"

#include "surfmap/config_util.hpp"
#include "surfmap/error.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

namespace surfmap {

namespace F = torch::nn::functional;

ModelOutput ModelOutput::slice(int64_t i) const {
  return {uv.narrow(0, i, 1), seg_logits.narrow(0, i, 1), residual.narrow(0, i, 1)};
}

void ModelConfig::validate() const {
  if (encoder_channels.size() < 2) throw ConfigError("model: need at least two encoder stages");
  if (decoder_channels.size() != encoder_channels.size() - 1) {
    throw ConfigError("model: decoder_channels needs one entry per downsampling stage");
  }
  for (auto c : encoder_channels) {
    if (c <= 0) throw ConfigError("model: channel counts must be positive");
  }
  for (auto c : decoder_channels) {
    if (c <= 0) throw ConfigError("model: channel counts must be positive");
  }
  if (residual_seed_size < 1 || posmap_resolution < residual_seed_size ||
      posmap_resolution % residual_seed_size != 0) {
    throw ConfigError("model: posmap_resolution must be a multiple of residual_seed_size");
  }
  int64_t ratio = posmap_resolution / residual_seed_size;
  size_t ups = 0;
  while (ratio > 1) {
    if (ratio % 2 != 0) throw ConfigError("model: posmap_resolution / residual_seed_size must be a power of two");
    ratio /= 2;
    ++ups;
  }
  if (residual_channels.size() != ups + 1) {
    throw ConfigError("model: residual_channels needs log2(posmap_resolution / residual_seed_size) + 1 entries");
  }
  for (auto c : residual_channels) {
    if (c <= 0) throw ConfigError("model: channel counts must be positive");
  }
  if (!(r_max > 0.0) || !std::isfinite(r_max)) throw ConfigError("model: r_max must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"encoder_channels", encoder_channels},
          {"decoder_channels", decoder_channels},
          {"residual_channels", residual_channels},
          {"residual_seed_size", residual_seed_size},
          {"posmap_resolution", posmap_resolution},
          {"r_max", r_max}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  config::reject_unknown(j,
                         {"encoder_channels", "decoder_channels", "residual_channels", "residual_seed_size",
                          "posmap_resolution", "r_max"},
                         "model");
  ModelConfig c;
  config::read(j, "encoder_channels", c.encoder_channels);
  config::read(j, "decoder_channels", c.decoder_channels);
  config::read(j, "residual_channels", c.residual_channels);
  config::read(j, "residual_seed_size", c.residual_seed_size);
  config::read(j, "posmap_resolution", c.posmap_resolution);
  config::read(j, "r_max", c.r_max);
  c.validate();
  return c;
}

SurfaceMapNetImpl::Block SurfaceMapNetImpl::make_block(const std::string& name, int64_t in, int64_t out,
                                                       int64_t stride, bool two_layers) {
  Block blk;
  blk.a = register_module(name + "_a", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1)));
  if (two_layers) {
    blk.b = register_module(name + "_b", torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1)));
  }
  return blk;
}

torch::Tensor SurfaceMapNetImpl::run(Block& blk, const torch::Tensor& x) {
  auto y = torch::relu(blk.a->forward(x));
  return blk.b ? torch::relu(blk.b->forward(y)) : y;
}

SurfaceMapNetImpl::SurfaceMapNetImpl(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& enc = config_.encoder_channels;
  int64_t in = 3;
  for (size_t i = 0; i < enc.size(); ++i) {
    encoder_.push_back(make_block("enc" + std::to_string(i), in, enc[i], i == 0 ? 1 : 2, true));
    in = enc[i];
  }

  auto build_decoder = [&](const std::string& prefix, std::vector<Block>& dec) {
    int64_t prev = enc.back();
    for (size_t i = 0; i < config_.decoder_channels.size(); ++i) {
      const int64_t skip = enc[enc.size() - 2 - i];
      dec.push_back(make_block(prefix + std::to_string(i), prev + skip, config_.decoder_channels[i], 1, false));
      prev = config_.decoder_channels[i];
    }
    return prev;
  };
  const int64_t uv_width = build_decoder("uv_dec", uv_decoder_);
  uv_out_ = register_module("uv_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(uv_width, 2, 1)));
  const int64_t seg_width = build_decoder("seg_dec", seg_decoder_);
  seg_out_ = register_module("seg_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(seg_width, 1, 1)));

  const auto& rc = config_.residual_channels;
  const int64_t seed = config_.residual_seed_size;
  residual_fc_ = register_module("residual_fc", torch::nn::Linear(enc.back(), rc[0] * seed * seed));
  for (size_t i = 1; i < rc.size(); ++i) {
    residual_decoder_.push_back(make_block("res_dec" + std::to_string(i - 1), rc[i - 1], rc[i], 1, false));
  }
  residual_out_ = register_module("residual_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(rc.back(), 3, 1)));
}

torch::Tensor SurfaceMapNetImpl::decode(std::vector<Block>& dec, torch::nn::Conv2d& head,
                                        const std::vector<torch::Tensor>& skips) {
  auto x = skips.back();
  for (size_t i = 0; i < dec.size(); ++i) {
    const auto& skip = skips[skips.size() - 2 - i];
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{skip.size(2), skip.size(3)})
                              .mode(torch::kBilinear)
                              .align_corners(false));
    x = run(dec[i], torch::cat({x, skip}, 1));
  }
  return head->forward(x);
}

ModelOutput SurfaceMapNetImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(3) != 3) throw ShapeError("model: images must be [B, H, W, 3]");
  const int64_t h = images.size(1), w = images.size(2);
  const int64_t stride = config_.stride();
  if (h % stride != 0 || w % stride != 0) {
    throw ShapeError("model: image size must be divisible by " + std::to_string(stride));
  }
  const int64_t b = images.size(0);
  auto x = images.to(torch::kFloat32).permute({0, 3, 1, 2}).contiguous();

  std::vector<torch::Tensor> skips;
  for (auto& blk : encoder_) {
    x = run(blk, x);
    skips.push_back(x);
  }

  ModelOutput out;
  out.uv = torch::sigmoid(decode(uv_decoder_, uv_out_, skips)).permute({0, 2, 3, 1});
  out.seg_logits = decode(seg_decoder_, seg_out_, skips).permute({0, 2, 3, 1});

  const int64_t s = config_.posmap_resolution;
  if (residual_frozen_) {
    out.residual = torch::zeros({b, s, s, 3}, images.options().dtype(torch::kFloat32));
    return out;
  }
  const int64_t seed = config_.residual_seed_size;
  auto z = torch::relu(residual_fc_->forward(skips.back().mean({2, 3})))
               .view({b, config_.residual_channels[0], seed, seed});
  for (auto& blk : residual_decoder_) {
    z = F::interpolate(z, F::InterpolateFuncOptions()
                              .scale_factor(std::vector<double>{2.0, 2.0})
                              .mode(torch::kBilinear)
                              .align_corners(false));
    z = run(blk, z);
  }
  out.residual = (config_.r_max * torch::tanh(residual_out_->forward(z))).permute({0, 2, 3, 1});
  return out;
}

void SurfaceMapNetImpl::init_parameters(uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  torch::NoGradGuard guard;
  for (auto& item : named_parameters()) {
    auto& p = item.value();
    if (p.dim() >= 2) {
      const double fan_in = static_cast<double>(p.numel() / p.size(0));
      const double bound = std::sqrt(6.0 / fan_in);
      p.copy_((torch::rand(p.sizes(), gen, p.options()) * 2.0 - 1.0) * bound);
    } else {
      p.zero_();
    }
  }
  residual_out_->weight.zero_();
  residual_out_->bias.zero_();
}

std::vector<torch::Tensor> SurfaceMapNetImpl::residual_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& item : named_parameters()) {
    if (item.key().starts_with("res")) out.push_back(item.value());
  }
  return out;
}

void SurfaceMapNetImpl::freeze_residual_head() {
  for (auto& p : residual_parameters()) p.set_requires_grad(false);
  residual_frozen_ = true;
}

void save_checkpoint(const std::filesystem::path& path, SurfaceMapNet& net, int64_t step,
                     const nlohmann::json& extra) {
  torch::serialize::OutputArchive archive;
  for (const auto& item : net->named_parameters()) archive.write(item.key(), item.value().detach());
  archive.write("model_config.json", c10::IValue(net->config().to_json().dump()));
  archive.write("extra.json", c10::IValue(extra.dump()));
  archive.write("step", c10::IValue(step));
  archive.write("residual_frozen", c10::IValue(net->residual_frozen()));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  try {
    archive.save_to(path.string());
  } catch (const c10::Error& e) {
    throw DataError("cannot write checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw DataError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  LoadedCheckpoint out;
  c10::IValue v;
  archive.read("model_config.json", v);
  out.net = SurfaceMapNet(ModelConfig::from_json(nlohmann::json::parse(v.toStringRef())));
  archive.read("extra.json", v);
  out.extra = nlohmann::json::parse(v.toStringRef());
  archive.read("step", v);
  out.step = v.toInt();
  torch::NoGradGuard guard;
  for (auto& item : out.net->named_parameters()) {
    torch::Tensor t;
    archive.read(item.key(), t);
    if (!t.sizes().equals(item.value().sizes())) throw DataError("checkpoint shape mismatch at " + item.key());
    item.value().copy_(t);
  }
  archive.read("residual_frozen", v);
  if (v.toBool()) out.net->freeze_residual_head();
  out.net->eval();
  return out;
}

}  // namespace surfmap
