#pragma once

#include "json.hpp"
#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <vector>

namespace surfmap::io {

namespace fs = std::filesystem;

// 8-bit PNG with 1 (gray) or 3 (RGB) channels. Tensor is uint8 [H, W] or
// [H, W, 3]. Output is deterministic: no timestamps, fixed compression.
void write_png(const fs::path& path, const torch::Tensor& image);
torch::Tensor read_png(const fs::path& path);

// Raw little-endian float32 array plus "<stem>.json" sidecar holding
// {"shape": [...], "dtype": "f32le"} merged with `extra`.
void write_f32(const fs::path& path, const torch::Tensor& values,
               const nlohmann::json& extra = nlohmann::json::object());
torch::Tensor read_f32(const fs::path& path);

fs::path sidecar_path(const fs::path& f32_path);

void write_json(const fs::path& path, const nlohmann::json& j);
nlohmann::json read_json(const fs::path& path);

// Row-major boolean mask packed MSB-first into bytes, hex encoded.
std::string pack_bits_hex(const torch::Tensor& mask);
torch::Tensor unpack_bits_hex(const std::string& hex, std::vector<int64_t> shape);

std::string read_bytes(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

// 64-bit FNV-1a digest as 16 hex digits; stable across platforms.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace surfmap::io
