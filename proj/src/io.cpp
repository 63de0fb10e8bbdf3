#include "surfmap/io.hpp"

#include "surfmap/error.hpp"

#include <png.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>

namespace surfmap::io {

namespace {

static_assert(std::endian::native == std::endian::little, "f32le files assume a little-endian host");

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw DataError("cannot open " + path.string());
  return f;
}

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw DataError(std::string("png: ") + msg); }

void png_warn(png_structp, png_const_charp) {}

}  // namespace

void write_png(const fs::path& path, const torch::Tensor& image) {
  if (image.scalar_type() != torch::kUInt8) throw ShapeError("write_png expects uint8 pixels");
  if (!(image.dim() == 2 || (image.dim() == 3 && image.size(2) == 3))) {
    throw ShapeError("write_png expects [H,W] or [H,W,3]");
  }
  const auto img = image.contiguous();
  const int h = static_cast<int>(img.size(0));
  const int w = static_cast<int>(img.size(1));
  const int channels = img.dim() == 2 ? 1 : 3;

  auto file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  try {
    png_init_io(png, file.get());
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, w, h, 8, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const auto* data = img.data_ptr<uint8_t>();
    for (int y = 0; y < h; ++y) {
      png_write_row(png, const_cast<png_bytep>(data + static_cast<size_t>(y) * w * channels));
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
}

torch::Tensor read_png(const fs::path& path) {
  auto file = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  torch::Tensor out;
  try {
    png_init_io(png, file.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    const auto color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
      png_set_expand_gray_1_2_4_to_8(png);
    }
    png_read_update_info(png, info);
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) throw DataError("unsupported png channel count");
    out = channels == 1 ? torch::empty({h, w}, torch::kUInt8) : torch::empty({h, w, 3}, torch::kUInt8);
    auto* data = out.data_ptr<uint8_t>();
    for (int y = 0; y < h; ++y) png_read_row(png, data + static_cast<size_t>(y) * w * channels, nullptr);
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

fs::path sidecar_path(const fs::path& f32_path) {
  auto p = f32_path;
  return p.replace_extension(".json");
}

void write_f32(const fs::path& path, const torch::Tensor& values, const nlohmann::json& extra) {
  const auto v = values.detach().to(torch::kFloat32).contiguous();
  {
    auto file = open_file(path, "wb");
    const auto bytes = static_cast<size_t>(v.numel()) * sizeof(float);
    if (bytes > 0 && std::fwrite(v.data_ptr<float>(), 1, bytes, file.get()) != bytes) {
      throw DataError("short write to " + path.string());
    }
  }
  nlohmann::json side = extra;
  side["shape"] = v.sizes().vec();
  side["dtype"] = "f32le";
  write_json(sidecar_path(path), side);
}

torch::Tensor read_f32(const fs::path& path) {
  const auto side = read_json(sidecar_path(path));
  if (side.value("dtype", "") != "f32le") throw DataError("unsupported dtype in " + path.string());
  const auto shape = side.at("shape").get<std::vector<int64_t>>();
  auto out = torch::empty(shape, torch::kFloat32);
  const auto bytes = static_cast<size_t>(out.numel()) * sizeof(float);
  auto file = open_file(path, "rb");
  if (bytes > 0 && std::fread(out.data_ptr<float>(), 1, bytes, file.get()) != bytes) {
    throw DataError("truncated f32 file " + path.string());
  }
  return out;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw DataError("write failed for " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed json in " + path.string() + ": " + e.what());
  }
}

std::string pack_bits_hex(const torch::Tensor& mask) {
  const auto m = mask.to(torch::kBool).contiguous().flatten();
  const auto* bits = m.data_ptr<bool>();
  const int64_t n = m.numel();
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(static_cast<size_t>((n + 7) / 8 * 2));
  for (int64_t i = 0; i < n; i += 8) {
    unsigned byte = 0;
    for (int64_t b = 0; b < 8; ++b) {
      byte <<= 1;
      if (i + b < n && bits[i + b]) byte |= 1u;
    }
    out.push_back(kHex[byte >> 4]);
    out.push_back(kHex[byte & 0xf]);
  }
  return out;
}

torch::Tensor unpack_bits_hex(const std::string& hex, std::vector<int64_t> shape) {
  auto out = torch::zeros(shape, torch::kBool);
  const int64_t n = out.numel();
  if (static_cast<int64_t>(hex.size()) != (n + 7) / 8 * 2) throw DataError("packed bit length mismatch");
  auto* bits = out.data_ptr<bool>();
  auto nibble = [](char c) -> unsigned {
    if (c >= '0' && c <= '9') return static_cast<unsigned>(c - '0');
    if (c >= 'a' && c <= 'f') return static_cast<unsigned>(c - 'a' + 10);
    throw DataError("bad hex digit in packed bits");
  };
  for (int64_t i = 0; i < n; ++i) {
    const unsigned byte = nibble(hex[2 * (i / 8)]) << 4 | nibble(hex[2 * (i / 8) + 1]);
    bits[i] = (byte >> (7 - i % 8)) & 1u;
  }
  return out;
}

std::string read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw DataError("cannot write " + path.string());
}

std::string fnv1a_hex(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace surfmap::io
