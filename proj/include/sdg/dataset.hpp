#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sdg/error.hpp"
#include "sdg/idx.hpp"
#include "sdg/kv.hpp"
#include "sdg/palette.hpp"
#include "sdg/rng.hpp"
#include "sdg/sha256.hpp"
#include "sdg/tensor.hpp"

namespace sdg {

constexpr int kImageSide = 28;
constexpr int kImagePixels = kImageSide * kImageSide;

// How a grayscale digit picks its color.
enum class ColorRule {
  kByClass,   // class color (training / validation palettes)
  kCenter,    // every class gets the palette center (majority-palette test)
  kDeranged,  // class colors permuted by a derangement (unseen-palette test)
  kGray,      // all channels carry the intensity (uncolored control)
};

inline const char* color_rule_name(ColorRule r) {
  switch (r) {
    case ColorRule::kByClass: return "class-color";
    case ColorRule::kCenter: return "center-color";
    case ColorRule::kDeranged: return "deranged-color";
    case ColorRule::kGray: return "gray";
  }
  return "?";
}

inline ColorRule color_rule_from_name(const std::string& s) {
  if (s == "class-color") return ColorRule::kByClass;
  if (s == "center-color") return ColorRule::kCenter;
  if (s == "deranged-color") return ColorRule::kDeranged;
  if (s == "gray") return ColorRule::kGray;
  fail(cat("unknown color rule '", s, "'"));
}

struct ColorizedDataset {
  int count = 0;
  std::vector<float> images;         // count * 3 * 28 * 28, row-major CHW
  std::vector<std::uint8_t> labels;  // count
  std::string rule;                  // color_rule_name
  std::string palette_fingerprint;
};

// Multiplies each digit's intensity into an RGB color chosen per the rule.
inline ColorizedDataset colorize(const IdxImages& images, const std::vector<std::uint8_t>& labels, ColorRule rule,
                                 const Palette& palette, const std::vector<int>& derangement) {
  require(images.rows == kImageSide && images.cols == kImageSide,
          cat("colorize: expected 28x28 digits, got ", images.rows, "x", images.cols));
  require(static_cast<std::size_t>(images.count) == labels.size(),
          cat("colorize: ", images.count, " images vs ", labels.size(), " labels"));
  if (rule == ColorRule::kDeranged) validate_derangement(derangement);

  ColorizedDataset out;
  out.count = images.count;
  out.rule = color_rule_name(rule);
  out.palette_fingerprint = palette.fingerprint();
  out.labels = labels;
  out.images.resize(static_cast<std::size_t>(images.count) * 3 * kImagePixels);

  for (int n = 0; n < images.count; ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    Color color;
    switch (rule) {
      case ColorRule::kByClass: color = palette.colors[static_cast<std::size_t>(y)]; break;
      case ColorRule::kCenter: color = palette.center; break;
      case ColorRule::kDeranged: color = palette.colors[static_cast<std::size_t>(derangement[static_cast<std::size_t>(y)])]; break;
      case ColorRule::kGray: color = {1.0, 1.0, 1.0}; break;
    }
    const float* src = images.pixels.data() + static_cast<std::size_t>(n) * kImagePixels;
    float* dst = out.images.data() + static_cast<std::size_t>(n) * 3 * kImagePixels;
    for (int ch = 0; ch < 3; ++ch) {
      const float c = static_cast<float>(color[static_cast<std::size_t>(ch)]);
      for (int i = 0; i < kImagePixels; ++i) dst[ch * kImagePixels + i] = c * src[i];
    }
  }
  return out;
}

// Index lists covering the dataset once; the final partial batch is kept.
inline std::vector<std::vector<int>> batch_indices(int count, int batch_size, bool shuffle, Rng* rng) {
  require(count > 0, "batching an empty dataset");
  require(batch_size > 0, cat("batch size must be positive, got ", batch_size));
  std::vector<int> order(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
  if (shuffle) {
    require(rng != nullptr, "shuffled batching needs an rng");
    rng->shuffle(order.begin(), order.end());
  }
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<std::size_t>((count + batch_size - 1) / batch_size));
  for (int start = 0; start < count; start += batch_size) {
    const int end = std::min(count, start + batch_size);
    out.emplace_back(order.begin() + start, order.begin() + end);
  }
  return out;
}

struct Batch {
  Tensor<float> images;     // (B,3,28,28)
  std::vector<int> labels;  // B
  std::vector<int> indices;
};

inline Batch gather(const ColorizedDataset& ds, const std::vector<int>& idx) {
  Batch b;
  b.indices = idx;
  b.images = Tensor<float>({static_cast<int>(idx.size()), 3, kImageSide, kImageSide});
  b.labels.resize(idx.size());
  const std::size_t stride = 3 * kImagePixels;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const int n = idx[i];
    require(n >= 0 && n < ds.count, cat("batch index ", n, " out of range [0,", ds.count, ")"));
    std::copy(ds.images.begin() + n * stride, ds.images.begin() + (n + 1) * stride, b.images.data() + i * stride);
    b.labels[i] = ds.labels[static_cast<std::size_t>(n)];
  }
  return b;
}

// ---- on-disk format ----------------------------------------------------------
//
// A split directory holds manifest.txt plus two raw payloads:
//   images.f32  float32 little-endian, count*3*28*28 values
//   labels.u8   one byte per sample
// The manifest records the construction (rule, palette, derangement, seed,
// source digests) and the payload SHA-256 digests; rebuilding with identical
// inputs is byte-identical.

namespace detail {

inline void put_u32le(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 24));
}

inline std::vector<unsigned char> f32le_bytes(const std::vector<float>& v) {
  std::vector<unsigned char> out;
  out.reserve(v.size() * 4);
  for (float f : v) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32le(out, bits);
  }
  return out;
}

inline std::vector<float> f32le_parse(const std::vector<unsigned char>& bytes, const std::string& origin) {
  require(bytes.size() % 4 == 0, cat(origin, ": float payload size ", bytes.size(), " not a multiple of 4"));
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const unsigned char* p = bytes.data() + 4 * i;
    const std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
                               (std::uint32_t(p[3]) << 24);
    std::memcpy(&out[i], &bits, 4);
  }
  return out;
}

inline void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), cat("cannot write ", path));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), cat("write failed for ", path));
}

}  // namespace detail

struct DatasetExportInfo {
  std::string split;  // train | val | test-mp | test-up
  std::uint64_t seed = 0;
  std::string source_images_sha256;
  std::string source_labels_sha256;
};

inline void export_dataset(const ColorizedDataset& ds, const Palette& palette, const std::vector<int>& derangement,
                           const DatasetExportInfo& info, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto img_bytes = detail::f32le_bytes(ds.images);
  const std::vector<unsigned char> lbl_bytes(ds.labels.begin(), ds.labels.end());
  detail::write_bytes(dir + "/images.f32", img_bytes);
  detail::write_bytes(dir + "/labels.u8", lbl_bytes);

  KvFile m;
  m.set("format", "sdg-dataset-v1");
  m.set("split", info.split);
  m.set("mode", ds.rule);
  m.set_num("count", ds.count);
  m.set("image_shape", "3x28x28");
  m.set_num("seed", info.seed);
  m.set_num("palette_radius", palette.radius);
  m.set_num("palette_cube_half", palette.cube_half);
  {
    std::ostringstream os;
    os.precision(17);
    os << palette.center[0] << "," << palette.center[1] << "," << palette.center[2];
    m.set("palette_center", os.str());
    for (int k = 0; k < 10; ++k) {
      std::ostringstream cs;
      cs.precision(17);
      const auto& c = palette.colors[static_cast<std::size_t>(k)];
      cs << c[0] << "," << c[1] << "," << c[2];
      m.set(cat("palette_color_", k), cs.str());
    }
  }
  m.set("palette_fingerprint", palette.fingerprint());
  {
    std::string d;
    for (std::size_t i = 0; i < derangement.size(); ++i) d += (i ? "," : "") + std::to_string(derangement[i]);
    m.set("derangement", d);
  }
  if (!info.source_images_sha256.empty()) m.set("source_images_sha256", info.source_images_sha256);
  if (!info.source_labels_sha256.empty()) m.set("source_labels_sha256", info.source_labels_sha256);
  m.set("images_file", "images.f32");
  m.set("images_sha256", sha256_hex(img_bytes));
  m.set("labels_file", "labels.u8");
  m.set("labels_sha256", sha256_hex(lbl_bytes));
  m.save(dir + "/manifest.txt");
}

struct ImportedDataset {
  ColorizedDataset data;
  KvFile manifest;
  std::vector<std::string> warnings;
};

// Verifies payload digests (hard error on mismatch). A caller expecting a
// specific palette passes its fingerprint; disagreement is surfaced as a
// warning, not an error.
inline ImportedDataset import_dataset(const std::string& dir, const std::string& expected_fingerprint = "") {
  ImportedDataset out;
  out.manifest = KvFile::load(dir + "/manifest.txt");
  const auto& m = out.manifest;
  require(m.get("format") == "sdg-dataset-v1", cat(dir, ": unsupported dataset format '", m.get("format"), "'"));
  require(m.get("image_shape") == "3x28x28", cat(dir, ": unsupported image shape ", m.get("image_shape")));

  const auto img_bytes = read_file_bytes(dir + "/" + m.get("images_file"));
  const auto lbl_bytes = read_file_bytes(dir + "/" + m.get("labels_file"));
  const std::string img_sha = sha256_hex(img_bytes);
  const std::string lbl_sha = sha256_hex(lbl_bytes);
  require(img_sha == m.get("images_sha256"),
          cat(dir, ": image payload checksum mismatch (manifest ", m.get("images_sha256"), ", actual ", img_sha, ")"));
  require(lbl_sha == m.get("labels_sha256"),
          cat(dir, ": label payload checksum mismatch (manifest ", m.get("labels_sha256"), ", actual ", lbl_sha, ")"));

  out.data.count = static_cast<int>(m.get_int("count"));
  out.data.rule = m.get("mode");
  out.data.palette_fingerprint = m.get("palette_fingerprint");
  out.data.images = detail::f32le_parse(img_bytes, dir);
  out.data.labels.assign(lbl_bytes.begin(), lbl_bytes.end());
  require(out.data.images.size() == static_cast<std::size_t>(out.data.count) * 3 * kImagePixels,
          cat(dir, ": image payload holds ", out.data.images.size(), " values, expected count*3*28*28"));
  require(out.data.labels.size() == static_cast<std::size_t>(out.data.count),
          cat(dir, ": label payload holds ", out.data.labels.size(), " entries, expected ", out.data.count));

  if (!expected_fingerprint.empty() && expected_fingerprint != out.data.palette_fingerprint) {
    out.warnings.push_back(cat(dir, ": palette fingerprint ", out.data.palette_fingerprint,
                               " differs from expected ", expected_fingerprint));
  }
  return out;
}

}  // namespace sdg
