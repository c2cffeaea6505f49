#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "sdg/error.hpp"

namespace sdg {

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  require(in.good(), cat("cannot open ", path));
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<unsigned char> buf(size);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
  require(in.gcount() == static_cast<std::streamsize>(size), cat("short read on ", path));
  return buf;
}

namespace detail {

inline std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

}  // namespace detail

struct IdxImages {
  int count = 0;
  int rows = 0;
  int cols = 0;
  std::vector<float> pixels;  // count*rows*cols, scaled to [0,1]
};

// IDX3 unsigned-byte image file (big-endian header, magic 0x00000803).
inline IdxImages parse_idx_images(const std::vector<unsigned char>& buf, const std::string& origin = "<memory>") {
  require(buf.size() >= 16, cat(origin, ": truncated idx image header (", buf.size(), " bytes)"));
  const std::uint32_t magic = detail::be32(buf.data());
  require(magic == 0x00000803u,
          cat(origin, ": bad idx image magic 0x", std::hex, magic, " (expected 0x803)"));
  IdxImages out;
  out.count = static_cast<int>(detail::be32(buf.data() + 4));
  out.rows = static_cast<int>(detail::be32(buf.data() + 8));
  out.cols = static_cast<int>(detail::be32(buf.data() + 12));
  const std::size_t expect = 16 + static_cast<std::size_t>(out.count) * out.rows * out.cols;
  require(buf.size() == expect,
          cat(origin, ": idx image payload is ", buf.size(), " bytes, expected ", expect));
  out.pixels.resize(static_cast<std::size_t>(out.count) * out.rows * out.cols);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = static_cast<float>(buf[16 + i]) / 255.0f;
  return out;
}

inline IdxImages parse_idx_images(const std::string& path) { return parse_idx_images(read_file_bytes(path), path); }

// IDX1 unsigned-byte label file (magic 0x00000801).
inline std::vector<std::uint8_t> parse_idx_labels(const std::vector<unsigned char>& buf,
                                                  const std::string& origin = "<memory>") {
  require(buf.size() >= 8, cat(origin, ": truncated idx label header (", buf.size(), " bytes)"));
  const std::uint32_t magic = detail::be32(buf.data());
  require(magic == 0x00000801u,
          cat(origin, ": bad idx label magic 0x", std::hex, magic, " (expected 0x801)"));
  const auto count = static_cast<std::size_t>(detail::be32(buf.data() + 4));
  require(buf.size() == 8 + count, cat(origin, ": idx label payload is ", buf.size(), " bytes, expected ", 8 + count));
  return {buf.begin() + 8, buf.end()};
}

inline std::vector<std::uint8_t> parse_idx_labels(const std::string& path) {
  return parse_idx_labels(read_file_bytes(path), path);
}

struct MnistSplit {
  IdxImages images;
  std::vector<std::uint8_t> labels;
};

inline MnistSplit load_mnist_split(const std::string& image_path, const std::string& label_path) {
  MnistSplit s{parse_idx_images(image_path), parse_idx_labels(label_path)};
  require(static_cast<std::size_t>(s.images.count) == s.labels.size(),
          cat(image_path, " has ", s.images.count, " images but ", label_path, " has ", s.labels.size(), " labels"));
  for (auto y : s.labels) require(y <= 9, cat(label_path, ": label ", int(y), " out of range"));
  return s;
}

}  // namespace sdg
