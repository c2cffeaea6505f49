#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sdg/ops.hpp"
#include "sdg/rng.hpp"
#include "sdg/sha256.hpp"
#include "sdg/tensor.hpp"

namespace sdg {

constexpr int kNumClasses = 10;
constexpr int kNumPermutations = 24;
constexpr int kFeatureDim = 128 * 7 * 7;  // flattened extractor output

namespace init_tag {
constexpr std::uint64_t kBackbone = 0x6261636bULL;  // 'back'
constexpr std::uint64_t kJigsaw = 0x6a696773ULL;    // 'jigs'
constexpr std::uint64_t kDecoder = 0x6465636fULL;   // 'deco'
}  // namespace init_tag

// Two conv blocks feeding a three-layer classifier, with optional heads for
// auxiliary objectives. Heads draw their initial weights from separate seed
// streams, so attaching one never shifts the backbone's initialization.
template <class T>
struct Model {
  Tensor<T> c1w, c1b, c2w, c2b;
  Tensor<T> f1w, f1b, f2w, f2b, f3w, f3b;
  bool has_jigsaw = false;
  Tensor<T> jw, jb;
  bool has_decoder = false;
  Tensor<T> d1w, d1b, d2w, d2b, d3w, d3b, d4w, d4b;

  static Model init(std::uint64_t seed, bool with_jigsaw = false, bool with_decoder = false) {
    Model m;
    Rng backbone = Rng::stream(seed, init_tag::kBackbone);
    m.c1w = lecun_conv(backbone, 64, 3, 5);
    m.c1b = param({64});
    m.c2w = lecun_conv(backbone, 128, 64, 5);
    m.c2b = param({128});
    m.f1w = lecun_linear(backbone, 1024, kFeatureDim);
    m.f1b = param({1024});
    m.f2w = lecun_linear(backbone, 256, 1024);
    m.f2b = param({256});
    m.f3w = lecun_linear(backbone, kNumClasses, 256);
    m.f3b = param({kNumClasses});
    if (with_jigsaw) {
      Rng head = Rng::stream(seed, init_tag::kJigsaw);
      m.has_jigsaw = true;
      m.jw = lecun_linear(head, kNumPermutations, 256);
      m.jb = param({kNumPermutations});
    }
    if (with_decoder) {
      Rng head = Rng::stream(seed, init_tag::kDecoder);
      m.has_decoder = true;
      m.d1w = lecun_tconv(head, 128, 64, 4);
      m.d1b = param({64});
      m.d2w = lecun_tconv(head, 64, 32, 4);
      m.d2b = param({32});
      m.d3w = lecun_tconv(head, 32, 16, 3);
      m.d3b = param({16});
      m.d4w = lecun_tconv(head, 16, 3, 3);
      m.d4b = param({3});
    }
    return m;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out = {
        {"conv1.weight", &c1w}, {"conv1.bias", &c1b}, {"conv2.weight", &c2w}, {"conv2.bias", &c2b},
        {"fc1.weight", &f1w},   {"fc1.bias", &f1b},   {"fc2.weight", &f2w},   {"fc2.bias", &f2b},
        {"fc3.weight", &f3w},   {"fc3.bias", &f3b}};
    if (has_jigsaw) {
      out.emplace_back("jigsaw.weight", &jw);
      out.emplace_back("jigsaw.bias", &jb);
    }
    if (has_decoder) {
      out.emplace_back("dec1.weight", &d1w);
      out.emplace_back("dec1.bias", &d1b);
      out.emplace_back("dec2.weight", &d2w);
      out.emplace_back("dec2.bias", &d2b);
      out.emplace_back("dec3.weight", &d3w);
      out.emplace_back("dec3.bias", &d3b);
      out.emplace_back("dec4.weight", &d4w);
      out.emplace_back("dec4.bias", &d4b);
    }
    return out;
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for (auto& [name, t] : parameters()) n += t->numel();
    return n;
  }

  // Conv stack only: images (B,3,28,28) -> map (B,128,7,7).
  Tensor<T> extract_map(const Tensor<T>& images) const {
    auto h = maxpool2d(relu(conv2d(images, c1w, c1b, 2)), 2);
    return maxpool2d(relu(conv2d(h, c2w, c2b, 2)), 2);
  }

  struct Trace {
    Tensor<T> fmap;      // (B,128,7,7)
    Tensor<T> features;  // (B,6272) view of fmap
    Tensor<T> h2;        // (B,256) after ReLU
    Tensor<T> logits;    // (B,10)
  };

  Trace classify_from_map(const Tensor<T>& fmap) const {
    Trace t;
    t.fmap = fmap;
    t.features = fmap.reshape({fmap.dim(0), kFeatureDim});
    auto h1 = relu(linear(t.features, f1w, f1b));
    t.h2 = relu(linear(h1, f2w, f2b));
    t.logits = linear(t.h2, f3w, f3b);
    return t;
  }

  Trace forward(const Tensor<T>& images) const { return classify_from_map(extract_map(images)); }

  Tensor<T> jigsaw_logits(const Tensor<T>& h2) const {
    require(has_jigsaw, "model was built without a jigsaw head");
    return linear(h2, jw, jb);
  }

  // (B,128,7,7) -> (B,3,28,28) in (-1,1).
  Tensor<T> decode(const Tensor<T>& fmap) const {
    require(has_decoder, "model was built without a decoder");
    auto h = relu(transposed_conv2d(fmap, d1w, d1b, 2, 1));
    h = relu(transposed_conv2d(h, d2w, d2b, 2, 1));
    h = relu(transposed_conv2d(h, d3w, d3b, 1, 1));
    return sdg::tanh(transposed_conv2d(h, d4w, d4b, 1, 1));
  }

  // Architecture identity for checkpoints; covers the backbone + classifier
  // so checkpoints from any training method remain loadable for evaluation.
  static std::string fingerprint() {
    return sha256_hex(std::string("sdg-net-v1|conv3-64k5p2|pool2|conv64-128k5p2|pool2|fc6272-1024|fc1024-256|fc256-10"));
  }

 private:
  static Tensor<T> param(Shape shape) {
    Tensor<T> t{std::move(shape)};
    t.set_requires_grad(true);
    return t;
  }

  static Tensor<T> draw_uniform(Rng& rng, Shape shape, double bound) {
    Tensor<T> t{std::move(shape)};
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      t.data()[i] = static_cast<T>(bound * (2.0 * rng.uniform() - 1.0));
    }
    t.set_requires_grad(true);
    return t;
  }

  static Tensor<T> lecun_conv(Rng& rng, int cout, int cin, int k) {
    return draw_uniform(rng, {cout, cin, k, k}, std::sqrt(3.0 / (cin * k * k)));
  }

  static Tensor<T> lecun_linear(Rng& rng, int m, int n) { return draw_uniform(rng, {m, n}, std::sqrt(3.0 / n)); }

  static Tensor<T> lecun_tconv(Rng& rng, int cin, int cout, int k) {
    return draw_uniform(rng, {cin, cout, k, k}, std::sqrt(3.0 / (cin * k * k)));
  }
};

// ---- checkpoints --------------------------------------------------------------
//
// Layout: magic line, fingerprint line, then per parameter a name, shape and
// float64 little-endian payload. Text header keeps mismatches debuggable.

template <class T>
void save_checkpoint(Model<T>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), cat("cannot write ", path));
  auto params = model.parameters();
  out << "sdg-checkpoint-v1\n" << Model<T>::fingerprint() << "\n" << params.size() << "\n";
  for (auto& [name, t] : params) {
    out << name << " ";
    const auto& s = t->shape();
    out << s.size();
    for (int d : s) out << " " << d;
    out << "\n";
    std::vector<unsigned char> bytes(static_cast<std::size_t>(t->numel()) * 8);
    for (std::int64_t i = 0; i < t->numel(); ++i) {
      const double v = static_cast<double>(t->data()[i]);
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      for (int b = 0; b < 8; ++b) bytes[static_cast<std::size_t>(8 * i + b)] = static_cast<unsigned char>(bits >> (8 * b));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out << "\n";
  }
  require(out.good(), cat("write failed for ", path));
}

template <class T>
void load_checkpoint(Model<T>& model, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), cat("cannot open ", path));
  std::string magic, fp;
  std::getline(in, magic);
  require(magic == "sdg-checkpoint-v1", cat(path, ": not a checkpoint (leading '", magic, "')"));
  std::getline(in, fp);
  require(fp == Model<T>::fingerprint(),
          cat(path, ": architecture fingerprint mismatch (checkpoint ", fp, ", model ", Model<T>::fingerprint(), ")"));
  std::size_t n = 0;
  in >> n;
  in.ignore(1);

  struct Entry {
    Shape shape;
    std::vector<double> values;
  };
  std::map<std::string, Entry> entries;
  for (std::size_t i = 0; i < n; ++i) {
    std::string name;
    std::size_t ndim = 0;
    in >> name >> ndim;
    require(in.good(), cat(path, ": truncated parameter table"));
    Entry e;
    e.shape.resize(ndim);
    for (auto& d : e.shape) in >> d;
    in.ignore(1);
    const std::int64_t numel = shape_numel(e.shape);
    std::vector<unsigned char> bytes(static_cast<std::size_t>(numel) * 8);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(in.gcount() == static_cast<std::streamsize>(bytes.size()), cat(path, ": truncated payload for ", name));
    in.ignore(1);
    e.values.resize(static_cast<std::size_t>(numel));
    for (std::int64_t j = 0; j < numel; ++j) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= std::uint64_t(bytes[static_cast<std::size_t>(8 * j + b)]) << (8 * b);
      std::memcpy(&e.values[static_cast<std::size_t>(j)], &bits, 8);
    }
    entries.emplace(name, std::move(e));
  }
  for (auto& [name, t] : model.parameters()) {
    auto it = entries.find(name);
    require(it != entries.end(), cat(path, ": checkpoint is missing parameter '", name, "'"));
    require(it->second.shape == t->shape(), cat(path, ": parameter '", name, "' has shape ",
                                                shape_str(it->second.shape), ", model expects ", shape_str(t->shape())));
    for (std::int64_t i = 0; i < t->numel(); ++i) {
      t->data()[i] = static_cast<T>(it->second.values[static_cast<std::size_t>(i)]);
    }
  }
}

}  // namespace sdg
