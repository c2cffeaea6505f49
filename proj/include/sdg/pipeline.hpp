#pragma once

#include <string>
#include <vector>

#include "sdg/dataset.hpp"
#include "sdg/idx.hpp"
#include "sdg/palette.hpp"
#include "sdg/sha256.hpp"

namespace sdg {

struct MnistPair {
  MnistSplit train, test;
  std::string train_images_sha256, train_labels_sha256;
  std::string test_images_sha256, test_labels_sha256;
};

// Loads the four canonical idx files from a directory.
inline MnistPair load_mnist_dir(const std::string& dir) {
  const std::string ti = dir + "/train-images-idx3-ubyte";
  const std::string tl = dir + "/train-labels-idx1-ubyte";
  const std::string vi = dir + "/t10k-images-idx3-ubyte";
  const std::string vl = dir + "/t10k-labels-idx1-ubyte";
  MnistPair out;
  out.train = load_mnist_split(ti, tl);
  out.test = load_mnist_split(vi, vl);
  out.train_images_sha256 = sha256_file_hex(ti);
  out.train_labels_sha256 = sha256_file_hex(tl);
  out.test_images_sha256 = sha256_file_hex(vi);
  out.test_labels_sha256 = sha256_file_hex(vl);
  return out;
}

// The four colorized splits: training and validation use the class palette
// (validation drawing from the held-out digit images), the two test splits
// recolor the held-out images with the center color and with a deranged
// palette respectively.
struct ColorFamily {
  ColorizedDataset train, val, test_mp, test_up;
};

inline ColorFamily build_color_family(const MnistPair& mnist, const Palette& palette,
                                      const std::vector<int>& derangement) {
  ColorFamily f;
  f.train = colorize(mnist.train.images, mnist.train.labels, ColorRule::kByClass, palette, derangement);
  f.val = colorize(mnist.test.images, mnist.test.labels, ColorRule::kByClass, palette, derangement);
  f.test_mp = colorize(mnist.test.images, mnist.test.labels, ColorRule::kCenter, palette, derangement);
  f.test_up = colorize(mnist.test.images, mnist.test.labels, ColorRule::kDeranged, palette, derangement);
  return f;
}

// Uncolored control: intensity replicated over all three channels.
struct GrayFamily {
  ColorizedDataset train, val;
};

inline GrayFamily build_gray_family(const MnistPair& mnist, const Palette& palette) {
  GrayFamily f;
  const auto derangement = default_derangement();
  f.train = colorize(mnist.train.images, mnist.train.labels, ColorRule::kGray, palette, derangement);
  f.val = colorize(mnist.test.images, mnist.test.labels, ColorRule::kGray, palette, derangement);
  return f;
}

}  // namespace sdg
