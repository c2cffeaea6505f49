#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "sdg/rng.hpp"
#include "sdg/tape.hpp"
#include "sdg/tensor.hpp"

namespace sdgtest {

inline sdg::Tensor<double> random_tensor(sdg::Shape shape, sdg::Rng& rng, double lo = -1.0, double hi = 1.0) {
  sdg::Tensor<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

// Finite-difference oracle: checks tape gradients of a scalar-valued graph
// against central differences on every element of every tracked input.
// The builder must be a pure function of the input values.
struct GradCheck {
  std::vector<sdg::Tensor<double>*> inputs;
  std::function<sdg::Tensor<double>()> build;
  double tolerance = 1e-4;
  double step = 1e-5;

  // Returns the worst relative error (|a-n| / max(1,|a|,|n|)) across inputs.
  double run() const {
    for (auto* in : inputs) {
      in->set_requires_grad(true);
      in->zero_grad();
    }
    sdg::Tape<double> tape;
    std::vector<std::vector<double>> analytic;
    {
      sdg::TapeScope<double> scope(tape);
      sdg::Tensor<double> root = build();
      tape.backward(root);
    }
    for (auto* in : inputs) analytic.emplace_back(in->grad_values());

    const auto eval = [&]() -> double {
      sdg::NoTapeScope<double> guard;
      return build().item();
    };
    double worst = 0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      sdg::Tensor<double>& x = *inputs[t];
      for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double orig = x.data()[i];
        x.data()[i] = orig + step;
        const double fp = eval();
        x.data()[i] = orig - step;
        const double fm = eval();
        x.data()[i] = orig;
        const double numeric = (fp - fm) / (2 * step);
        const double a = analytic[t][static_cast<std::size_t>(i)];
        const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        worst = std::max(worst, err);
      }
    }
    return worst;
  }
};

// ---- synthetic idx fixtures -------------------------------------------------

inline void append_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

inline std::vector<unsigned char> make_idx_images(int count, sdg::Rng& rng, int rows = 28, int cols = 28) {
  std::vector<unsigned char> buf;
  append_be32(buf, 0x00000803u);
  append_be32(buf, static_cast<std::uint32_t>(count));
  append_be32(buf, static_cast<std::uint32_t>(rows));
  append_be32(buf, static_cast<std::uint32_t>(cols));
  for (int i = 0; i < count * rows * cols; ++i) buf.push_back(static_cast<unsigned char>(rng.below(256)));
  return buf;
}

inline std::vector<unsigned char> make_idx_images(const std::vector<std::uint8_t>& pixels, int count, int rows,
                                                  int cols) {
  std::vector<unsigned char> buf;
  append_be32(buf, 0x00000803u);
  append_be32(buf, static_cast<std::uint32_t>(count));
  append_be32(buf, static_cast<std::uint32_t>(rows));
  append_be32(buf, static_cast<std::uint32_t>(cols));
  buf.insert(buf.end(), pixels.begin(), pixels.end());
  return buf;
}

inline std::vector<unsigned char> make_idx_labels(const std::vector<std::uint8_t>& labels) {
  std::vector<unsigned char> buf;
  append_be32(buf, 0x00000801u);
  append_be32(buf, static_cast<std::uint32_t>(labels.size()));
  buf.insert(buf.end(), labels.begin(), labels.end());
  return buf;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void write_bytes(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

// Fresh scratch directory under the system temp root.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  static int counter = 0;
  const auto dir =
      std::filesystem::temp_directory_path() / ("sdgtest-" + tag + "-" + std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace sdgtest
