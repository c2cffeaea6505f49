#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "sdg/error.hpp"
#include "sdg/sha256.hpp"

namespace sdg {

using Color = std::array<double, 3>;

// Ten class colors in RGB space: classes 0-5 sit on an axis-aligned sphere
// around the center (+R,-R,+G,-G,+B,-B), classes 6-9 on the four vertices of
// an inscribed cube that form a regular tetrahedron. The construction keeps
// the palette mean exactly at the center, so a mean-color shortcut carries no
// class information.
struct Palette {
  double radius = 0.45;
  double cube_half = 0.35;
  Color center{0.5, 0.5, 0.5};
  std::array<Color, 10> colors{};

  std::string canonical() const {
    char buf[160];
    std::string s = "sdg-palette-v1";
    auto put = [&](const Color& c) {
      std::snprintf(buf, sizeof(buf), "|%.17g,%.17g,%.17g", c[0], c[1], c[2]);
      s += buf;
    };
    std::snprintf(buf, sizeof(buf), "|r=%.17g|c=%.17g", radius, cube_half);
    s += buf;
    put(center);
    for (const auto& c : colors) put(c);
    return s;
  }

  std::string fingerprint() const { return sha256_hex(canonical()); }
};

inline Palette build_palette(double radius = 0.45, double cube_half = 0.35, Color center = {0.5, 0.5, 0.5}) {
  require(radius > 0.0, cat("palette: sphere radius must be positive, got ", radius));
  require(cube_half > 0.0, cat("palette: cube half-side must be positive, got ", cube_half));
  Palette p;
  p.radius = radius;
  p.cube_half = cube_half;
  p.center = center;
  for (int axis = 0; axis < 3; ++axis) {
    for (int sign = 0; sign < 2; ++sign) {
      Color c = center;
      c[static_cast<std::size_t>(axis)] += (sign == 0 ? radius : -radius);
      p.colors[static_cast<std::size_t>(2 * axis + sign)] = c;
    }
  }
  // The four cube vertices with an even number of minus signs summing to zero.
  static constexpr int kTet[4][3] = {{+1, +1, +1}, {+1, -1, -1}, {-1, +1, -1}, {-1, -1, +1}};
  for (int v = 0; v < 4; ++v) {
    Color c = center;
    for (int axis = 0; axis < 3; ++axis) c[static_cast<std::size_t>(axis)] += cube_half * kTet[v][axis];
    p.colors[static_cast<std::size_t>(6 + v)] = c;
  }
  for (int k = 0; k < 10; ++k) {
    for (int axis = 0; axis < 3; ++axis) {
      const double v = p.colors[static_cast<std::size_t>(k)][static_cast<std::size_t>(axis)];
      require(v >= 0.0 && v <= 1.0,
              cat("palette: channel out of [0,1] - class ", k, " channel ", axis, " is ", v,
                  " (radius=", radius, ", cube_half=", cube_half, ")"));
    }
  }
  for (int i = 0; i < 10; ++i) {
    for (int j = i + 1; j < 10; ++j) {
      double d2 = 0;
      for (int a = 0; a < 3; ++a) {
        const double d = p.colors[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] -
                         p.colors[static_cast<std::size_t>(j)][static_cast<std::size_t>(a)];
        d2 += d * d;
      }
      require(d2 > 1e-24, cat("palette: classes ", i, " and ", j, " received identical colors"));
    }
  }
  return p;
}

// Class-to-class permutation without fixed points, used for the unseen-palette
// test split. Default: shift by one.
inline std::vector<int> default_derangement() {
  std::vector<int> p(10);
  for (int i = 0; i < 10; ++i) p[static_cast<std::size_t>(i)] = (i + 1) % 10;
  return p;
}

inline void validate_derangement(const std::vector<int>& p) {
  require(p.size() == 10, cat("derangement must have 10 entries, got ", p.size()));
  std::array<bool, 10> seen{};
  for (int i = 0; i < 10; ++i) {
    const int v = p[static_cast<std::size_t>(i)];
    require(v >= 0 && v < 10, cat("derangement entry ", v, " out of range"));
    require(!seen[static_cast<std::size_t>(v)], cat("derangement repeats class ", v));
    require(v != i, cat("derangement has fixed point at class ", i));
    seen[static_cast<std::size_t>(v)] = true;
  }
}

}  // namespace sdg
