#pragma once

// Edge-patch in-situ restoration (EPIS) and the input perturbations used for
// consistency training.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "dstcs/core.hpp"
#include "dstcs/rng.hpp"

namespace dstcs {

struct PatchGrid {
  int patch_size = 16;

  void validate(int rows, int cols) const {
    if (patch_size < 1) throw ConfigError("patch_size must be positive");
    if (rows % patch_size != 0 || cols % patch_size != 0)
      throw ShapeError("image " + std::to_string(rows) + "x" + std::to_string(cols) +
                       " is not divisible by patch_size " + std::to_string(patch_size));
  }
};

struct PatchCoord {
  int grid_row = 0;
  int grid_col = 0;
  friend bool operator==(const PatchCoord&, const PatchCoord&) = default;
  friend auto operator<=>(const PatchCoord&, const PatchCoord&) = default;
};

struct EdgePatchSet {
  int patch_size = 16;
  std::vector<PatchCoord> coords;  // row-major order
  std::vector<Image> content;      // filled by extract_patch_content()
};

/// Patches whose mask window holds at least two distinct labels.
inline EdgePatchSet find_edge_patches(const LabelMask& mask, const PatchGrid& grid) {
  grid.validate(mask.rows(), mask.cols());
  const int ps = grid.patch_size;
  EdgePatchSet out{ps, {}, {}};
  for (int gr = 0; gr < mask.rows() / ps; ++gr)
    for (int gc = 0; gc < mask.cols() / ps; ++gc) {
      const std::uint8_t first = mask(gr * ps, gc * ps);
      bool mixed = false;
      for (int r = gr * ps; r < (gr + 1) * ps && !mixed; ++r)
        for (int c = gc * ps; c < (gc + 1) * ps; ++c)
          if (mask(r, c) != first) {
            mixed = true;
            break;
          }
      if (mixed) out.coords.push_back({gr, gc});
    }
  return out;
}

inline void extract_patch_content(const Image& image, EdgePatchSet& set) {
  const int ps = set.patch_size;
  set.content.clear();
  for (const auto& pc : set.coords) {
    Image patch(ps, ps);
    for (int r = 0; r < ps; ++r)
      for (int c = 0; c < ps; ++c) patch(r, c) = image(pc.grid_row * ps + r, pc.grid_col * ps + c);
    set.content.push_back(std::move(patch));
  }
}

/// Copies the original pixels of every edge patch (located through the label or
/// pseudo-label mask) back into the augmented image at the same position.
inline Image epis_augment(const Image& original, const LabelMask& mask_or_pseudo, const Image& base_augmented,
                          const PatchGrid& grid) {
  require_same_shape(original, mask_or_pseudo, "epis_augment");
  require_same_shape(original, base_augmented, "epis_augment");
  auto edges = find_edge_patches(mask_or_pseudo, grid);
  extract_patch_content(original, edges);
  Image out = base_augmented;
  const int ps = grid.patch_size;
  for (std::size_t i = 0; i < edges.coords.size(); ++i) {
    const auto& pc = edges.coords[i];
    for (int r = 0; r < ps; ++r)
      for (int c = 0; c < ps; ++c) out(pc.grid_row * ps + r, pc.grid_col * ps + c) = edges.content[i](r, c);
  }
  return out;
}

/// Adds U[-magnitude, magnitude] noise per pixel and clamps to [0, 1].
inline Image perturb(const Image& image, double magnitude, std::uint64_t seed) {
  if (magnitude < 0) throw ConfigError("perturbation magnitude must be non-negative");
  Image out = image;
  if (magnitude == 0) return out;
  Rng rng = make_rng(seed, {0x6e6f6973ULL});
  for (auto& v : out.values())
    v = static_cast<float>(std::clamp(v + uniform(rng, -magnitude, magnitude), 0.0, 1.0));
  return out;
}

// ---------------------------------------------------------------------------
// Base augmentation. Geometry (flip, rotation) is applied jointly to image and
// labels first; EPIS then runs in that frame against the photometric part.

struct GeometricTransform {
  bool flip = false;
  double angle_deg = 0.0;

  bool identity() const noexcept { return !flip && angle_deg == 0.0; }

  static GeometricTransform sample(Rng& rng, double max_angle_deg = 15.0) {
    GeometricTransform t;
    t.flip = uniform01(rng) < 0.5;
    t.angle_deg = uniform(rng, -max_angle_deg, max_angle_deg);
    return t;
  }

  /// Source coordinate (in the untransformed image) for output pixel centre (r, c).
  std::pair<double, double> source(int r, int c, int rows, int cols) const {
    const double cy = rows / 2.0, cx = cols / 2.0;
    const double a = angle_deg * 3.141592653589793 / 180.0;
    double y = r + 0.5 - cy, x = c + 0.5 - cx;
    const double sy = std::cos(a) * y - std::sin(a) * x;
    double sx = std::sin(a) * y + std::cos(a) * x;
    if (flip) sx = -sx;
    return {sy + cy - 0.5, sx + cx - 0.5};
  }

  Image apply(const Image& img) const {
    if (identity()) return img;
    const int rows = img.rows(), cols = img.cols();
    Image out(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        auto [y, x] = source(r, c, rows, cols);
        y = std::clamp(y, 0.0, rows - 1.0);
        x = std::clamp(x, 0.0, cols - 1.0);
        const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
        const int y1 = std::min(y0 + 1, rows - 1), x1 = std::min(x0 + 1, cols - 1);
        const double fy = y - y0, fx = x - x0;
        const double v = (1 - fy) * ((1 - fx) * img(y0, x0) + fx * img(y0, x1)) +
                         fy * ((1 - fx) * img(y1, x0) + fx * img(y1, x1));
        out(r, c) = static_cast<float>(v);
      }
    return out;
  }

  LabelMask apply(const LabelMask& mask) const {
    if (identity()) return mask;
    const int rows = mask.rows(), cols = mask.cols();
    LabelMask out(rows, cols, kBackground);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const auto [y, x] = source(r, c, rows, cols);
        const int yi = static_cast<int>(std::lround(y)), xi = static_cast<int>(std::lround(x));
        if (yi >= 0 && yi < rows && xi >= 0 && xi < cols) out(r, c) = mask(yi, xi);
      }
    return out;
  }
};

/// Photometric corruption: random gamma followed by uniform noise.
inline Image photometric_augment(const Image& image, double noise_magnitude, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x70686f74ULL});
  const double gamma = std::exp(uniform(rng, -0.4, 0.4));
  Image out = image;
  for (auto& v : out.values()) v = static_cast<float>(std::pow(std::max<double>(v, 0.0), gamma));
  return perturb(out, noise_magnitude, rng());
}

}  // namespace dstcs
