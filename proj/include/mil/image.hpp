#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "mil/error.hpp"
#include "mil/types.hpp"

namespace mil {

/// RGB raster with channels in [0, 1], stored as height x width planes.
template <typename S>
struct RasterImage {
  ArrX<S> r, g, b;

  Eigen::Index height() const { return r.rows(); }
  Eigen::Index width() const { return r.cols(); }
};

struct TissueMask {
  ArrXb bits;  // true = tissue

  Eigen::Index height() const { return bits.rows(); }
  Eigen::Index width() const { return bits.cols(); }
};

struct PatchGrid {
  int patch_size = 0;
  double coverage_threshold = 0.0;
  std::vector<std::pair<int, int>> kept;  // (row, col) top-left pixel coordinates
};

/// HSV saturation: (max - min) / max per pixel, 0 where max == 0.
template <typename S>
ArrX<S> rgb_to_saturation(const RasterImage<S>& img) {
  ArrX<S> sat(img.height(), img.width());
  for (Eigen::Index y = 0; y < img.height(); ++y) {
    for (Eigen::Index x = 0; x < img.width(); ++x) {
      const S hi = std::max({img.r(y, x), img.g(y, x), img.b(y, x)});
      const S lo = std::min({img.r(y, x), img.g(y, x), img.b(y, x)});
      sat(y, x) = hi > S(0) ? (hi - lo) / hi : S(0);
    }
  }
  return sat;
}

inline constexpr int kOtsuBins = 256;

/// Bin index for a value in [0, 1]. Bins are left-open, (i/256, (i+1)/256],
/// with 0 in bin 0, so that "value > threshold" agrees with the bin cut.
inline int otsu_bin(double v) {
  const int b = static_cast<int>(std::ceil(v * kOtsuBins)) - 1;
  return std::clamp(b, 0, kOtsuBins - 1);
}

/// Otsu threshold over a 256-bin histogram: picks the cut maximizing
/// between-class variance (ties toward the lower bin) and returns the bin's
/// upper edge plus the mask of values strictly above it. Fields with a single
/// occupied bin yield threshold 1 and an empty mask.
template <typename S>
std::pair<S, TissueMask> otsu_threshold(const ArrX<S>& field) {
  std::vector<long> hist(kOtsuBins, 0);
  for (Eigen::Index y = 0; y < field.rows(); ++y)
    for (Eigen::Index x = 0; x < field.cols(); ++x) {
      const S v = field(y, x);
      if (v < S(0) || v > S(1)) throw ValidationError("otsu_threshold: field values must lie in [0, 1]");
      hist[otsu_bin(static_cast<double>(v))]++;
    }

  const double total = static_cast<double>(field.size());
  double total_mean = 0.0;
  for (int i = 0; i < kOtsuBins; ++i) total_mean += i * static_cast<double>(hist[i]);
  total_mean /= total;

  double best_var = 0.0;
  int best_cut = -1;
  double w0 = 0.0, sum0 = 0.0;
  for (int t = 0; t < kOtsuBins - 1; ++t) {
    w0 += static_cast<double>(hist[t]);
    sum0 += t * static_cast<double>(hist[t]);
    const double w1 = total - w0;
    if (w0 <= 0.0 || w1 <= 0.0) continue;
    const double mu0 = sum0 / w0;
    const double mu1 = (total_mean * total - sum0) / w1;
    const double var = (w0 / total) * (w1 / total) * (mu0 - mu1) * (mu0 - mu1);
    if (var > best_var) {
      best_var = var;
      best_cut = t;
    }
  }

  TissueMask mask;
  if (best_cut < 0) {
    // Constant (single-bin) field: treat everything as background.
    mask.bits = ArrXb::Constant(field.rows(), field.cols(), false);
    return {S(1), mask};
  }
  const S threshold = static_cast<S>(best_cut + 1) / static_cast<S>(kOtsuBins);
  mask.bits = field > threshold;
  return {threshold, mask};
}

/// Non-overlapping patch grid with stride P anchored at (0,0); partial border
/// tiles are dropped, and a tile is kept iff its tissue fraction >= threshold.
inline PatchGrid extract_patches(const TissueMask& mask, int patch_size, double coverage_threshold) {
  if (patch_size < 1) throw ValidationError("extract_patches: patch_size must be >= 1");
  if (coverage_threshold < 0.0 || coverage_threshold > 1.0)
    throw ValidationError("extract_patches: coverage_threshold must be in [0, 1]");
  PatchGrid grid;
  grid.patch_size = patch_size;
  grid.coverage_threshold = coverage_threshold;
  const double area = static_cast<double>(patch_size) * patch_size;
  for (Eigen::Index row = 0; row + patch_size <= mask.height(); row += patch_size) {
    for (Eigen::Index col = 0; col + patch_size <= mask.width(); col += patch_size) {
      const long count = mask.bits.block(row, col, patch_size, patch_size).count();
      if (static_cast<double>(count) >= coverage_threshold * area)
        grid.kept.emplace_back(static_cast<int>(row), static_cast<int>(col));
    }
  }
  return grid;
}

template <typename S>
PatchGrid preprocess_image(const RasterImage<S>& img, int patch_size, double coverage_threshold) {
  if (img.height() < 1 || img.width() < 1) throw ValidationError("preprocess_image: empty image");
  const ArrX<S> sat = rgb_to_saturation(img);
  auto [threshold, mask] = otsu_threshold(sat);
  return extract_patches(mask, patch_size, coverage_threshold);
}

}  // namespace mil
