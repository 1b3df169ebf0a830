#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "miner/geometry.hpp"
#include "miner/synthbench.hpp"

namespace miner {

inline constexpr int kFeatureGrid = 4;
/// 4x4 grid x 3 channels x (mean, variance) + aspect ratio + relative area.
inline constexpr int kFeatureDim = kFeatureGrid * kFeatureGrid * 3 * 2 + 2;

/// Summed-area tables of pixel values and squared values. Cell statistics are
/// exact integer sums, so features match `extract_features` bit for bit.
class IntegralImage {
 public:
  explicit IntegralImage(const SyntheticImage& image);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }

  /// Writes the kFeatureDim features of `box` into `out`.
  void features(const BoundingBox& box, std::span<double> out) const;

 private:
  std::int64_t rect_sum(const std::vector<std::int64_t>& table, int x0, int y0, int x1, int y1,
                        int channel) const noexcept;

  int width_;
  int height_;
  std::vector<std::int64_t> sum_;
  std::vector<std::int64_t> sq_;
};

/// Features of one crop computed directly from the pixels.
std::vector<double> extract_features(const SyntheticImage& image, const BoundingBox& box);

}  // namespace miner
