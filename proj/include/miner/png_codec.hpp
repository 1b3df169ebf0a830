#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace miner {

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB
};

std::vector<std::uint8_t> encode_png(const RgbImage& image);

/// Throws Error(MalformedRecord) on anything libpng rejects.
RgbImage decode_png(std::span<const std::uint8_t> bytes);

}  // namespace miner
