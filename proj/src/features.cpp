#include "miner/features.hpp"

#include "miner/error.hpp"

namespace miner {
namespace {

constexpr double kMeanScale = 1.0 / 255.0;
constexpr double kVarScale = 1.0 / (127.5 * 127.5);  // max byte variance maps to 1

struct CellEdges {
  int x[kFeatureGrid + 1];
  int y[kFeatureGrid + 1];
};

CellEdges cell_edges(const BoundingBox& box) {
  CellEdges e;
  for (int k = 0; k <= kFeatureGrid; ++k) {
    e.x[k] = box.x_min + (k * box.width()) / kFeatureGrid;
    e.y[k] = box.y_min + (k * box.height()) / kFeatureGrid;
  }
  return e;
}

void write_cell(std::span<double> out, int cell, int channel, std::int64_t n, std::int64_t s,
                std::int64_t q) {
  const std::size_t base = (static_cast<std::size_t>(cell) * 3 + channel) * 2;
  if (n == 0) {
    out[base] = 0.0;
    out[base + 1] = 0.0;
    return;
  }
  const double nn = static_cast<double>(n);
  out[base] = static_cast<double>(s) / nn * kMeanScale;
  out[base + 1] = static_cast<double>(n * q - s * s) / (nn * nn) * kVarScale;
}

void write_shape(std::span<double> out, const BoundingBox& box, int width, int height) {
  out[kFeatureDim - 2] = static_cast<double>(box.width()) / box.height();
  out[kFeatureDim - 1] = static_cast<double>(box.area()) / (static_cast<double>(width) * height);
}

}  // namespace

IntegralImage::IntegralImage(const SyntheticImage& image)
    : width_(image.width), height_(image.height) {
  const std::size_t stride = static_cast<std::size_t>(width_ + 1);
  sum_.assign(stride * (height_ + 1) * 3, 0);
  sq_.assign(stride * (height_ + 1) * 3, 0);
  for (int y = 0; y < height_; ++y)
    for (int x = 0; x < width_; ++x)
      for (int c = 0; c < 3; ++c) {
        const std::int64_t v = image.at(x, y, c);
        const std::size_t i = ((y + 1) * stride + (x + 1)) * 3 + c;
        const std::size_t up = (y * stride + (x + 1)) * 3 + c;
        const std::size_t left = ((y + 1) * stride + x) * 3 + c;
        const std::size_t diag = (y * stride + x) * 3 + c;
        sum_[i] = v + sum_[up] + sum_[left] - sum_[diag];
        sq_[i] = v * v + sq_[up] + sq_[left] - sq_[diag];
      }
}

std::int64_t IntegralImage::rect_sum(const std::vector<std::int64_t>& t, int x0, int y0, int x1,
                                     int y1, int c) const noexcept {
  const std::size_t stride = static_cast<std::size_t>(width_ + 1);
  return t[(y1 * stride + x1) * 3 + c] - t[(y0 * stride + x1) * 3 + c] -
         t[(y1 * stride + x0) * 3 + c] + t[(y0 * stride + x0) * 3 + c];
}

void IntegralImage::features(const BoundingBox& box, std::span<double> out) const {
  if (!fits_inside(box, width_, height_))
    throw Error(ErrorCode::InvalidArgument, "features: box outside image");
  if (out.size() != static_cast<std::size_t>(kFeatureDim))
    throw Error(ErrorCode::DimensionMismatch, "features: output span has wrong size");
  const CellEdges e = cell_edges(box);
  for (int gy = 0; gy < kFeatureGrid; ++gy)
    for (int gx = 0; gx < kFeatureGrid; ++gx) {
      const int x0 = e.x[gx], x1 = e.x[gx + 1], y0 = e.y[gy], y1 = e.y[gy + 1];
      const std::int64_t n = static_cast<std::int64_t>(x1 - x0) * (y1 - y0);
      for (int c = 0; c < 3; ++c) {
        const std::int64_t s = n > 0 ? rect_sum(sum_, x0, y0, x1, y1, c) : 0;
        const std::int64_t q = n > 0 ? rect_sum(sq_, x0, y0, x1, y1, c) : 0;
        write_cell(out, gy * kFeatureGrid + gx, c, n, s, q);
      }
    }
  write_shape(out, box, width_, height_);
}

std::vector<double> extract_features(const SyntheticImage& image, const BoundingBox& box) {
  if (!fits_inside(box, image.width, image.height))
    throw Error(ErrorCode::InvalidArgument, "extract_features: box outside image " + image.id);
  std::vector<double> out(kFeatureDim);
  const CellEdges e = cell_edges(box);
  for (int gy = 0; gy < kFeatureGrid; ++gy)
    for (int gx = 0; gx < kFeatureGrid; ++gx) {
      const std::int64_t n = static_cast<std::int64_t>(e.x[gx + 1] - e.x[gx]) * (e.y[gy + 1] - e.y[gy]);
      for (int c = 0; c < 3; ++c) {
        std::int64_t s = 0, q = 0;
        for (int y = e.y[gy]; y < e.y[gy + 1]; ++y)
          for (int x = e.x[gx]; x < e.x[gx + 1]; ++x) {
            const std::int64_t v = image.at(x, y, c);
            s += v;
            q += v * v;
          }
        write_cell(out, gy * kFeatureGrid + gx, c, n, s, q);
      }
    }
  write_shape(out, box, image.width, image.height);
  return out;
}

}  // namespace miner
