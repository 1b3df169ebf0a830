#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

namespace miner {

/// Axis-aligned integer box, inclusive-exclusive: width = x_max - x_min.
struct BoundingBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const noexcept { return x_max - x_min; }
  int height() const noexcept { return y_max - y_min; }
  std::int64_t area() const noexcept {
    return static_cast<std::int64_t>(width()) * static_cast<std::int64_t>(height());
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
  friend auto operator<=>(const BoundingBox&, const BoundingBox&) = default;
};

/// Positive area and non-negative coordinates.
bool is_valid(const BoundingBox& box) noexcept;

/// Valid and entirely inside [0,width) x [0,height).
bool fits_inside(const BoundingBox& box, int width, int height) noexcept;

std::int64_t intersection_area(const BoundingBox& a, const BoundingBox& b) noexcept;

/// Intersection over union; areas are exact integers, divided once at the end.
double iou(const BoundingBox& a, const BoundingBox& b) noexcept;

/// Restricts `box` to the image; throws DegenerateResult when nothing remains.
BoundingBox clip(const BoundingBox& box, int width, int height);

/// Greedy non-maximum suppression. Candidates are visited in descending score
/// (ties by lower index); a candidate is dropped when its IoU with an already
/// kept box exceeds `threshold`. Returns kept indices in visiting order.
std::vector<std::size_t> non_maximum_suppression(std::span<const BoundingBox> boxes,
                                                 std::span<const double> scores,
                                                 double threshold, std::size_t max_keep);

nlohmann::json to_json(const BoundingBox& box);

/// Parses a 4-element integer array; throws MalformedRecord on anything else.
BoundingBox box_from_json(const nlohmann::json& j);

}  // namespace miner
