#include "miner/geometry.hpp"

#include <algorithm>
#include <numeric>

#include "miner/error.hpp"

namespace miner {

bool is_valid(const BoundingBox& box) noexcept {
  return box.x_min >= 0 && box.y_min >= 0 && box.x_min < box.x_max && box.y_min < box.y_max;
}

bool fits_inside(const BoundingBox& box, int width, int height) noexcept {
  return is_valid(box) && box.x_max <= width && box.y_max <= height;
}

std::int64_t intersection_area(const BoundingBox& a, const BoundingBox& b) noexcept {
  const int w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const int h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (w <= 0 || h <= 0) return 0;
  return static_cast<std::int64_t>(w) * h;
}

double iou(const BoundingBox& a, const BoundingBox& b) noexcept {
  const std::int64_t inter = intersection_area(a, b);
  if (inter == 0) return 0.0;
  const std::int64_t uni = a.area() + b.area() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

BoundingBox clip(const BoundingBox& box, int width, int height) {
  if (width <= 0 || height <= 0)
    throw Error(ErrorCode::InvalidArgument, "clip: image size must be positive");
  BoundingBox out{std::clamp(box.x_min, 0, width), std::clamp(box.y_min, 0, height),
                  std::clamp(box.x_max, 0, width), std::clamp(box.y_max, 0, height)};
  if (!is_valid(out)) throw Error(ErrorCode::DegenerateResult, "clip: box lies outside the image");
  return out;
}

std::vector<std::size_t> non_maximum_suppression(std::span<const BoundingBox> boxes,
                                                 std::span<const double> scores,
                                                 double threshold, std::size_t max_keep) {
  if (boxes.size() != scores.size())
    throw Error(ErrorCode::InvalidArgument, "nms: boxes and scores differ in length");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> kept;
  for (std::size_t idx : order) {
    if (kept.size() >= max_keep) break;
    bool suppressed = false;
    for (std::size_t k : kept) {
      if (iou(boxes[idx], boxes[k]) > threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

nlohmann::json to_json(const BoundingBox& box) {
  return nlohmann::json::array({box.x_min, box.y_min, box.x_max, box.y_max});
}

BoundingBox box_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4)
    throw Error(ErrorCode::MalformedRecord, "box must be an array of 4 integers");
  for (const auto& v : j)
    if (!v.is_number_integer())
      throw Error(ErrorCode::MalformedRecord, "box coordinates must be integers");
  BoundingBox box{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
  if (!is_valid(box)) throw Error(ErrorCode::MalformedRecord, "box has no positive area");
  return box;
}

}  // namespace miner
