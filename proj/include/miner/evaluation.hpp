#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "miner/detector.hpp"
#include "miner/geometry.hpp"
#include "miner/synthbench.hpp"

namespace miner {

inline constexpr double kPascalIouThreshold = 0.5;

struct ScoredDetection {
  std::string image_id;
  BoundingBox box;
  double confidence = 0.0;
};

struct GroundTruthBox {
  std::string image_id;
  BoundingBox box;
};

/// PASCAL average precision for one category: detections are visited in
/// descending confidence (ties by image id, then box), each is matched to the
/// highest-IoU ground truth of its image, which must reach the threshold and
/// not be matched already. All-point interpolation of the PR curve.
/// Returns nullopt when there is no ground truth.
std::optional<double> average_precision(std::vector<ScoredDetection> detections,
                                        std::span<const GroundTruthBox> ground_truth,
                                        double iou_threshold = kPascalIouThreshold);

struct MapResult {
  std::vector<std::optional<double>> per_category;  // nullopt for categories absent from the test set
  double map = 0.0;
};

/// Per-category AP over detections of several images; each detection
/// contributes to every category with that category's score.
MapResult evaluate_detections(std::span<const SyntheticImage* const> images,
                              std::span<const std::vector<Detection>> detections, int num_categories);

MapResult evaluate_map(const DetectorState& state, std::span<const SyntheticImage* const> test_images);

}  // namespace miner
