#include "miner/evaluation.hpp"

#include <algorithm>
#include <map>

#include "miner/error.hpp"

namespace miner {

std::optional<double> average_precision(std::vector<ScoredDetection> detections,
                                        std::span<const GroundTruthBox> ground_truth,
                                        double iou_threshold) {
  if (ground_truth.empty()) return std::nullopt;
  std::sort(detections.begin(), detections.end(), [](const ScoredDetection& a, const ScoredDetection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return a.box < b.box;
  });

  std::map<std::string, std::vector<std::size_t>> gt_by_image;
  for (std::size_t g = 0; g < ground_truth.size(); ++g) gt_by_image[ground_truth[g].image_id].push_back(g);
  std::vector<bool> matched(ground_truth.size(), false);

  std::vector<double> recall, precision;
  recall.reserve(detections.size());
  precision.reserve(detections.size());
  std::size_t tp = 0, fp = 0;
  for (const auto& det : detections) {
    double best = -1.0;
    std::size_t best_gt = 0;
    if (auto it = gt_by_image.find(det.image_id); it != gt_by_image.end())
      for (std::size_t g : it->second) {
        const double o = iou(det.box, ground_truth[g].box);
        if (o > best) {
          best = o;
          best_gt = g;
        }
      }
    if (best >= iou_threshold && !matched[best_gt]) {
      matched[best_gt] = true;
      ++tp;
    } else {
      ++fp;
    }
    recall.push_back(static_cast<double>(tp) / ground_truth.size());
    precision.push_back(static_cast<double>(tp) / (tp + fp));
  }

  // Precision envelope, then area under the stepwise curve.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

MapResult evaluate_detections(std::span<const SyntheticImage* const> images,
                              std::span<const std::vector<Detection>> detections, int num_categories) {
  if (images.size() != detections.size())
    throw Error(ErrorCode::InvalidArgument, "one detection list per image is required");
  MapResult result;
  result.per_category.resize(num_categories);
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < num_categories; ++c) {
    std::vector<GroundTruthBox> gts;
    std::vector<ScoredDetection> dets;
    for (std::size_t i = 0; i < images.size(); ++i) {
      for (const auto& o : images[i]->objects)
        if (o.category == c) gts.push_back({images[i]->id, o.box});
      for (const auto& d : detections[i]) dets.push_back({images[i]->id, d.box, d.scores.at(c)});
    }
    result.per_category[c] = average_precision(std::move(dets), gts);
    if (result.per_category[c]) {
      sum += *result.per_category[c];
      ++present;
    }
  }
  result.map = present > 0 ? sum / present : 0.0;
  return result;
}

MapResult evaluate_map(const DetectorState& state, std::span<const SyntheticImage* const> test_images) {
  if (test_images.empty()) throw Error(ErrorCode::InvalidArgument, "evaluate_map needs test images");
  std::vector<std::vector<Detection>> detections;
  detections.reserve(test_images.size());
  for (const auto* img : test_images) detections.push_back(detect(*img, state));
  return evaluate_detections(test_images, detections, state.num_categories);
}

}  // namespace miner
