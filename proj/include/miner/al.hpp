#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "miner/detector.hpp"
#include "miner/ssm.hpp"
#include "miner/synthbench.hpp"

namespace miner {

/// Label value of an annotation that marks a proposal as background.
inline constexpr int kBackgroundLabel = -1;

enum class AnnotatorKind { SimulatedOracle, Human };

const char* to_string(AnnotatorKind kind) noexcept;
AnnotatorKind annotator_kind_from_string(const std::string& text);

struct AnnotationRequest {
  std::string request_id;
  std::string proposal_id;
  std::string image_id;
  BoundingBox box;
  std::optional<double> s_score;  // absent for random selection
  std::vector<int> positive_categories;
  std::vector<std::uint8_t> thumbnail_png;
  int created_at = 0;  // AL round index
};

struct AnnotationResult {
  std::string request_id;
  int label = kBackgroundLabel;
  std::optional<BoundingBox> corrected_box;
  AnnotatorKind annotator = AnnotatorKind::SimulatedOracle;

  friend bool operator==(const AnnotationResult&, const AnnotationResult&) = default;
};

nlohmann::json to_json(const AnnotationRequest& request);
AnnotationRequest annotation_request_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AnnotationResult& result);
AnnotationResult annotation_result_from_json(const nlohmann::json& j);

class Annotator {
 public:
  virtual ~Annotator() = default;
  virtual AnnotatorKind kind() const = 0;
  /// Resolves a batch of requests; may block (human annotators).
  virtual std::vector<AnnotationResult> annotate(const std::vector<AnnotationRequest>& requests) = 0;
};

/// Answers from hidden ground truth: the category of the max-IoU object when
/// that IoU is at least 0.5, background otherwise.
AnnotationResult oracle_annotate(const AnnotationRequest& request, const ImageIndex& images);

class SimulatedOracle final : public Annotator {
 public:
  explicit SimulatedOracle(const Dataset& dataset) : images_(dataset) {}
  AnnotatorKind kind() const override { return AnnotatorKind::SimulatedOracle; }
  std::vector<AnnotationResult> annotate(const std::vector<AnnotationRequest>& requests) override;

 private:
  ImageIndex images_;
};

/// Unlabeled proposals keyed by id; iteration order is the id order.
class UnlabeledPool {
 public:
  void add(RegionProposal proposal);
  bool contains(const std::string& id) const { return items_.count(id) > 0; }
  const RegionProposal& at(const std::string& id) const;
  RegionProposal take(const std::string& id);
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }
  std::vector<std::string> ids() const;
  const std::map<std::string, RegionProposal>& items() const noexcept { return items_; }

 private:
  std::map<std::string, RegionProposal> items_;
};

/// Permanently labeled samples (ground truth and user); append-only.
class LabeledPool {
 public:
  void add(TrainingSample sample);
  bool contains(const std::string& proposal_id) const { return ids_.count(proposal_id) > 0; }
  std::size_t size() const noexcept { return samples_.size(); }
  const TrainingSample& operator[](std::size_t i) const { return samples_[i]; }
  std::span<const TrainingSample> samples() const noexcept { return samples_; }

 private:
  std::vector<TrainingSample> samples_;
  std::unordered_set<std::string> ids_;
};

struct SamplePools {
  LabeledPool labeled;
  UnlabeledPool unlabeled;
  std::map<std::string, AnnotationResult> applied;  // by request id
};

struct LowConsistencyParams {
  int z = 10;
  double tau_low = 0.1;
  int min_positive = 2;
};

/// Categories whose probability exceeds 0.5.
std::vector<int> positive_categories(std::span<const double> probabilities);

/// Records with s < tau_low whose proposal the current state predicts positive
/// for at least `min_positive` categories; at most z of them, sampled uniformly.
std::vector<AnnotationRequest> select_low_consistency(std::span<const ConsistencyRecord> records,
                                                      const UnlabeledPool& pool, const ImageIndex& images,
                                                      const DetectorState& state,
                                                      const LowConsistencyParams& params,
                                                      std::uint64_t seed, int round);

/// Random-selection baseline: z proposals drawn uniformly from the pool.
std::vector<AnnotationRequest> select_random(const UnlabeledPool& pool, const ImageIndex& images,
                                             const DetectorState& state, int z, std::uint64_t seed,
                                             int round);

struct ApplyReport {
  std::size_t applied = 0;
  std::size_t duplicates = 0;
};

/// Moves each annotated proposal into the labeled pool as a user sample.
/// Validates the whole batch before mutating anything. Re-applying a result
/// for an already applied request is a no-op; a different result for it
/// throws ConflictingResult, a request not in `pending` throws StaleRequest.
ApplyReport apply_annotations(std::span<const AnnotationResult> results,
                              const std::map<std::string, AnnotationRequest>& pending,
                              SamplePools& pools, const ImageIndex& images, int num_categories);

}  // namespace miner
