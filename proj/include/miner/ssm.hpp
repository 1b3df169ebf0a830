#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "miner/detector.hpp"
#include "miner/synthbench.hpp"

namespace miner {

struct SsmParams {
  double pace = 0.9;           // lambda
  double iou_threshold = 0.5;  // gamma
  int max_validation_images = 5;
};

/// A proposal of the composited validation image that overlaps the pasted box.
struct OverlapTerm {
  std::string proposal_id;
  BoundingBox box;
  double iou = 0.0;
  double phi = 0.0;
};

/// Everything one validation image contributed to the consistency estimate.
struct ValidationTerm {
  std::string image_id;
  BoundingBox placed_box;
  std::size_t num_proposals = 0;  // |Omega| of the composited image
  std::vector<OverlapTerm> overlapping;

  /// Sum of overlapping phi over |Omega|; 0 for an empty proposal set.
  double value() const;
};

struct CrossValidation {
  double f_value = 0.0;
  std::vector<ValidationTerm> trace;
};

/// Pastes the proposal crop into each validation image (none may contain
/// `category`), re-proposes on the composite and averages
/// lambda / |Omega| * sum over proposals with IoU >= gamma of phi_category.
CrossValidation cross_image_validate(const RegionProposal& proposal, const SyntheticImage& source,
                                     int category,
                                     std::span<const SyntheticImage* const> validation_images,
                                     const DetectorState& state, const SsmParams& params,
                                     std::uint64_t seed);

/// Mean of the per-image terms of a trace (the consistency score s).
double replay_score(std::span<const ValidationTerm> trace);
/// lambda times the mean per-image term (the validation value f).
double replay_f(std::span<const ValidationTerm> trace, double pace);

/// Hard self-paced weight: 1 when loss <= f.
int update_weights(double loss, double f_value) noexcept;

struct ConsistencyRecord {
  std::string proposal_id;
  int j_star = 0;
  std::vector<double> probabilities;    // phi_j of the proposal under the snapshot
  std::vector<double> losses_positive;  // l_j with y_j = +1
  std::vector<double> losses_negative;  // l_j with y_j = -1
  double f_value = 0.0;
  std::optional<double> s_score;        // nullopt when no validation image lacks j*
  std::vector<int> v;
  std::vector<ValidationTerm> validation_trace;

  bool has_nonzero_weight() const;
};

/// Cross-image consistency of one unlabeled proposal. Validation images are
/// drawn without replacement from `annotated` images lacking j*.
ConsistencyRecord consistency_score(const RegionProposal& proposal, const SyntheticImage& source,
                                    const DetectorState& state,
                                    std::span<const SyntheticImage* const> annotated,
                                    const SsmParams& params, std::uint64_t seed);

/// Single-image-confidence baseline: s = phi_j*(x) and f = lambda * phi_j*(x),
/// i.e. the proposal validated only against itself in its own image.
ConsistencyRecord single_image_score(const RegionProposal& proposal, const DetectorState& state,
                                     const SsmParams& params);

struct HighConsistencyEntry {
  std::string proposal_id;
  double s_score = 0.0;
  std::size_t record_index = 0;
  std::optional<LabelVector> pseudo_label;
};

struct HighConsistencySet {
  std::vector<std::vector<HighConsistencyEntry>> per_category;

  std::size_t size() const;
};

/// Groups records by j*, sorts each group by s descending (ties by proposal id)
/// and keeps at most k records with s > 0.
HighConsistencySet rerank_topk(std::span<const ConsistencyRecord> records, int k, int num_categories);

/// Minimizes sum_j v_j l_j over the m+1 label vectors with at most one +1.
/// Ties go to the all-negative vector, then to the lowest category.
LabelVector solve_pseudo_labels(std::span<const int> v, const CandidateLosses& losses);
LabelVector solve_pseudo_labels(const ConsistencyRecord& record);

/// Solves every entry of `set` whose record has a nonzero weight vector and
/// drops the others.
void assign_pseudo_labels(HighConsistencySet& set, std::span<const ConsistencyRecord> records);

nlohmann::json to_json(const ValidationTerm& term);
nlohmann::json to_json(const ConsistencyRecord& record, bool include_trace);
ValidationTerm validation_term_from_json(const nlohmann::json& j);

}  // namespace miner
