#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "miner/features.hpp"
#include "miner/geometry.hpp"
#include "miner/synthbench.hpp"

namespace miner {

enum class Provenance { Proposer, GroundTruthJittered, Pasted };

const char* to_string(Provenance p) noexcept;
Provenance provenance_from_string(const std::string& text);

struct RegionProposal {
  std::string id;
  std::string image_id;
  BoundingBox box;
  std::vector<double> features;
  Provenance provenance = Provenance::Proposer;
};

enum class LabelSource { GroundTruth, User, Pseudo, Unknown };

const char* to_string(LabelSource s) noexcept;
LabelSource label_source_from_string(const std::string& text);

/// Center offsets scaled by proposal size, then log width and height ratios.
using BoxDeltas = std::array<double, 4>;

BoxDeltas encode_deltas(const BoundingBox& proposal, const BoundingBox& target);

/// Applies `deltas` to `proposal`, rounds to pixels and clips to the image.
BoundingBox apply_deltas(const BoundingBox& proposal, const BoxDeltas& deltas, int width,
                         int height);

/// Per-category labels in {-1,+1}; at most one entry is +1.
struct LabelVector {
  std::vector<int> values;
  LabelSource source = LabelSource::Unknown;
  std::optional<BoxDeltas> regression_target;

  static LabelVector all_negative(int num_categories, LabelSource source);
  static LabelVector one_hot(int num_categories, int category, LabelSource source);

  /// The +1 category, or nullopt for the all-negative (background) vector.
  std::optional<int> positive_category() const;
  /// Sum over j of |y_j + 1| <= 2 with every entry in {-1,+1}.
  bool satisfies_constraint() const;

  friend bool operator==(const LabelVector&, const LabelVector&) = default;
};

struct TrainingSample {
  RegionProposal proposal;
  LabelVector label;
};

/// One-vs-rest logistic classifiers plus a class-agnostic box regressor.
/// Rows are [weights..., bias].
struct DetectorState {
  int num_categories = 0;
  int feature_dim = 0;
  std::vector<double> classifier;  // num_categories x (feature_dim + 1)
  std::vector<double> regressor;   // 4 x (feature_dim + 1)
  std::uint64_t update_counter = 0;

  static DetectorState zeros(int num_categories, int feature_dim = kFeatureDim);

  std::size_t row_size() const noexcept { return static_cast<std::size_t>(feature_dim) + 1; }
  std::span<const double> classifier_row(int j) const;
  std::span<const double> regressor_row(int k) const;
  bool all_finite() const;

  friend bool operator==(const DetectorState&, const DetectorState&) = default;
};

struct Detection {
  BoundingBox box;
  std::vector<double> scores;
  int best_category = 0;
  double confidence = 0.0;
};

double logistic(double a) noexcept;

/// phi_j = logistic(w_j . x + b_j) per category.
std::vector<double> classify(const DetectorState& state, std::span<const double> features);

/// Predicted box deltas for one proposal.
BoxDeltas regress(const DetectorState& state, std::span<const double> features);

struct ClassificationLoss {
  std::vector<double> losses;    // l_j per category
  std::vector<double> gradient;  // d(sum_j l_j) / d classifier, same layout as the weights
};

/// l_j = -((1+y)/2 log phi_j + (1-y)/2 log(1-phi_j)), evaluated in logit form.
ClassificationLoss loss_cls(const DetectorState& state, std::span<const double> features,
                            const LabelVector& label);

/// l_j under y_j = +1 and under y_j = -1, for every category.
struct CandidateLosses {
  std::vector<double> positive;
  std::vector<double> negative;
};

CandidateLosses candidate_losses(const DetectorState& state, std::span<const double> features);

struct LocalizationLoss {
  double loss = 0.0;
  std::vector<double> gradient;  // d loss / d regressor
};

/// Smooth-L1 summed over the four delta components.
LocalizationLoss loss_loc(const DetectorState& state, std::span<const double> features,
                          const std::optional<BoxDeltas>& target);

struct BatchGradient {
  double objective = 0.0;
  std::vector<double> classifier;
  std::vector<double> regressor;
};

/// Mean over the batch of sum_j l_j plus the localization loss of foreground samples.
BatchGradient batch_gradient(const DetectorState& state, std::span<const TrainingSample> batch);

/// One gradient-descent step; the input state is left untouched.
DetectorState train_step(const DetectorState& state, std::span<const TrainingSample> batch,
                         double learning_rate);

inline constexpr double kProposalNmsThreshold = 0.5;
inline constexpr std::size_t kMaxProposalsPerImage = 32;

/// Sliding windows at 3 scales x 2 aspect ratios, stride a quarter of the window.
const std::vector<BoundingBox>& sliding_windows(int width, int height);

struct ScoredBox {
  std::size_t window = 0;
  BoundingBox box;
  std::vector<double> probabilities;
};

/// Classifier outputs for every sliding window of one image under one snapshot.
class WindowScores {
 public:
  WindowScores(const SyntheticImage& image, const DetectorState& state);

  /// NMS at 0.5 over max foreground probability, truncated to the top 32.
  std::vector<ScoredBox> top_proposals() const;

  std::size_t size() const noexcept { return boxes_->size(); }
  const BoundingBox& box(std::size_t window) const { return (*boxes_)[window]; }
  std::span<const double> probabilities(std::size_t window) const;

 private:
  const std::vector<BoundingBox>* boxes_ = nullptr;
  int num_categories_ = 0;
  std::vector<double> probs_;
  std::vector<double> foreground_;
};

/// Region proposals of `image` with ids "<image id>#<rank>".
std::vector<RegionProposal> propose(const SyntheticImage& image, const DetectorState& state);

/// Proposals with regressed boxes and per-category scores.
std::vector<Detection> detect(const SyntheticImage& image, const DetectorState& state);

inline constexpr int kCheckpointFormatVersion = 1;

nlohmann::json to_json(const DetectorState& state);
/// Throws VersionMismatch or CorruptCheckpoint.
DetectorState detector_from_json(const nlohmann::json& j);

void save_detector(const DetectorState& state, const std::filesystem::path& path);
DetectorState load_detector(const std::filesystem::path& path);

}  // namespace miner
