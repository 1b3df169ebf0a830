#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "miner/al.hpp"
#include "miner/annotation_queue.hpp"
#include "miner/detector.hpp"
#include "miner/evaluation.hpp"
#include "miner/random.hpp"
#include "miner/ssm.hpp"
#include "miner/synthbench.hpp"

namespace miner {

enum class SelectionStrategy { LowConsistency, Random };
enum class PseudoLabeling { CrossImage, SingleImage, None };

const char* to_string(SelectionStrategy s) noexcept;
const char* to_string(PseudoLabeling p) noexcept;

struct MiningConfig {
  std::string preset = "desk";
  double pace = 0.9;            // lambda
  int top_k = 50;               // k
  int validation_images = 5;    // N
  double iou_gamma = 0.5;       // gamma
  int annotation_batch = 10;    // z
  int batches_per_round = 20;   // T
  double tau_low = 0.1;
  int min_positive = 2;
  double learning_rate = 0.05;
  int batch_size = 32;
  /// Unlabeled proposals drawn per round for scoring and pseudo-labeling (0 = all).
  int mining_pool = 256;
  /// A record is reused for this many mini-batches before it is rescored.
  int staleness_window = 5;
  /// Supervised steps on the initially labeled samples before the first round.
  int warmup_batches = 20000;
  int jitter_per_object = 2;
  int negatives_per_image = 4;
  /// Background windows overlapping an object with IoU in [0.1, 0.5).
  int hard_negatives_per_object = 4;
  std::optional<int> annotation_budget;
  int max_rounds = 1000;
  SelectionStrategy selection = SelectionStrategy::LowConsistency;
  PseudoLabeling pseudo_labeling = PseudoLabeling::CrossImage;
  std::uint64_t seed = 1;
  bool log_traces = true;
  unsigned workers = 0;

  static MiningConfig desk();
  /// Full-scale hyperparameters {lambda, k, N, gamma, z} = {0.9, 500, 5, 0.5, 100}.
  static MiningConfig paper();

  SsmParams ssm_params() const { return {pace, iou_gamma, validation_images}; }
};

void validate(const MiningConfig& config);
nlohmann::json to_json(const MiningConfig& config);
/// Starts from the named "preset" (default desk) and applies the other keys.
MiningConfig mining_config_from_json(const nlohmann::json& j);

/// Append-only event log. Events carry a strictly increasing sequence number
/// and the (round, batch) they belong to; each event is one JSON line.
class RunLog {
 public:
  explicit RunLog(std::uint64_t next_seq = 0) : next_seq_(next_seq) {}

  void append(int round, int batch, const std::string& type, nlohmann::json payload);
  /// Mirrors every later event to `path` (appending).
  void attach_file(const std::filesystem::path& path);

  const std::vector<std::string>& lines() const noexcept { return lines_; }
  std::string text() const;
  std::uint64_t next_seq() const noexcept { return next_seq_; }

 private:
  std::uint64_t next_seq_;
  std::vector<std::string> lines_;
  std::filesystem::path file_;
};

/// Checks event ordering and that every pseudo-label assignment is discarded
/// within its own mini-batch. Returns human-readable violations.
std::vector<std::string> verify_run_log(const std::vector<std::string>& lines);

/// Label the hidden ground truth gives `box`: the category of the max-IoU
/// object when IoU >= 0.5, else kBackgroundLabel.
int ground_truth_label(const SyntheticImage& image, const BoundingBox& box);

/// The alternating mining loop: per round, T mini-batches of
/// {score, re-rank, pseudo-label, train, discard}, then low-consistency
/// annotation; stops when nothing is left to annotate or the budget is spent.
class Engine {
 public:
  Engine(MiningConfig config, const Dataset& dataset, Annotator& annotator,
         std::optional<std::filesystem::path> run_dir = std::nullopt);

  /// Restores an engine from an end-of-round checkpoint. Throws
  /// VersionMismatch or CorruptCheckpoint without side effects.
  static std::unique_ptr<Engine> resume(const std::filesystem::path& checkpoint, const Dataset& dataset,
                                        Annotator& annotator,
                                        std::optional<std::filesystem::path> run_dir = std::nullopt);

  /// Runs one round; returns false once the loop has terminated.
  bool run_round();
  /// Runs rounds until termination.
  void run();

  void checkpoint(const std::filesystem::path& path) const;

  void set_stats_sink(std::function<void(const QueueStats&)> sink) { stats_sink_ = std::move(sink); }

  const MiningConfig& config() const noexcept { return config_; }
  const DetectorState& state() const noexcept { return state_; }
  const RunLog& log() const noexcept { return log_; }
  const SamplePools& pools() const noexcept { return pools_; }
  int rounds_completed() const noexcept { return round_; }
  bool terminated() const noexcept { return terminated_; }
  const std::string& termination_reason() const noexcept { return termination_reason_; }
  std::size_t annotations_used() const noexcept { return annotations_used_; }
  std::size_t initial_labeled_count() const noexcept { return initial_labeled_count_; }
  /// Ground-truth boxes of the labeled split; the base of annotated% and pseudo%.
  std::size_t pre_given_annotations() const noexcept { return pre_given_annotations_; }
  std::size_t pseudo_labeled_count() const noexcept { return pseudo_ever_.size(); }
  std::optional<double> last_map() const noexcept { return last_map_; }

 private:
  struct CachedRecord {
    ConsistencyRecord record;
    std::uint64_t scored_at = 0;
  };

  Engine(MiningConfig config, const Dataset& dataset, Annotator& annotator,
         std::optional<std::filesystem::path> run_dir, bool fresh);

  void initialize();
  void run_batch(int batch, const std::vector<std::string>& mining, std::map<std::string, CachedRecord>& cache);
  std::vector<AnnotationRequest> select_requests(const std::map<std::string, CachedRecord>& cache);
  void evaluate_and_record();
  void terminate(const std::string& reason);
  void publish_stats() const;
  std::vector<TrainingSample> sample_labeled(Rng& rng) const;
  void open_run_dir();

  MiningConfig config_;
  const Dataset& dataset_;
  Annotator& annotator_;
  std::optional<std::filesystem::path> run_dir_;
  ImageIndex images_;
  std::vector<const SyntheticImage*> annotated_;
  std::vector<const SyntheticImage*> test_;

  DetectorState state_;
  SamplePools pools_;
  RunLog log_;
  std::size_t initial_labeled_count_ = 0;
  std::size_t pre_given_annotations_ = 0;
  std::size_t annotations_used_ = 0;
  std::set<std::string> pseudo_ever_;
  int round_ = 0;
  std::uint64_t global_batch_ = 0;
  bool terminated_ = false;
  std::string termination_reason_;
  std::optional<double> last_map_;
  std::function<void(const QueueStats&)> stats_sink_;
};

struct RunOutcome {
  DetectorState state;
  RunLog log;
  std::string termination_reason;
  std::optional<double> final_map;
  std::size_t annotations_used = 0;
  std::size_t pseudo_labeled = 0;
};

RunOutcome run(const MiningConfig& config, const Dataset& dataset, Annotator& annotator,
               std::optional<std::filesystem::path> run_dir = std::nullopt);

}  // namespace miner
