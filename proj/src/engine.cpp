#include "miner/engine.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "miner/error.hpp"
#include "miner/features.hpp"
#include "miner/parallel.hpp"
#include "miner/random.hpp"

namespace miner {

namespace {

using nlohmann::json;

constexpr int kEngineFormatVersion = 1;

// Seed stream tags.
constexpr std::uint64_t kTagInit = 0x1417;
constexpr std::uint64_t kTagWarmup = 0x3A53;
constexpr std::uint64_t kTagMine = 0x313E;
constexpr std::uint64_t kTagScore = 0x5C03E;
constexpr std::uint64_t kTagLabeled = 0x1AB3;
constexpr std::uint64_t kTagSelect = 0x5E1;

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::InvalidArgument, "mining config: " + what);
}

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed << v;
  return out.str();
}

json sample_to_json(const TrainingSample& s) {
  json j{{"id", s.proposal.id},
         {"image_id", s.proposal.image_id},
         {"box", to_json(s.proposal.box)},
         {"provenance", to_string(s.proposal.provenance)},
         {"label", s.label.values},
         {"source", to_string(s.label.source)}};
  if (s.label.regression_target) j["target"] = *s.label.regression_target;
  return j;
}

RegionProposal make_proposal(std::string id, const SyntheticImage& image, const BoundingBox& box,
                             Provenance provenance) {
  RegionProposal p;
  p.id = std::move(id);
  p.image_id = image.id;
  p.box = box;
  p.features = extract_features(image, box);
  p.provenance = provenance;
  return p;
}

TrainingSample sample_from_json(const json& j, const ImageIndex& images) {
  const auto& image = images.at(j.at("image_id").get<std::string>());
  TrainingSample s;
  s.proposal = make_proposal(j.at("id").get<std::string>(), image, box_from_json(j.at("box")),
                             provenance_from_string(j.at("provenance").get<std::string>()));
  s.label.values = j.at("label").get<std::vector<int>>();
  s.label.source = label_source_from_string(j.at("source").get<std::string>());
  if (j.contains("target")) s.label.regression_target = j.at("target").get<BoxDeltas>();
  return s;
}

double max_iou(const BoundingBox& box, const SyntheticImage& image) {
  double best = 0.0;
  for (const auto& o : image.objects) best = std::max(best, iou(box, o.box));
  return best;
}

}  // namespace

const char* to_string(SelectionStrategy s) noexcept {
  return s == SelectionStrategy::LowConsistency ? "low-consistency" : "random";
}

const char* to_string(PseudoLabeling p) noexcept {
  switch (p) {
    case PseudoLabeling::CrossImage: return "cross-image";
    case PseudoLabeling::SingleImage: return "single-image";
    case PseudoLabeling::None: return "none";
  }
  return "none";
}

MiningConfig MiningConfig::desk() { return MiningConfig{}; }

MiningConfig MiningConfig::paper() {
  MiningConfig c;
  c.preset = "paper";
  c.pace = 0.9;
  c.top_k = 500;
  c.validation_images = 5;
  c.iou_gamma = 0.5;
  c.annotation_batch = 100;
  return c;
}

void validate(const MiningConfig& c) {
  require(c.pace >= 0.0 && c.pace <= 1.0, "pace must lie in [0,1]");
  require(c.iou_gamma > 0.0 && c.iou_gamma < 1.0, "iou_gamma must lie in (0,1)");
  require(c.top_k >= 1 && c.validation_images >= 1 && c.annotation_batch >= 1 && c.batches_per_round >= 1,
          "k, N, z and T must be at least 1");
  require(c.batch_size >= 1 && c.mining_pool >= 0, "batch sizes must be positive");
  require(c.staleness_window >= 1, "staleness_window must be at least 1");
  require(c.warmup_batches >= 0 && c.jitter_per_object >= 0 && c.negatives_per_image >= 0 &&
              c.hard_negatives_per_object >= 0,
          "warm-up counts must be non-negative");
  require(c.learning_rate > 0.0, "learning_rate must be positive");
  require(c.min_positive >= 1, "min_positive must be at least 1");
  require(c.max_rounds >= 1, "max_rounds must be at least 1");
  require(!c.annotation_budget || *c.annotation_budget >= 0, "annotation_budget must be non-negative");
}

json to_json(const MiningConfig& c) {
  json j{{"preset", c.preset},
         {"pace", c.pace},
         {"top_k", c.top_k},
         {"validation_images", c.validation_images},
         {"iou_gamma", c.iou_gamma},
         {"annotation_batch", c.annotation_batch},
         {"batches_per_round", c.batches_per_round},
         {"tau_low", c.tau_low},
         {"min_positive", c.min_positive},
         {"learning_rate", c.learning_rate},
         {"batch_size", c.batch_size},
         {"mining_pool", c.mining_pool},
         {"staleness_window", c.staleness_window},
         {"warmup_batches", c.warmup_batches},
         {"jitter_per_object", c.jitter_per_object},
         {"negatives_per_image", c.negatives_per_image},
         {"hard_negatives_per_object", c.hard_negatives_per_object},
         {"annotation_budget", c.annotation_budget ? json(*c.annotation_budget) : json(nullptr)},
         {"max_rounds", c.max_rounds},
         {"selection", to_string(c.selection)},
         {"pseudo_labeling", to_string(c.pseudo_labeling)},
         {"seed", c.seed},
         {"log_traces", c.log_traces},
         {"workers", c.workers}};
  return j;
}

MiningConfig mining_config_from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, "mining config must be a JSON object");
  const std::string preset = j.value("preset", std::string("desk"));
  MiningConfig c;
  if (preset == "paper") {
    c = MiningConfig::paper();
  } else if (preset != "desk") {
    throw Error(ErrorCode::InvalidArgument, "unknown preset '" + preset + "'");
  }
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "preset") continue;
      else if (key == "pace") c.pace = value.get<double>();
      else if (key == "top_k") c.top_k = value.get<int>();
      else if (key == "validation_images") c.validation_images = value.get<int>();
      else if (key == "iou_gamma") c.iou_gamma = value.get<double>();
      else if (key == "annotation_batch") c.annotation_batch = value.get<int>();
      else if (key == "batches_per_round") c.batches_per_round = value.get<int>();
      else if (key == "tau_low") c.tau_low = value.get<double>();
      else if (key == "min_positive") c.min_positive = value.get<int>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "mining_pool") c.mining_pool = value.get<int>();
      else if (key == "staleness_window") c.staleness_window = value.get<int>();
      else if (key == "warmup_batches") c.warmup_batches = value.get<int>();
      else if (key == "jitter_per_object") c.jitter_per_object = value.get<int>();
      else if (key == "negatives_per_image") c.negatives_per_image = value.get<int>();
      else if (key == "hard_negatives_per_object") c.hard_negatives_per_object = value.get<int>();
      else if (key == "annotation_budget") {
        if (value.is_null()) c.annotation_budget.reset();
        else c.annotation_budget = value.get<int>();
      } else if (key == "max_rounds") c.max_rounds = value.get<int>();
      else if (key == "selection") {
        const auto s = value.get<std::string>();
        if (s == "low-consistency" || s == "ssm") c.selection = SelectionStrategy::LowConsistency;
        else if (s == "random") c.selection = SelectionStrategy::Random;
        else throw Error(ErrorCode::InvalidArgument, "unknown selection '" + s + "'");
      } else if (key == "pseudo_labeling") {
        const auto s = value.get<std::string>();
        if (s == "cross-image") c.pseudo_labeling = PseudoLabeling::CrossImage;
        else if (s == "single-image") c.pseudo_labeling = PseudoLabeling::SingleImage;
        else if (s == "none") c.pseudo_labeling = PseudoLabeling::None;
        else throw Error(ErrorCode::InvalidArgument, "unknown pseudo_labeling '" + s + "'");
      } else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "log_traces") c.log_traces = value.get<bool>();
      else if (key == "workers") c.workers = value.get<unsigned>();
      else throw Error(ErrorCode::InvalidArgument, "unknown config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("mining config: ") + e.what());
  }
  validate(c);
  return c;
}

void RunLog::append(int round, int batch, const std::string& type, json payload) {
  json event{{"seq", next_seq_++}, {"round", round}, {"batch", batch}, {"type", type}};
  event["data"] = std::move(payload);
  lines_.push_back(event.dump());
  if (!file_.empty()) {
    std::ofstream out(file_, std::ios::app | std::ios::binary);
    out << lines_.back() << '\n';
    if (!out) throw Error(ErrorCode::Io, "cannot append to " + file_.string());
  }
}

void RunLog::attach_file(const std::filesystem::path& path) { file_ = path; }

std::string RunLog::text() const {
  std::string out;
  for (const auto& l : lines_) {
    out += l;
    out += '\n';
  }
  return out;
}

std::vector<std::string> verify_run_log(const std::vector<std::string>& lines) {
  std::vector<std::string> problems;
  std::optional<std::uint64_t> last_seq;
  std::pair<int, int> last_pos{-1, -1};
  std::optional<std::pair<int, int>> open_pos;
  std::vector<std::string> open_ids;
  auto close_open = [&](const std::string& where) {
    if (open_pos)
      problems.push_back("pseudo-labels assigned at round " + std::to_string(open_pos->first) + " batch " +
                         std::to_string(open_pos->second) + " were not discarded before " + where);
    open_pos.reset();
    open_ids.clear();
  };
  for (std::size_t i = 0; i < lines.size(); ++i) {
    json e;
    try {
      e = json::parse(lines[i]);
    } catch (const json::exception&) {
      problems.push_back("line " + std::to_string(i + 1) + " is not JSON");
      continue;
    }
    const auto seq = e.at("seq").get<std::uint64_t>();
    const std::pair<int, int> pos{e.at("round").get<int>(), e.at("batch").get<int>()};
    const auto type = e.at("type").get<std::string>();
    if (last_seq && seq <= *last_seq) problems.push_back("seq not increasing at line " + std::to_string(i + 1));
    if (pos < last_pos) problems.push_back("(round, batch) decreases at line " + std::to_string(i + 1));
    if (open_pos && pos != *open_pos) close_open("line " + std::to_string(i + 1));
    if (type == "pseudo-assigned") {
      if (open_pos) close_open("a second assignment at line " + std::to_string(i + 1));
      open_pos = pos;
      for (const auto& item : e.at("data").at("items")) open_ids.push_back(item.at("proposal_id").get<std::string>());
    } else if (type == "pseudo-discarded") {
      auto ids = e.at("data").at("proposal_ids").get<std::vector<std::string>>();
      if (!open_pos) {
        problems.push_back("discard without assignment at line " + std::to_string(i + 1));
      } else {
        std::sort(ids.begin(), ids.end());
        std::sort(open_ids.begin(), open_ids.end());
        if (ids != open_ids) problems.push_back("discard at line " + std::to_string(i + 1) + " does not match");
        open_pos.reset();
        open_ids.clear();
      }
    }
    last_seq = seq;
    last_pos = pos;
  }
  if (open_pos) close_open("the end of the log");
  return problems;
}

int ground_truth_label(const SyntheticImage& image, const BoundingBox& box) {
  double best = -1.0;
  int label = kBackgroundLabel;
  for (const auto& o : image.objects) {
    const double v = iou(box, o.box);
    if (v > best) {
      best = v;
      label = o.category;
    }
  }
  return best >= 0.5 ? label : kBackgroundLabel;
}

Engine::Engine(MiningConfig config, const Dataset& dataset, Annotator& annotator,
               std::optional<std::filesystem::path> run_dir)
    : Engine(std::move(config), dataset, annotator, std::move(run_dir), true) {}

Engine::Engine(MiningConfig config, const Dataset& dataset, Annotator& annotator,
               std::optional<std::filesystem::path> run_dir, bool fresh)
    : config_(std::move(config)),
      dataset_(dataset),
      annotator_(annotator),
      run_dir_(std::move(run_dir)),
      images_(dataset) {
  validate(config_);
  annotated_ = dataset_.split(Split::TrainLabeled);
  test_ = dataset_.split(Split::Test);
  if (annotated_.empty()) throw Error(ErrorCode::InvalidArgument, "dataset has no labeled images");
  if (fresh) initialize();
}

void Engine::open_run_dir() {
  if (!run_dir_) return;
  std::filesystem::create_directories(*run_dir_ / "checkpoints");
  log_.attach_file(*run_dir_ / "runlog.jsonl");
}

void Engine::initialize() {
  const int m = dataset_.spec.num_categories;
  if (run_dir_) {
    std::filesystem::create_directories(*run_dir_ / "checkpoints");
    std::ofstream(*run_dir_ / "config.json") << to_json(config_).dump(2) << '\n';
    std::ofstream(*run_dir_ / "runlog.jsonl", std::ios::trunc);
    std::ofstream(*run_dir_ / "metrics.csv", std::ios::trunc) << "round,annotations_used,pseudo_count,mAP\n";
  }
  open_run_dir();

  for (const auto* image : annotated_) {
    Rng rng(derive_seed(config_.seed, {kTagInit, fnv1a(image->id)}));
    for (std::size_t k = 0; k < image->objects.size(); ++k) {
      const auto& object = image->objects[k];
      const std::string base = image->id + "/gt" + std::to_string(k);
      TrainingSample s{make_proposal(base, *image, object.box, Provenance::GroundTruthJittered),
                       LabelVector::one_hot(m, object.category, LabelSource::GroundTruth)};
      s.label.regression_target = BoxDeltas{0.0, 0.0, 0.0, 0.0};
      pools_.labeled.add(std::move(s));
      for (int t = 0; t < config_.jitter_per_object; ++t) {
        const auto& b = object.box;
        const auto dw = std::max<std::int64_t>(1, b.width() / 6);
        const auto dh = std::max<std::int64_t>(1, b.height() / 6);
        for (int attempt = 0; attempt < 20; ++attempt) {
          BoundingBox j{static_cast<int>(b.x_min + rng.uniform_int(-dw, dw)),
                        static_cast<int>(b.y_min + rng.uniform_int(-dh, dh)),
                        static_cast<int>(b.x_max + rng.uniform_int(-dw, dw)),
                        static_cast<int>(b.y_max + rng.uniform_int(-dh, dh))};
          j = BoundingBox{std::max(0, j.x_min), std::max(0, j.y_min), std::min(image->width, j.x_max),
                          std::min(image->height, j.y_max)};
          if (!is_valid(j) || iou(j, b) < 0.6) continue;
          TrainingSample js{make_proposal(base + "j" + std::to_string(t), *image, j,
                                          Provenance::GroundTruthJittered),
                            LabelVector::one_hot(m, object.category, LabelSource::GroundTruth)};
          js.label.regression_target = encode_deltas(j, b);
          pools_.labeled.add(std::move(js));
          break;
        }
      }
    }
    const auto& windows = sliding_windows(image->width, image->height);
    int hard = 0;
    for (std::size_t k = 0; k < image->objects.size(); ++k) {
      std::vector<const BoundingBox*> near;
      for (const auto& w : windows) {
        const double v = iou(w, image->objects[k].box);
        if (v >= 0.1 && v < 0.5 && max_iou(w, *image) < 0.5) near.push_back(&w);
      }
      for (auto i : rng.sample_indices(near.size(), std::min<std::size_t>(near.size(), config_.hard_negatives_per_object))) {
        const std::string id = image->id + "/hn" + std::to_string(hard++);
        pools_.labeled.add({make_proposal(id, *image, *near[i], Provenance::GroundTruthJittered),
                            LabelVector::all_negative(m, LabelSource::GroundTruth)});
      }
    }
    for (int t = 0, attempt = 0; t < config_.negatives_per_image && attempt < 50 && !windows.empty(); ++attempt) {
      const auto& w = windows[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(windows.size()) - 1))];
      if (max_iou(w, *image) >= 0.3) continue;
      const std::string id = image->id + "/bg" + std::to_string(t);
      pools_.labeled.add({make_proposal(id, *image, w, Provenance::GroundTruthJittered),
                          LabelVector::all_negative(m, LabelSource::GroundTruth)});
      ++t;
    }
  }
  initial_labeled_count_ = pools_.labeled.size();
  pre_given_annotations_ = 0;
  for (const auto* image : annotated_) pre_given_annotations_ += image->objects.size();

  state_ = DetectorState::zeros(m);
  double warm_objective = 0.0;
  for (int i = 0; i < config_.warmup_batches; ++i) {
    Rng rng(derive_seed(config_.seed, {kTagWarmup, static_cast<std::uint64_t>(i)}));
    const auto batch = sample_labeled(rng);
    warm_objective = batch_gradient(state_, batch).objective;
    state_ = train_step(state_, batch, config_.learning_rate);
  }

  for (const auto* image : dataset_.split(Split::Unlabeled))
    for (auto& p : propose(*image, state_)) pools_.unlabeled.add(std::move(p));

  log_.append(0, 0, "run-started",
              {{"config", to_json(config_)},
               {"labeled_images", annotated_.size()},
               {"pre_given_annotations", pre_given_annotations_},
               {"initial_labeled", initial_labeled_count_},
               {"unlabeled", pools_.unlabeled.size()},
               {"readings",
                {{"j_star", "argmax of phi over the proposal's own features"},
                 {"omega", "every proposal of the composited validation image"},
                 {"weight_loss", "l_j against +1 for j* and -1 otherwise"},
                 {"annotation_base", "ground-truth boxes of the labeled split"}}},
               {"warmup_batches", config_.warmup_batches},
               {"warmup_objective", warm_objective}});
  const auto result = evaluate_map(state_, test_);
  last_map_ = result.map;
  json ap = json::array();
  for (const auto& a : result.per_category) ap.push_back(a ? json(*a) : json(nullptr));
  log_.append(0, 0, "evaluation", {{"map", result.map}, {"ap", ap}, {"annotations_used", 0}, {"pseudo_count", 0}});
  if (run_dir_) {
    std::ofstream(*run_dir_ / "metrics.csv", std::ios::app)
        << "0,0,0," << format_double(result.map) << '\n';
  }
  publish_stats();
}

std::vector<TrainingSample> Engine::sample_labeled(Rng& rng) const {
  const auto n = pools_.labeled.size();
  const auto count = std::min<std::size_t>(n, static_cast<std::size_t>(config_.batch_size));
  std::vector<TrainingSample> batch;
  batch.reserve(count);
  for (auto i : rng.sample_indices(n, count)) batch.push_back(pools_.labeled[i]);
  return batch;
}

void Engine::run_batch(int batch, const std::vector<std::string>& mining,
                       std::map<std::string, CachedRecord>& cache) {
  const int m = state_.num_categories;
  const int round = round_ + 1;
  const auto gb = ++global_batch_;
  const DetectorState snapshot = state_;
  const bool scoring = config_.pseudo_labeling != PseudoLabeling::None ||
                       config_.selection == SelectionStrategy::LowConsistency;
  std::vector<TrainingSample> pseudo;
  json assigned = json::array();

  if (scoring && !mining.empty()) {
    std::vector<std::string> stale;
    for (const auto& id : mining) {
      const auto it = cache.find(id);
      if (it == cache.end() || gb - it->second.scored_at >= static_cast<std::uint64_t>(config_.staleness_window))
        stale.push_back(id);
    }
    std::vector<ConsistencyRecord> fresh(stale.size());
    const auto params = config_.ssm_params();
    parallel_for(stale.size(), config_.workers, [&](std::size_t i) {
      const auto& proposal = pools_.unlabeled.at(stale[i]);
      if (config_.pseudo_labeling == PseudoLabeling::SingleImage) {
        fresh[i] = single_image_score(proposal, snapshot, params);
      } else {
        const auto seed = derive_seed(config_.seed, {kTagScore, static_cast<std::uint64_t>(round), fnv1a(proposal.id)});
        fresh[i] = consistency_score(proposal, images_.at(proposal.image_id), snapshot, annotated_, params, seed);
      }
    });
    json records = json::array();
    for (std::size_t i = 0; i < stale.size(); ++i) {
      records.push_back(to_json(fresh[i], config_.log_traces));
      cache[stale[i]] = CachedRecord{std::move(fresh[i]), gb};
    }
    if (!stale.empty()) log_.append(round, batch, "consistency-records", {{"records", std::move(records)}});

    if (config_.pseudo_labeling != PseudoLabeling::None) {
      std::vector<ConsistencyRecord> batch_records;
      batch_records.reserve(mining.size());
      for (const auto& id : mining) batch_records.push_back(cache.at(id).record);
      auto high = rerank_topk(batch_records, config_.top_k, m);
      assign_pseudo_labels(high, batch_records);
      for (const auto& group : high.per_category) {
        for (const auto& entry : group) {
          if (!entry.pseudo_label) continue;
          const auto& proposal = pools_.unlabeled.at(entry.proposal_id);
          const auto& image = images_.at(proposal.image_id);
          const auto category = entry.pseudo_label->positive_category();
          const int label = category ? *category : kBackgroundLabel;
          pseudo.push_back({proposal, *entry.pseudo_label});
          pseudo_ever_.insert(proposal.id);
          assigned.push_back(json{{"proposal_id", proposal.id},
                              {"label", label},
                              {"s", entry.s_score},
                              {"gt_agrees", ground_truth_label(image, proposal.box) == label}});
        }
      }
      json h = json::array();
      for (std::size_t j = 0; j < high.per_category.size(); ++j) {
        json ids_j = json::array();
        for (const auto& e : high.per_category[j]) ids_j.push_back(e.proposal_id);
        h.push_back(std::move(ids_j));
      }
      if (!assigned.empty()) log_.append(round, batch, "pseudo-assigned", {{"high_consistency", h}, {"items", assigned}});
    }
  }

  Rng rng(derive_seed(config_.seed, {kTagLabeled, static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(batch)}));
  auto training = sample_labeled(rng);
  const auto labeled_count = training.size();
  training.insert(training.end(), pseudo.begin(), pseudo.end());
  const double objective = batch_gradient(state_, training).objective;
  state_ = train_step(state_, training, config_.learning_rate);
  log_.append(round, batch, "train-step",
              {{"objective", objective},
               {"labeled", labeled_count},
               {"pseudo", pseudo.size()},
               {"update_counter", state_.update_counter}});
  if (!assigned.empty()) {
    json ids = json::array();
    for (const auto& a : assigned) ids.push_back(a.at("proposal_id"));
    log_.append(round, batch, "pseudo-discarded", {{"proposal_ids", ids}});
  }
}

std::vector<AnnotationRequest> Engine::select_requests(const std::map<std::string, CachedRecord>& cache) {
  const int round = round_ + 1;
  const auto seed = derive_seed(config_.seed, {kTagSelect, static_cast<std::uint64_t>(round)});
  if (config_.selection == SelectionStrategy::Random)
    return select_random(pools_.unlabeled, images_, state_, config_.annotation_batch, seed, round);
  std::vector<ConsistencyRecord> records;
  records.reserve(cache.size());
  for (const auto& [id, c] : cache)
    if (pools_.unlabeled.contains(id)) records.push_back(c.record);
  return select_low_consistency(records, pools_.unlabeled, images_, state_,
                                {config_.annotation_batch, config_.tau_low, config_.min_positive}, seed, round);
}

bool Engine::run_round() {
  if (terminated_) return false;
  const int round = round_ + 1;
  const int al_batch = config_.batches_per_round + 1;
  log_.append(round, 0, "round-started",
              {{"labeled", pools_.labeled.size()}, {"unlabeled", pools_.unlabeled.size()}});

  // The round's mining set: scored at its first batch, rescored once stale.
  std::vector<std::string> mining;
  if (!pools_.unlabeled.empty()) {
    const auto ids = pools_.unlabeled.ids();
    const auto want = config_.mining_pool == 0 ? ids.size()
                                               : std::min<std::size_t>(ids.size(), config_.mining_pool);
    Rng rng(derive_seed(config_.seed, {kTagMine, static_cast<std::uint64_t>(round)}));
    for (auto i : rng.sample_indices(ids.size(), want)) mining.push_back(ids[i]);
    std::sort(mining.begin(), mining.end());
  }
  std::map<std::string, CachedRecord> cache;
  for (int b = 1; b <= config_.batches_per_round; ++b) run_batch(b, mining, cache);

  std::optional<std::size_t> remaining;
  if (config_.annotation_budget) {
    const auto budget = static_cast<std::size_t>(*config_.annotation_budget);
    remaining = budget > annotations_used_ ? budget - annotations_used_ : 0;
  }
  if (remaining && *remaining == 0) {
    round_ = round;
    terminate("budget-exhausted");
    return false;
  }
  auto requests = select_requests(cache);
  if (remaining && requests.size() > *remaining) requests.resize(*remaining);
  json requested = json::array();
  for (const auto& r : requests) {
    json j = to_json(r);
    j.erase("thumbnail_png_base64");
    requested.push_back(std::move(j));
  }
  log_.append(round, al_batch, "annotation-requested", {{"requests", requested}});
  if (requests.empty()) {
    round_ = round;
    terminate("empty-U");
    return false;
  }

  const auto results = annotator_.annotate(requests);
  std::map<std::string, AnnotationRequest> pending;
  for (const auto& r : requests) pending.emplace(r.request_id, r);
  std::vector<AnnotationResult> answered;
  json result_json = json::array();
  json rejected = json::array();
  const int m = dataset_.spec.num_categories;
  for (const auto& r : results) {
    const auto req = pending.find(r.request_id);
    if (req == pending.end()) continue;
    const auto& img = images_.at(req->second.image_id);
    if ((r.label != kBackgroundLabel && (r.label < 0 || r.label >= m)) ||
        (r.corrected_box && !fits_inside(*r.corrected_box, img.width, img.height))) {
      rejected.push_back(to_json(r));
      continue;
    }
    answered.push_back(r);
    result_json.push_back(to_json(r));
  }
  const auto report = apply_annotations(answered, pending, pools_, images_, m);
  annotations_used_ += report.applied;
  json payload = {{"results", result_json}, {"applied", report.applied}, {"duplicates", report.duplicates}};
  if (!rejected.empty()) payload["rejected"] = rejected;
  log_.append(round, al_batch, "annotation-results", std::move(payload));
  if (answered.size() < requests.size()) {
    json expired = json::array();
    std::set<std::string> done;
    for (const auto& r : answered) done.insert(r.request_id);
    for (const auto& r : requests)
      if (!done.count(r.request_id)) expired.push_back(r.request_id);
    log_.append(round, al_batch, "annotation-expired", {{"request_ids", expired}});
  }

  round_ = round;
  evaluate_and_record();
  if (run_dir_) checkpoint(*run_dir_ / "checkpoints" / ("round-" + std::to_string(round_) + ".json"));
  if (round_ >= config_.max_rounds) {
    terminate("max-rounds");
    return false;
  }
  return true;
}

void Engine::evaluate_and_record() {
  const auto result = evaluate_map(state_, test_);
  last_map_ = result.map;
  json ap = json::array();
  for (const auto& a : result.per_category) ap.push_back(a ? json(*a) : json(nullptr));
  log_.append(round_, config_.batches_per_round + 1, "evaluation",
              {{"map", result.map},
               {"ap", ap},
               {"annotations_used", annotations_used_},
               {"pseudo_count", pseudo_ever_.size()}});
  if (run_dir_) {
    std::ofstream(*run_dir_ / "metrics.csv", std::ios::app)
        << round_ << ',' << annotations_used_ << ',' << pseudo_ever_.size() << ',' << format_double(result.map)
        << '\n';
  }
  publish_stats();
}

void Engine::terminate(const std::string& reason) {
  evaluate_and_record();
  terminated_ = true;
  termination_reason_ = reason;
  log_.append(round_, config_.batches_per_round + 1, "terminated",
              {{"reason", reason},
               {"rounds", round_},
               {"annotations_used", annotations_used_},
               {"pre_given_annotations", pre_given_annotations_},
               {"pseudo_count", pseudo_ever_.size()},
               {"map", last_map_ ? json(*last_map_) : json(nullptr)}});
  if (run_dir_) {
    save_detector(state_, *run_dir_ / "detector.json");
    checkpoint(*run_dir_ / "checkpoints" / ("round-" + std::to_string(round_) + ".json"));
  }
}

void Engine::publish_stats() const {
  if (stats_sink_) stats_sink_(QueueStats{round_, annotations_used_, pseudo_ever_.size(), last_map_});
}

void Engine::run() {
  while (run_round()) {
  }
}

void Engine::checkpoint(const std::filesystem::path& path) const {
  json labeled = json::array();
  for (const auto& s : pools_.labeled.samples()) labeled.push_back(sample_to_json(s));
  json unlabeled = json::array();
  for (const auto& [id, p] : pools_.unlabeled.items())
    unlabeled.push_back({{"id", id}, {"image_id", p.image_id}, {"box", to_json(p.box)},
                         {"provenance", to_string(p.provenance)}});
  json applied = json::array();
  for (const auto& [id, r] : pools_.applied) applied.push_back(to_json(r));
  json j{{"format_version", kEngineFormatVersion},
         {"kind", "engine-checkpoint"},
         {"config", to_json(config_)},
         {"detector", to_json(state_)},
         {"round", round_},
         {"global_batch", global_batch_},
         {"next_seq", log_.next_seq()},
         {"initial_labeled", initial_labeled_count_},
         {"pre_given_annotations", pre_given_annotations_},
         {"annotations_used", annotations_used_},
         {"pseudo_ever", pseudo_ever_},
         {"terminated", terminated_},
         {"termination_reason", termination_reason_},
         {"last_map", last_map_ ? json(*last_map_) : json(nullptr)},
         {"labeled", labeled},
         {"unlabeled", unlabeled},
         {"applied", applied}};
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << j.dump() << '\n';
    if (!out) throw Error(ErrorCode::Io, "cannot write checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

std::unique_ptr<Engine> Engine::resume(const std::filesystem::path& path, const Dataset& dataset,
                                       Annotator& annotator, std::optional<std::filesystem::path> run_dir) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot read checkpoint " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("format_version"))
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": not an engine checkpoint");
  if (j["format_version"] != kEngineFormatVersion)
    throw Error(ErrorCode::VersionMismatch, path.string() + ": unsupported checkpoint version " +
                                                j["format_version"].dump());
  std::unique_ptr<Engine> engine;
  try {
    if (j.at("kind") != "engine-checkpoint") throw Error(ErrorCode::CorruptCheckpoint, "wrong kind");
    auto config = mining_config_from_json(j.at("config"));
    engine.reset(new Engine(std::move(config), dataset, annotator, std::move(run_dir), false));
    Engine& e = *engine;
    e.state_ = detector_from_json(j.at("detector"));
    if (e.state_.num_categories != dataset.spec.num_categories)
      throw Error(ErrorCode::CorruptCheckpoint, "category count does not match the dataset");
    e.round_ = j.at("round").get<int>();
    e.global_batch_ = j.at("global_batch").get<std::uint64_t>();
    e.log_ = RunLog(j.at("next_seq").get<std::uint64_t>());
    e.initial_labeled_count_ = j.at("initial_labeled").get<std::size_t>();
    e.pre_given_annotations_ = j.at("pre_given_annotations").get<std::size_t>();
    e.annotations_used_ = j.at("annotations_used").get<std::size_t>();
    e.pseudo_ever_ = j.at("pseudo_ever").get<std::set<std::string>>();
    e.terminated_ = j.at("terminated").get<bool>();
    e.termination_reason_ = j.at("termination_reason").get<std::string>();
    if (!j.at("last_map").is_null()) e.last_map_ = j.at("last_map").get<double>();
    for (const auto& s : j.at("labeled")) e.pools_.labeled.add(sample_from_json(s, e.images_));
    for (const auto& u : j.at("unlabeled")) {
      const auto& image = e.images_.at(u.at("image_id").get<std::string>());
      e.pools_.unlabeled.add(make_proposal(u.at("id").get<std::string>(), image, box_from_json(u.at("box")),
                                           provenance_from_string(u.at("provenance").get<std::string>())));
    }
    for (const auto& a : j.at("applied")) {
      auto r = annotation_result_from_json(a);
      e.pools_.applied.emplace(r.request_id, std::move(r));
    }
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": " + ex.what());
  } catch (const Error& ex) {
    if (ex.code() == ErrorCode::VersionMismatch || ex.code() == ErrorCode::CorruptCheckpoint) throw;
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": " + ex.what());
  }
  engine->open_run_dir();
  return engine;
}

RunOutcome run(const MiningConfig& config, const Dataset& dataset, Annotator& annotator,
               std::optional<std::filesystem::path> run_dir) {
  Engine engine(config, dataset, annotator, std::move(run_dir));
  engine.run();
  return RunOutcome{engine.state(), engine.log(), engine.termination_reason(), engine.last_map(),
                    engine.annotations_used(), engine.pseudo_labeled_count()};
}

}  // namespace miner
