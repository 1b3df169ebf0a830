#include "miner/al.hpp"

#include <algorithm>

#include "miner/base64.hpp"
#include "miner/error.hpp"
#include "miner/png_codec.hpp"
#include "miner/random.hpp"

namespace miner {
namespace {

std::vector<std::uint8_t> thumbnail(const SyntheticImage& image, const BoundingBox& box) {
  return encode_png({box.width(), box.height(), crop_pixels(image, box)});
}

AnnotationRequest make_request(const RegionProposal& proposal, const ImageIndex& images,
                               const DetectorState& state, std::optional<double> s_score, int round) {
  AnnotationRequest req;
  req.request_id = "req-" + std::to_string(round) + "-" + proposal.id;
  req.proposal_id = proposal.id;
  req.image_id = proposal.image_id;
  req.box = proposal.box;
  req.s_score = s_score;
  req.positive_categories = positive_categories(classify(state, proposal.features));
  req.thumbnail_png = thumbnail(images.at(proposal.image_id), proposal.box);
  req.created_at = round;
  return req;
}

}  // namespace

const char* to_string(AnnotatorKind kind) noexcept {
  return kind == AnnotatorKind::Human ? "human" : "simulated-oracle";
}

AnnotatorKind annotator_kind_from_string(const std::string& text) {
  if (text == "human") return AnnotatorKind::Human;
  if (text == "simulated-oracle" || text == "simulated") return AnnotatorKind::SimulatedOracle;
  throw Error(ErrorCode::InvalidArgument, "unknown annotator '" + text + "'");
}

nlohmann::json to_json(const AnnotationRequest& r) {
  return {{"request_id", r.request_id},
          {"proposal_id", r.proposal_id},
          {"image_id", r.image_id},
          {"box", to_json(r.box)},
          {"s_score", r.s_score ? nlohmann::json(*r.s_score) : nlohmann::json()},
          {"positive_categories", r.positive_categories},
          {"thumbnail_png_base64", base64_encode(r.thumbnail_png)},
          {"round", r.created_at}};
}

AnnotationRequest annotation_request_from_json(const nlohmann::json& j) {
  AnnotationRequest r;
  try {
    r.request_id = j.at("request_id").get<std::string>();
    r.proposal_id = j.at("proposal_id").get<std::string>();
    r.image_id = j.at("image_id").get<std::string>();
    r.box = box_from_json(j.at("box"));
    if (!j.at("s_score").is_null()) r.s_score = j.at("s_score").get<double>();
    r.positive_categories = j.at("positive_categories").get<std::vector<int>>();
    auto png = base64_decode(j.at("thumbnail_png_base64").get<std::string>());
    if (!png) throw Error(ErrorCode::MalformedRecord, "thumbnail is not base64");
    r.thumbnail_png = std::move(*png);
    r.created_at = j.at("round").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, e.what());
  }
  return r;
}

nlohmann::json to_json(const AnnotationResult& r) {
  nlohmann::json j = {{"request_id", r.request_id}, {"label", r.label}, {"annotator", to_string(r.annotator)}};
  if (r.corrected_box) j["corrected_box"] = to_json(*r.corrected_box);
  return j;
}

AnnotationResult annotation_result_from_json(const nlohmann::json& j) {
  AnnotationResult r;
  try {
    r.request_id = j.at("request_id").get<std::string>();
    r.label = j.at("label").get<int>();
    if (j.contains("corrected_box") && !j["corrected_box"].is_null())
      r.corrected_box = box_from_json(j["corrected_box"]);
    r.annotator = annotator_kind_from_string(j.value("annotator", std::string("human")));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, e.what());
  }
  return r;
}

AnnotationResult oracle_annotate(const AnnotationRequest& request, const ImageIndex& images) {
  const auto& image = images.at(request.image_id);
  AnnotationResult result{request.request_id, kBackgroundLabel, std::nullopt, AnnotatorKind::SimulatedOracle};
  double best = -1.0;
  const GroundTruthObject* match = nullptr;
  for (const auto& o : image.objects) {
    const double v = iou(request.box, o.box);
    if (v > best) {
      best = v;
      match = &o;
    }
  }
  if (match && best >= 0.5) {
    result.label = match->category;
    result.corrected_box = match->box;
  }
  return result;
}

std::vector<AnnotationResult> SimulatedOracle::annotate(const std::vector<AnnotationRequest>& requests) {
  std::vector<AnnotationResult> out;
  out.reserve(requests.size());
  for (const auto& r : requests) out.push_back(oracle_annotate(r, images_));
  return out;
}

void UnlabeledPool::add(RegionProposal proposal) {
  const std::string id = proposal.id;
  if (!items_.emplace(id, std::move(proposal)).second)
    throw Error(ErrorCode::InvalidArgument, "duplicate unlabeled proposal " + id);
}

const RegionProposal& UnlabeledPool::at(const std::string& id) const {
  const auto it = items_.find(id);
  if (it == items_.end()) throw Error(ErrorCode::InvalidArgument, "proposal " + id + " is not unlabeled");
  return it->second;
}

RegionProposal UnlabeledPool::take(const std::string& id) {
  auto node = items_.extract(id);
  if (node.empty()) throw Error(ErrorCode::InvalidArgument, "proposal " + id + " is not unlabeled");
  return std::move(node.mapped());
}

std::vector<std::string> UnlabeledPool::ids() const {
  std::vector<std::string> out;
  out.reserve(items_.size());
  for (const auto& [id, _] : items_) out.push_back(id);
  return out;
}

void LabeledPool::add(TrainingSample sample) {
  if (!ids_.insert(sample.proposal.id).second)
    throw Error(ErrorCode::InvalidArgument, "duplicate labeled proposal " + sample.proposal.id);
  if (sample.label.source != LabelSource::GroundTruth && sample.label.source != LabelSource::User)
    throw Error(ErrorCode::InvalidArgument, "labeled pool only holds ground-truth or user labels");
  samples_.push_back(std::move(sample));
}

std::vector<int> positive_categories(std::span<const double> probabilities) {
  std::vector<int> out;
  for (std::size_t j = 0; j < probabilities.size(); ++j)
    if (probabilities[j] > 0.5) out.push_back(static_cast<int>(j));
  return out;
}

std::vector<AnnotationRequest> select_low_consistency(std::span<const ConsistencyRecord> records,
                                                      const UnlabeledPool& pool, const ImageIndex& images,
                                                      const DetectorState& state,
                                                      const LowConsistencyParams& params,
                                                      std::uint64_t seed, int round) {
  if (params.z < 1) throw Error(ErrorCode::InvalidArgument, "z must be >= 1");
  if (!(params.tau_low > 0.0 && params.tau_low < 1.0))
    throw Error(ErrorCode::InvalidArgument, "tau_low must lie in (0,1)");

  std::map<std::string, const ConsistencyRecord*> eligible;  // sorted by proposal id
  for (const auto& rec : records) {
    if (!rec.s_score || !(*rec.s_score < params.tau_low)) continue;
    if (!pool.contains(rec.proposal_id)) continue;
    const auto& proposal = pool.at(rec.proposal_id);
    const auto positives = positive_categories(classify(state, proposal.features));
    if (static_cast<int>(positives.size()) < params.min_positive) continue;
    eligible[rec.proposal_id] = &rec;
  }
  std::vector<const ConsistencyRecord*> ordered;
  for (const auto& [_, rec] : eligible) ordered.push_back(rec);

  Rng rng(seed);
  std::vector<AnnotationRequest> out;
  for (std::size_t idx : rng.sample_indices(ordered.size(), static_cast<std::size_t>(params.z))) {
    const auto* rec = ordered[idx];
    out.push_back(make_request(pool.at(rec->proposal_id), images, state, rec->s_score, round));
  }
  return out;
}

std::vector<AnnotationRequest> select_random(const UnlabeledPool& pool, const ImageIndex& images,
                                             const DetectorState& state, int z, std::uint64_t seed,
                                             int round) {
  if (z < 1) throw Error(ErrorCode::InvalidArgument, "z must be >= 1");
  const auto ids = pool.ids();
  Rng rng(seed);
  std::vector<AnnotationRequest> out;
  for (std::size_t idx : rng.sample_indices(ids.size(), static_cast<std::size_t>(z)))
    out.push_back(make_request(pool.at(ids[idx]), images, state, std::nullopt, round));
  return out;
}

ApplyReport apply_annotations(std::span<const AnnotationResult> results,
                              const std::map<std::string, AnnotationRequest>& pending,
                              SamplePools& pools, const ImageIndex& images, int num_categories) {
  ApplyReport report;
  std::map<std::string, const AnnotationResult*> batch;
  std::vector<const AnnotationResult*> fresh;
  for (const auto& r : results) {
    if (auto it = pools.applied.find(r.request_id); it != pools.applied.end()) {
      if (!(it->second.label == r.label && it->second.corrected_box == r.corrected_box))
        throw Error(ErrorCode::ConflictingResult, "request " + r.request_id + " was already labeled differently");
      continue;
    }
    if (auto it = batch.find(r.request_id); it != batch.end()) {
      if (!(it->second->label == r.label && it->second->corrected_box == r.corrected_box))
        throw Error(ErrorCode::ConflictingResult, "conflicting results for " + r.request_id);
      continue;
    }
    const auto req = pending.find(r.request_id);
    if (req == pending.end())
      throw Error(ErrorCode::StaleRequest, "request " + r.request_id + " is not pending");
    if (!pools.unlabeled.contains(req->second.proposal_id))
      throw Error(ErrorCode::StaleRequest, "proposal " + req->second.proposal_id + " is no longer unlabeled");
    if (r.label != kBackgroundLabel && (r.label < 0 || r.label >= num_categories))
      throw Error(ErrorCode::InvalidArgument, "label " + std::to_string(r.label) + " out of range");
    if (r.corrected_box) {
      const auto& img = images.at(req->second.image_id);
      if (!fits_inside(*r.corrected_box, img.width, img.height))
        throw Error(ErrorCode::InvalidArgument, "corrected box outside image " + img.id);
    }
    batch.emplace(r.request_id, &r);
    fresh.push_back(&r);
  }
  report.duplicates = results.size() - fresh.size();

  for (const auto* r : fresh) {
    const auto& req = pending.at(r->request_id);
    RegionProposal proposal = pools.unlabeled.take(req.proposal_id);
    LabelVector label = r->label == kBackgroundLabel
                            ? LabelVector::all_negative(num_categories, LabelSource::User)
                            : LabelVector::one_hot(num_categories, r->label, LabelSource::User);
    if (r->label != kBackgroundLabel)
      label.regression_target = encode_deltas(proposal.box, r->corrected_box.value_or(proposal.box));
    pools.labeled.add({std::move(proposal), std::move(label)});
    pools.applied.emplace(r->request_id, *r);
    ++report.applied;
  }
  return report;
}

}  // namespace miner
