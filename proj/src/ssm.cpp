#include "miner/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "miner/error.hpp"
#include "miner/random.hpp"

namespace miner {
namespace {

int argmax(std::span<const double> values) {
  return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
}

void fill_weights(ConsistencyRecord& rec, const DetectorState& state, const RegionProposal& proposal) {
  auto losses = candidate_losses(state, proposal.features);
  rec.losses_positive = std::move(losses.positive);
  rec.losses_negative = std::move(losses.negative);
  // Each l_j is taken against the candidate pseudo-label: +1 for j*, -1 elsewhere.
  rec.v.assign(state.num_categories, 0);
  for (int j = 0; j < state.num_categories; ++j) {
    const double loss = j == rec.j_star ? rec.losses_positive[j] : rec.losses_negative[j];
    rec.v[j] = update_weights(loss, rec.f_value);
  }
}

}  // namespace

double ValidationTerm::value() const {
  if (num_proposals == 0) return 0.0;
  double sum = 0.0;
  for (const auto& o : overlapping) sum += o.phi;
  return sum / static_cast<double>(num_proposals);
}

double replay_score(std::span<const ValidationTerm> trace) {
  if (trace.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& t : trace) sum += t.value();
  return sum / static_cast<double>(trace.size());
}

double replay_f(std::span<const ValidationTerm> trace, double pace) { return pace * replay_score(trace); }

int update_weights(double loss, double f_value) noexcept { return loss <= f_value ? 1 : 0; }

CrossValidation cross_image_validate(const RegionProposal& proposal, const SyntheticImage& source,
                                     int category,
                                     std::span<const SyntheticImage* const> validation_images,
                                     const DetectorState& state, const SsmParams& params,
                                     std::uint64_t seed) {
  if (category < 0 || category >= state.num_categories)
    throw Error(ErrorCode::InvalidArgument, "category out of range");
  if (validation_images.empty() ||
      static_cast<int>(validation_images.size()) > params.max_validation_images)
    throw Error(ErrorCode::InvalidArgument, "need between 1 and N validation images");
  for (const auto* img : validation_images)
    if (img->has_category(category))
      throw Error(ErrorCode::InvalidValidationImage,
                  img->id + " contains category " + std::to_string(category));

  CrossValidation out;
  out.trace.reserve(validation_images.size());
  for (std::size_t i = 0; i < validation_images.size(); ++i) {
    const auto& target = *validation_images[i];
    auto pasted = paste(source, proposal.box, target, derive_seed(seed, {i}));
    const WindowScores scores(pasted.image, state);
    const auto omega = scores.top_proposals();

    ValidationTerm term;
    term.image_id = target.id;
    term.placed_box = pasted.placed_box;
    term.num_proposals = omega.size();
    for (std::size_t r = 0; r < omega.size(); ++r) {
      const double o = iou(pasted.placed_box, omega[r].box);
      if (o >= params.iou_threshold)
        term.overlapping.push_back({target.id + "+paste#" + std::to_string(r), omega[r].box, o,
                                    omega[r].probabilities[category]});
    }
    out.trace.push_back(std::move(term));
  }
  out.f_value = replay_f(out.trace, params.pace);
  return out;
}

bool ConsistencyRecord::has_nonzero_weight() const {
  return std::any_of(v.begin(), v.end(), [](int w) { return w != 0; });
}

ConsistencyRecord consistency_score(const RegionProposal& proposal, const SyntheticImage& source,
                                    const DetectorState& state,
                                    std::span<const SyntheticImage* const> annotated,
                                    const SsmParams& params, std::uint64_t seed) {
  ConsistencyRecord rec;
  rec.proposal_id = proposal.id;
  rec.probabilities = classify(state, proposal.features);
  rec.j_star = argmax(rec.probabilities);

  std::vector<const SyntheticImage*> candidates;
  for (const auto* img : annotated)
    if (!img->has_category(rec.j_star)) candidates.push_back(img);

  if (!candidates.empty()) {
    Rng rng(derive_seed(seed, {0x5E1EC7ULL}));
    const auto picks = rng.sample_indices(
        candidates.size(), static_cast<std::size_t>(std::max(1, params.max_validation_images)));
    std::vector<const SyntheticImage*> chosen;
    for (std::size_t idx : picks) chosen.push_back(candidates[idx]);
    auto cv = cross_image_validate(proposal, source, rec.j_star, chosen, state, params,
                                   derive_seed(seed, {0x9A57EULL}));
    rec.validation_trace = std::move(cv.trace);
    rec.s_score = replay_score(rec.validation_trace);
    rec.f_value = cv.f_value;
  }
  fill_weights(rec, state, proposal);
  return rec;
}

ConsistencyRecord single_image_score(const RegionProposal& proposal, const DetectorState& state,
                                     const SsmParams& params) {
  ConsistencyRecord rec;
  rec.proposal_id = proposal.id;
  rec.probabilities = classify(state, proposal.features);
  rec.j_star = argmax(rec.probabilities);
  rec.s_score = rec.probabilities[rec.j_star];
  rec.f_value = params.pace * *rec.s_score;
  fill_weights(rec, state, proposal);
  return rec;
}

std::size_t HighConsistencySet::size() const {
  std::size_t n = 0;
  for (const auto& h : per_category) n += h.size();
  return n;
}

HighConsistencySet rerank_topk(std::span<const ConsistencyRecord> records, int k, int num_categories) {
  if (k < 1) throw Error(ErrorCode::InvalidArgument, "rerank_topk needs k >= 1");
  HighConsistencySet set;
  set.per_category.resize(num_categories);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!r.s_score || !(*r.s_score > 0.0)) continue;
    if (r.j_star < 0 || r.j_star >= num_categories)
      throw Error(ErrorCode::InvalidArgument, "record " + r.proposal_id + " has j* out of range");
    set.per_category[r.j_star].push_back({r.proposal_id, *r.s_score, i, std::nullopt});
  }
  for (auto& group : set.per_category) {
    std::sort(group.begin(), group.end(), [](const HighConsistencyEntry& a, const HighConsistencyEntry& b) {
      if (a.s_score != b.s_score) return a.s_score > b.s_score;
      return a.proposal_id < b.proposal_id;
    });
    if (group.size() > static_cast<std::size_t>(k)) group.resize(k);
  }
  return set;
}

LabelVector solve_pseudo_labels(std::span<const int> v, const CandidateLosses& losses) {
  const auto m = static_cast<int>(v.size());
  if (losses.positive.size() != v.size() || losses.negative.size() != v.size())
    throw Error(ErrorCode::DimensionMismatch, "loss vectors must match the weight vector");
  if (std::none_of(v.begin(), v.end(), [](int w) { return w != 0; }))
    throw Error(ErrorCode::ZeroWeightVector, "pseudo-labeling requires a nonzero weight vector");

  // Terms with zero weight are skipped so an infinite loss never meets a zero weight.
  double negative_total = 0.0;
  for (int j = 0; j < m; ++j)
    if (v[j]) negative_total += losses.negative[j];

  double best = negative_total;
  int best_category = -1;
  for (int c = 0; c < m; ++c) {
    double cost = 0.0;
    for (int j = 0; j < m; ++j)
      if (v[j]) cost += j == c ? losses.positive[j] : losses.negative[j];
    if (cost < best) {
      best = cost;
      best_category = c;
    }
  }
  return best_category < 0 ? LabelVector::all_negative(m, LabelSource::Pseudo)
                           : LabelVector::one_hot(m, best_category, LabelSource::Pseudo);
}

LabelVector solve_pseudo_labels(const ConsistencyRecord& record) {
  return solve_pseudo_labels(record.v, CandidateLosses{record.losses_positive, record.losses_negative});
}

void assign_pseudo_labels(HighConsistencySet& set, std::span<const ConsistencyRecord> records) {
  for (auto& group : set.per_category) {
    std::vector<HighConsistencyEntry> kept;
    for (auto& entry : group) {
      const auto& rec = records[entry.record_index];
      if (!rec.has_nonzero_weight()) continue;
      entry.pseudo_label = solve_pseudo_labels(rec);
      kept.push_back(std::move(entry));
    }
    group = std::move(kept);
  }
}

nlohmann::json to_json(const ValidationTerm& term) {
  nlohmann::json overlapping = nlohmann::json::array();
  for (const auto& o : term.overlapping)
    overlapping.push_back({{"proposal_id", o.proposal_id}, {"box", to_json(o.box)}, {"iou", o.iou}, {"phi", o.phi}});
  return {{"image_id", term.image_id},
          {"placed_box", to_json(term.placed_box)},
          {"num_proposals", term.num_proposals},
          {"overlapping", overlapping}};
}

ValidationTerm validation_term_from_json(const nlohmann::json& j) {
  ValidationTerm t;
  t.image_id = j.at("image_id").get<std::string>();
  t.placed_box = box_from_json(j.at("placed_box"));
  t.num_proposals = j.at("num_proposals").get<std::size_t>();
  for (const auto& o : j.at("overlapping"))
    t.overlapping.push_back({o.at("proposal_id").get<std::string>(), box_from_json(o.at("box")),
                             o.at("iou").get<double>(), o.at("phi").get<double>()});
  return t;
}

nlohmann::json to_json(const ConsistencyRecord& record, bool include_trace) {
  nlohmann::json j = {{"proposal_id", record.proposal_id},
                      {"j_star", record.j_star},
                      {"f_value", record.f_value},
                      {"s_score", record.s_score ? nlohmann::json(*record.s_score) : nlohmann::json()},
                      {"v", record.v},
                      {"phi", record.probabilities}};
  if (include_trace) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& t : record.validation_trace) trace.push_back(to_json(t));
    j["validation_trace"] = trace;
  }
  return j;
}

}  // namespace miner
