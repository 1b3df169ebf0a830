#include "miner/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>

#include "miner/error.hpp"

namespace miner {
namespace {

/// Window heights and width/height ratios of the sliding-window proposer.
constexpr int kWindowHeights[] = {12, 16, 22};
constexpr double kWindowAspects[] = {1.0, 1.5};

double softplus(double a) noexcept {
  return a > 0.0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a));
}

double dot_row(std::span<const double> row, std::span<const double> x) noexcept {
  double acc = row[x.size()];  // bias
  for (std::size_t i = 0; i < x.size(); ++i) acc += row[i] * x[i];
  return acc;
}

void check_dim(const DetectorState& state, std::span<const double> features) {
  if (features.size() != static_cast<std::size_t>(state.feature_dim))
    throw Error(ErrorCode::DimensionMismatch,
                "expected " + std::to_string(state.feature_dim) + " features, got " +
                    std::to_string(features.size()));
}

void check_label(const DetectorState& state, const LabelVector& label) {
  if (label.values.size() != static_cast<std::size_t>(state.num_categories))
    throw Error(ErrorCode::DimensionMismatch, "label vector length does not match category count");
  for (int v : label.values)
    if (v != 1 && v != -1) throw Error(ErrorCode::InvalidArgument, "label values must be -1 or +1");
}

double smooth_l1(double u) noexcept {
  const double a = std::abs(u);
  return a < 1.0 ? 0.5 * u * u : a - 0.5;
}

double smooth_l1_grad(double u) noexcept {
  if (u >= 1.0) return 1.0;
  if (u <= -1.0) return -1.0;
  return u;
}

}  // namespace

const char* to_string(Provenance p) noexcept {
  switch (p) {
    case Provenance::Proposer: return "proposer";
    case Provenance::GroundTruthJittered: return "ground-truth-jittered";
    case Provenance::Pasted: return "pasted";
  }
  return "unknown";
}

Provenance provenance_from_string(const std::string& text) {
  if (text == "proposer") return Provenance::Proposer;
  if (text == "ground-truth-jittered") return Provenance::GroundTruthJittered;
  if (text == "pasted") return Provenance::Pasted;
  throw Error(ErrorCode::MalformedRecord, "unknown provenance '" + text + "'");
}

const char* to_string(LabelSource s) noexcept {
  switch (s) {
    case LabelSource::GroundTruth: return "ground-truth";
    case LabelSource::User: return "user";
    case LabelSource::Pseudo: return "pseudo";
    case LabelSource::Unknown: return "unknown";
  }
  return "unknown";
}

LabelSource label_source_from_string(const std::string& text) {
  if (text == "ground-truth") return LabelSource::GroundTruth;
  if (text == "user") return LabelSource::User;
  if (text == "pseudo") return LabelSource::Pseudo;
  if (text == "unknown") return LabelSource::Unknown;
  throw Error(ErrorCode::MalformedRecord, "unknown label source '" + text + "'");
}

BoxDeltas encode_deltas(const BoundingBox& p, const BoundingBox& t) {
  const double pw = p.width(), ph = p.height();
  const double tw = t.width(), th = t.height();
  const double pcx = p.x_min + 0.5 * pw, pcy = p.y_min + 0.5 * ph;
  const double tcx = t.x_min + 0.5 * tw, tcy = t.y_min + 0.5 * th;
  return {(tcx - pcx) / pw, (tcy - pcy) / ph, std::log(tw / pw), std::log(th / ph)};
}

BoundingBox apply_deltas(const BoundingBox& p, const BoxDeltas& d, int width, int height) {
  const double pw = p.width(), ph = p.height();
  const double cx = p.x_min + 0.5 * pw + d[0] * pw;
  const double cy = p.y_min + 0.5 * ph + d[1] * ph;
  // Bounded log-ratios keep a runaway regressor from producing absurd boxes.
  const double w = pw * std::exp(std::clamp(d[2], -1.0, 1.0));
  const double h = ph * std::exp(std::clamp(d[3], -1.0, 1.0));
  BoundingBox out{static_cast<int>(std::lround(cx - 0.5 * w)), static_cast<int>(std::lround(cy - 0.5 * h)),
                  static_cast<int>(std::lround(cx + 0.5 * w)), static_cast<int>(std::lround(cy + 0.5 * h))};
  out.x_min = std::clamp(out.x_min, 0, width - 1);
  out.y_min = std::clamp(out.y_min, 0, height - 1);
  out.x_max = std::clamp(out.x_max, out.x_min + 1, width);
  out.y_max = std::clamp(out.y_max, out.y_min + 1, height);
  return out;
}

LabelVector LabelVector::all_negative(int num_categories, LabelSource source) {
  return {std::vector<int>(num_categories, -1), source, std::nullopt};
}

LabelVector LabelVector::one_hot(int num_categories, int category, LabelSource source) {
  if (category < 0 || category >= num_categories)
    throw Error(ErrorCode::InvalidArgument, "category out of range");
  LabelVector v = all_negative(num_categories, source);
  v.values[category] = 1;
  return v;
}

std::optional<int> LabelVector::positive_category() const {
  for (std::size_t j = 0; j < values.size(); ++j)
    if (values[j] == 1) return static_cast<int>(j);
  return std::nullopt;
}

bool LabelVector::satisfies_constraint() const {
  int total = 0;
  for (int v : values) {
    if (v != 1 && v != -1) return false;
    total += std::abs(v + 1);
  }
  return total <= 2;
}

DetectorState DetectorState::zeros(int num_categories, int feature_dim) {
  if (num_categories < 1 || feature_dim < 1)
    throw Error(ErrorCode::InvalidArgument, "detector needs positive category count and dimension");
  DetectorState s;
  s.num_categories = num_categories;
  s.feature_dim = feature_dim;
  s.classifier.assign(static_cast<std::size_t>(num_categories) * (feature_dim + 1), 0.0);
  s.regressor.assign(static_cast<std::size_t>(4) * (feature_dim + 1), 0.0);
  return s;
}

std::span<const double> DetectorState::classifier_row(int j) const {
  return std::span<const double>(classifier).subspan(static_cast<std::size_t>(j) * row_size(), row_size());
}

std::span<const double> DetectorState::regressor_row(int k) const {
  return std::span<const double>(regressor).subspan(static_cast<std::size_t>(k) * row_size(), row_size());
}

bool DetectorState::all_finite() const {
  auto finite = [](double v) { return std::isfinite(v); };
  return std::all_of(classifier.begin(), classifier.end(), finite) &&
         std::all_of(regressor.begin(), regressor.end(), finite);
}

double logistic(double a) noexcept {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

std::vector<double> classify(const DetectorState& state, std::span<const double> features) {
  check_dim(state, features);
  std::vector<double> out(state.num_categories);
  for (int j = 0; j < state.num_categories; ++j) out[j] = logistic(dot_row(state.classifier_row(j), features));
  return out;
}

BoxDeltas regress(const DetectorState& state, std::span<const double> features) {
  check_dim(state, features);
  BoxDeltas out;
  for (int k = 0; k < 4; ++k) out[k] = dot_row(state.regressor_row(k), features);
  return out;
}

ClassificationLoss loss_cls(const DetectorState& state, std::span<const double> features,
                            const LabelVector& label) {
  check_dim(state, features);
  check_label(state, label);
  ClassificationLoss out;
  out.losses.resize(state.num_categories);
  out.gradient.assign(state.classifier.size(), 0.0);
  const std::size_t row = state.row_size();
  for (int j = 0; j < state.num_categories; ++j) {
    const double a = dot_row(state.classifier_row(j), features);
    const bool positive = label.values[j] == 1;
    // -log(phi) = softplus(-a), -log(1 - phi) = softplus(a)
    out.losses[j] = positive ? softplus(-a) : softplus(a);
    const double g = logistic(a) - (positive ? 1.0 : 0.0);
    double* grow = &out.gradient[j * row];
    for (std::size_t i = 0; i < features.size(); ++i) grow[i] = g * features[i];
    grow[features.size()] = g;
  }
  return out;
}

CandidateLosses candidate_losses(const DetectorState& state, std::span<const double> features) {
  check_dim(state, features);
  CandidateLosses out;
  out.positive.resize(state.num_categories);
  out.negative.resize(state.num_categories);
  for (int j = 0; j < state.num_categories; ++j) {
    const double a = dot_row(state.classifier_row(j), features);
    out.positive[j] = softplus(-a);
    out.negative[j] = softplus(a);
  }
  return out;
}

LocalizationLoss loss_loc(const DetectorState& state, std::span<const double> features,
                          const std::optional<BoxDeltas>& target) {
  check_dim(state, features);
  if (!target) throw Error(ErrorCode::MissingTarget, "localization loss needs a regression target");
  LocalizationLoss out;
  out.gradient.assign(state.regressor.size(), 0.0);
  const std::size_t row = state.row_size();
  for (int k = 0; k < 4; ++k) {
    const double u = dot_row(state.regressor_row(k), features) - (*target)[k];
    out.loss += smooth_l1(u);
    const double g = smooth_l1_grad(u);
    double* grow = &out.gradient[k * row];
    for (std::size_t i = 0; i < features.size(); ++i) grow[i] = g * features[i];
    grow[features.size()] = g;
  }
  return out;
}

BatchGradient batch_gradient(const DetectorState& state, std::span<const TrainingSample> batch) {
  if (batch.empty()) throw Error(ErrorCode::EmptyBatch, "train step needs at least one sample");
  BatchGradient out;
  out.classifier.assign(state.classifier.size(), 0.0);
  out.regressor.assign(state.regressor.size(), 0.0);
  const std::size_t row = state.row_size();
  const std::size_t dim = static_cast<std::size_t>(state.feature_dim);

  for (const auto& sample : batch) {
    const auto& x = sample.proposal.features;
    check_dim(state, x);
    check_label(state, sample.label);
    if (sample.label.source == LabelSource::Unknown)
      throw Error(ErrorCode::InvalidArgument, "sample " + sample.proposal.id + " has no label source");
    double sample_loss = 0.0;
    bool finite = true;
    for (int j = 0; j < state.num_categories; ++j) {
      const double a = dot_row(state.classifier_row(j), x);
      const bool positive = sample.label.values[j] == 1;
      sample_loss += positive ? softplus(-a) : softplus(a);
      const double g = logistic(a) - (positive ? 1.0 : 0.0);
      finite = finite && std::isfinite(g);
      double* grow = &out.classifier[j * row];
      for (std::size_t i = 0; i < dim; ++i) grow[i] += g * x[i];
      grow[dim] += g;
    }
    if (sample.label.positive_category() && sample.label.regression_target) {
      const auto& t = *sample.label.regression_target;
      for (int k = 0; k < 4; ++k) {
        const double u = dot_row(state.regressor_row(k), x) - t[k];
        sample_loss += smooth_l1(u);
        const double g = smooth_l1_grad(u);
        finite = finite && std::isfinite(g);
        double* grow = &out.regressor[k * row];
        for (std::size_t i = 0; i < dim; ++i) grow[i] += g * x[i];
        grow[dim] += g;
      }
    }
    if (!finite || !std::isfinite(sample_loss) ||
        !std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); }))
      throw Error(ErrorCode::NonfiniteGradient, "nonfinite gradient from sample " + sample.proposal.id);
    out.objective += sample_loss;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.objective *= inv;
  for (auto& g : out.classifier) g *= inv;
  for (auto& g : out.regressor) g *= inv;
  return out;
}

DetectorState train_step(const DetectorState& state, std::span<const TrainingSample> batch,
                         double learning_rate) {
  const BatchGradient grad = batch_gradient(state, batch);
  DetectorState next = state;
  for (std::size_t i = 0; i < next.classifier.size(); ++i) next.classifier[i] -= learning_rate * grad.classifier[i];
  for (std::size_t i = 0; i < next.regressor.size(); ++i) next.regressor[i] -= learning_rate * grad.regressor[i];
  ++next.update_counter;
  return next;
}

const std::vector<BoundingBox>& sliding_windows(int width, int height) {
  static std::mutex mutex;
  static std::map<std::pair<int, int>, std::vector<BoundingBox>> cache;
  std::lock_guard lock(mutex);
  auto [it, inserted] = cache.try_emplace({width, height});
  if (!inserted) return it->second;
  auto& windows = it->second;
  for (int h : kWindowHeights)
    for (double aspect : kWindowAspects) {
      const int w = static_cast<int>(std::lround(h * aspect));
      if (w > width || h > height) continue;
      const int sx = std::max(1, w / 4);
      const int sy = std::max(1, h / 4);
      for (int y = 0; y + h <= height; y += sy)
        for (int x = 0; x + w <= width; x += sx) windows.push_back({x, y, x + w, y + h});
    }
  return windows;
}

WindowScores::WindowScores(const SyntheticImage& image, const DetectorState& state)
    : boxes_(&sliding_windows(image.width, image.height)), num_categories_(state.num_categories) {
  if (state.feature_dim != kFeatureDim)
    throw Error(ErrorCode::DimensionMismatch, "proposer needs the default featurizer dimension");
  const IntegralImage integral(image);
  const std::size_t n = boxes_->size();
  probs_.resize(n * num_categories_);
  foreground_.resize(n);
  std::vector<double> x(kFeatureDim);
  for (std::size_t w = 0; w < n; ++w) {
    integral.features((*boxes_)[w], x);
    double best = 0.0;
    for (int j = 0; j < num_categories_; ++j) {
      const double p = logistic(dot_row(state.classifier_row(j), x));
      probs_[w * num_categories_ + j] = p;
      best = std::max(best, p);
    }
    foreground_[w] = best;
  }
}

std::span<const double> WindowScores::probabilities(std::size_t window) const {
  return std::span<const double>(probs_).subspan(window * num_categories_, num_categories_);
}

std::vector<ScoredBox> WindowScores::top_proposals() const {
  const auto kept = non_maximum_suppression(*boxes_, foreground_, kProposalNmsThreshold,
                                            kMaxProposalsPerImage);
  std::vector<ScoredBox> out;
  out.reserve(kept.size());
  for (std::size_t w : kept) {
    const auto p = probabilities(w);
    out.push_back({w, (*boxes_)[w], std::vector<double>(p.begin(), p.end())});
  }
  return out;
}

std::vector<RegionProposal> propose(const SyntheticImage& image, const DetectorState& state) {
  const WindowScores scores(image, state);
  const IntegralImage integral(image);
  std::vector<RegionProposal> out;
  std::size_t rank = 0;
  for (const auto& sb : scores.top_proposals()) {
    RegionProposal p;
    p.id = image.id + "#" + std::to_string(rank++);
    p.image_id = image.id;
    p.box = sb.box;
    p.features.resize(kFeatureDim);
    integral.features(sb.box, p.features);
    p.provenance = Provenance::Proposer;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<Detection> detect(const SyntheticImage& image, const DetectorState& state) {
  std::vector<Detection> out;
  for (const auto& p : propose(image, state)) {
    Detection d;
    d.box = apply_deltas(p.box, regress(state, p.features), image.width, image.height);
    d.scores = classify(state, p.features);
    const auto best = std::max_element(d.scores.begin(), d.scores.end());
    d.best_category = static_cast<int>(best - d.scores.begin());
    d.confidence = *best;
    out.push_back(std::move(d));
  }
  return out;
}

nlohmann::json to_json(const DetectorState& state) {
  const std::size_t row = state.row_size();
  auto rows = [row](const std::vector<double>& flat) {
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t r = 0; r * row < flat.size(); ++r)
      out.push_back(std::vector<double>(flat.begin() + r * row, flat.begin() + (r + 1) * row));
    return out;
  };
  return {{"format_version", kCheckpointFormatVersion},
          {"m", state.num_categories},
          {"d", state.feature_dim},
          {"classifier", rows(state.classifier)},
          {"regressor", rows(state.regressor)},
          {"update_counter", state.update_counter}};
}

DetectorState detector_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("format_version"))
    throw Error(ErrorCode::CorruptCheckpoint, "detector record has no format_version");
  if (j["format_version"] != kCheckpointFormatVersion)
    throw Error(ErrorCode::VersionMismatch, "detector format_version " + j["format_version"].dump());
  try {
    DetectorState s = DetectorState::zeros(j.at("m").get<int>(), j.at("d").get<int>());
    s.update_counter = j.at("update_counter").get<std::uint64_t>();
    auto fill = [&](const nlohmann::json& rows, std::vector<double>& flat, std::size_t nrows) {
      if (!rows.is_array() || rows.size() != nrows) throw Error(ErrorCode::CorruptCheckpoint, "bad row count");
      for (std::size_t r = 0; r < nrows; ++r) {
        const auto v = rows[r].get<std::vector<double>>();
        if (v.size() != s.row_size()) throw Error(ErrorCode::CorruptCheckpoint, "bad row length");
        std::copy(v.begin(), v.end(), flat.begin() + r * s.row_size());
      }
    };
    fill(j.at("classifier"), s.classifier, static_cast<std::size_t>(s.num_categories));
    fill(j.at("regressor"), s.regressor, 4);
    if (!s.all_finite()) throw Error(ErrorCode::CorruptCheckpoint, "nonfinite weights");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::CorruptCheckpoint) throw;
    throw Error(ErrorCode::CorruptCheckpoint, e.what());
  }
}

void save_detector(const DetectorState& state, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << to_json(state).dump() << '\n';
}

DetectorState load_detector(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot read " + path.string());
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::CorruptCheckpoint, path.string() + " is not valid JSON");
  if (j.contains("detector")) return detector_from_json(j["detector"]);
  return detector_from_json(j);
}

}  // namespace miner
