// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "miner/engine.hpp"
#include "miner/evaluation.hpp"
#include "miner/ssm.hpp"
#include "oracles.hpp"
#include "support.hpp"

using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c, d);
  return buf;
}

miner::Dataset desk_dataset(std::uint64_t seed) {
  miner::SceneSpec spec;
  spec.seed = seed;
  return miner::generate_dataset(spec);
}

std::size_t pre_given(const miner::Dataset& ds) {
  std::size_t n = 0;
  for (const auto* img : ds.split(miner::Split::TrainLabeled)) n += img->objects.size();
  return n;
}

// 1. Pseudo-label solver against exhaustive enumeration.
Outcome solver_equivalence() {
  const auto start = std::chrono::steady_clock::now();
  miner::Rng rng(2024);
  int mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const int m = static_cast<int>(rng.uniform_int(1, 6));
    std::vector<int> v(m);
    do {
      for (auto& w : v) w = static_cast<int>(rng.uniform_int(0, 1));
    } while (std::accumulate(v.begin(), v.end(), 0) == 0);
    miner::CandidateLosses l;
    for (int j = 0; j < m; ++j) {
      const double phi = rng.uniform(1e-4, 1 - 1e-4);
      l.positive.push_back(-std::log(phi));
      l.negative.push_back(-std::log(1 - phi));
    }
    if (miner::solve_pseudo_labels(v, l).values != test::enumerate_pseudo_label(v, l.positive, l.negative))
      ++mismatches;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {mismatches == 0 && secs < 5.0, fmt("%.0f mismatches in 1000 instances, %.3f s", mismatches, secs)};
}

// 2. Weight rule, validation arithmetic and trace replay.
Outcome weight_and_validation_arithmetic() {
  std::vector<std::string> failures;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  expect(miner::update_weights(0.20, 0.45) == 1, "v(0.20, 0.45)");
  expect(miner::update_weights(0.50, 0.45) == 0, "v(0.50, 0.45)");
  expect(miner::update_weights(0.30, 0.30) == 1, "v(0.30, 0.30)");

  auto term = [](std::size_t omega, std::vector<double> phis) {
    miner::ValidationTerm t;
    t.num_proposals = omega;
    for (double p : phis) t.overlapping.push_back({"p", {0, 0, 1, 1}, 0.7, p});
    return t;
  };
  const std::vector<miner::ValidationTerm> one{term(3, {0.8, 0.6})};
  expect(std::abs(miner::replay_f(one, 0.9) - 0.42) <= 1e-12, "f = 0.42");
  const std::vector<miner::ValidationTerm> two{term(2, {0.8, 0.6}), term(2, {0.9})};
  expect(std::abs(miner::replay_score(two) - 0.575) <= 1e-12, "s = 0.575");
  const std::vector<miner::ValidationTerm> none{term(4, {}), term(6, {})};
  expect(miner::replay_f(none, 0.9) == 0.0, "no overlap gives f = 0");

  // Real scoring runs replay exactly from their traces.
  const auto ds = miner::generate_dataset(test::small_spec(12));
  miner::Rng rng(5);
  const auto state = test::random_state(3, miner::kFeatureDim, rng, 0.4);
  const auto annotated = ds.split(miner::Split::TrainLabeled);
  const miner::SsmParams params;
  int replayed = 0;
  for (const auto* img : ds.split(miner::Split::Unlabeled))
    for (const auto& p : miner::propose(*img, state)) {
      const auto r = miner::consistency_score(p, *img, state, annotated, params, miner::fnv1a(p.id));
      if (!r.s_score) continue;
      ++replayed;
      expect(miner::replay_score(r.validation_trace) == *r.s_score, "s replay " + p.id);
      expect(miner::replay_f(r.validation_trace, params.pace) == r.f_value, "f replay " + p.id);
      for (int j = 0; j < 3; ++j) {
        const double loss = j == r.j_star ? r.losses_positive[j] : r.losses_negative[j];
        expect(r.v[j] == miner::update_weights(loss, r.f_value), "v " + p.id);
      }
    }
  std::string detail = std::to_string(replayed) + " traces replayed";
  if (!failures.empty()) detail += ", first failure: " + failures.front();
  return {failures.empty() && replayed > 0, detail};
}

// 3. Analytic gradients against central differences.
Outcome gradient_correctness() {
  miner::Rng rng(99);
  const int d = 9;
  const double h = 1e-5;
  auto rel = [](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); };
  double worst_cls = 0, worst_loc = 0;
  for (int t = 0; t < 100; ++t) {
    const int m = static_cast<int>(rng.uniform_int(2, 5));
    const auto s = test::random_state(m, d, rng, 0.8);
    const auto x = test::random_features(d, rng);
    const auto c = rng.uniform_int(-1, m - 1);
    const auto y = c < 0 ? miner::LabelVector::all_negative(m, miner::LabelSource::GroundTruth)
                         : miner::LabelVector::one_hot(m, static_cast<int>(c), miner::LabelSource::GroundTruth);
    auto total = [&](const miner::DetectorState& st) {
      const auto l = miner::loss_cls(st, x, y).losses;
      return std::accumulate(l.begin(), l.end(), 0.0);
    };
    const auto g = miner::loss_cls(s, x, y).gradient;
    for (std::size_t i = 0; i < g.size(); ++i) {
      auto plus = s, minus = s;
      plus.classifier[i] += h;
      minus.classifier[i] -= h;
      worst_cls = std::max(worst_cls, rel(g[i], (total(plus) - total(minus)) / (2 * h)));
    }
  }
  for (int t = 0; t < 100; ++t) {
    const auto s = test::random_state(2, d, rng, 0.8);
    const auto x = test::random_features(d, rng);
    const miner::BoxDeltas target{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    const auto g = miner::loss_loc(s, x, target).gradient;
    for (std::size_t i = 0; i < g.size(); ++i) {
      auto plus = s, minus = s;
      plus.regressor[i] += h;
      minus.regressor[i] -= h;
      const double numeric = (miner::loss_loc(plus, x, target).loss - miner::loss_loc(minus, x, target).loss) / (2 * h);
      worst_loc = std::max(worst_loc, rel(g[i], numeric));
    }
  }
  return {worst_cls <= 1e-4 && worst_loc <= 1e-4,
          fmt("max relative error %.2e (classification), %.2e (localization)", worst_cls, worst_loc)};
}

// 4. mAP against a brute-force PR-curve implementation.
Outcome map_oracle() {
  miner::Rng rng(4);
  double worst = 0;
  for (int t = 0; t < 50; ++t) {
    const auto spec = test::small_spec(500 + t);
    const auto ds = miner::generate_dataset(spec);
    const auto images = ds.split(miner::Split::Test);
    const auto state = test::random_state(spec.num_categories, miner::kFeatureDim, rng, 0.3);
    std::vector<std::vector<miner::Detection>> dets;
    for (const auto* img : images) dets.push_back(miner::detect(*img, state));
    const double want = test::brute_force_map(images, dets, spec.num_categories);
    worst = std::max(worst, std::abs(miner::evaluate_map(state, images).map - want));
  }
  return {worst <= 1e-9, fmt("max |mAP - oracle| = %.2e over 50 scenes", worst)};
}

// 5. Full engine against random selection at a 30% annotation budget.
Outcome engine_beats_random() {
  const auto start = std::chrono::steady_clock::now();
  double sum_ssm = 0, sum_rand = 0;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto ds = desk_dataset(seed);
    const int budget = static_cast<int>(std::lround(0.3 * static_cast<double>(pre_given(ds))));
    double maps[2];
    for (int method = 0; method < 2; ++method) {
      auto config = miner::MiningConfig::desk();
      config.seed = seed;
      config.annotation_budget = budget;
      if (method == 1) {
        config.selection = miner::SelectionStrategy::Random;
        config.pseudo_labeling = miner::PseudoLabeling::None;
      }
      miner::SimulatedOracle oracle(ds);
      maps[method] = miner::run(config, ds, oracle).final_map.value_or(0.0);
    }
    sum_ssm += maps[0];
    sum_rand += maps[1];
    per_seed += fmt(" %.1f/%.1f", 100 * maps[0], 100 * maps[1]);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const double margin = 100 * (sum_ssm - sum_rand) / 5;
  return {margin >= 2.0 && secs <= 600,
          fmt("mean mAP %.2f vs random %.2f (margin %+.2f points), %.0f s;", 100 * sum_ssm / 5, 100 * sum_rand / 5,
              margin, secs) +
              " per seed" + per_seed};
}

// 6. Pseudo-label precision with cross-image validation against single-image confidence.
Outcome ssm_beats_spl() {
  double sum_ssm = 0, sum_spl = 0;
  std::string per_seed;
  bool counts_ok = true;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto ds = desk_dataset(seed);
    const miner::ImageIndex index(ds);
    auto config = miner::MiningConfig::desk();
    config.seed = seed;
    miner::SimulatedOracle oracle(ds);
    miner::Engine engine(config, ds, oracle);  // warm-up only
    const auto ids = engine.pools().unlabeled.ids();
    miner::Rng rng(miner::derive_seed(seed, {0xACCE}));
    std::vector<const miner::RegionProposal*> pool;
    for (std::size_t i : rng.sample_indices(ids.size(), 256)) pool.push_back(&engine.pools().unlabeled.at(ids[i]));
    const auto annotated = ds.split(miner::Split::TrainLabeled);

    // (s, agrees with hidden ground truth) for every pseudo-label, best s first
    std::vector<std::pair<double, bool>> labels[2];
    for (int method = 0; method < 2; ++method) {
      std::vector<miner::ConsistencyRecord> records;
      for (const auto* p : pool)
        records.push_back(method == 0 ? miner::consistency_score(*p, index.at(p->image_id), engine.state(), annotated,
                                                                 config.ssm_params(),
                                                                 miner::derive_seed(seed, {miner::fnv1a(p->id)}))
                                      : miner::single_image_score(*p, engine.state(), config.ssm_params()));
      auto set = miner::rerank_topk(records, config.top_k, ds.spec.num_categories);
      miner::assign_pseudo_labels(set, records);
      for (const auto& group : set.per_category)
        for (const auto& entry : group) {
          const auto& p = *pool[entry.record_index];
          const auto c = entry.pseudo_label->positive_category();
          const int label = c ? *c : miner::kBackgroundLabel;
          labels[method].push_back({entry.s_score, miner::ground_truth_label(index.at(p.image_id), p.box) == label});
        }
      std::stable_sort(labels[method].begin(), labels[method].end(),
                       [](const auto& a, const auto& b) { return a.first > b.first; });
    }
    const std::size_t k = std::min(labels[0].size(), labels[1].size());
    counts_ok = counts_ok && k > 0;
    double precision[2] = {0, 0};
    for (int method = 0; method < 2; ++method) {
      std::size_t ok = 0;
      for (std::size_t i = 0; i < k; ++i) ok += labels[method][i].second;
      precision[method] = k ? static_cast<double>(ok) / static_cast<double>(k) : 0.0;
    }
    sum_ssm += precision[0];
    sum_spl += precision[1];
    per_seed += fmt(" %.2f/%.2f@%.0f", precision[0], precision[1], static_cast<double>(k));
  }
  const double margin = (sum_ssm - sum_spl) / 5;
  return {counts_ok && margin > 0,
          fmt("mean precision %.3f vs single-image %.3f (margin %+.3f);", sum_ssm / 5, sum_spl / 5, margin) +
              " per seed" + per_seed};
}

// 7. Disposable pseudo-labels and clean termination.
Outcome disposability_and_termination() {
  int ok = 0;
  std::size_t assigned = 0;
  std::string problems;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto ds = desk_dataset(100 + seed);
    auto config = miner::MiningConfig::desk();
    config.seed = seed;
    config.log_traces = false;
    miner::SimulatedOracle oracle(ds);
    const auto out = miner::run(config, ds, oracle);
    const auto violations = miner::verify_run_log(out.log.lines());
    for (const auto& line : out.log.lines()) {
      const auto e = json::parse(line);
      if (e.at("type") == "pseudo-assigned") assigned += e.at("data").at("items").size();
    }
    const bool clean = out.termination_reason == "empty-U" || out.termination_reason == "budget-exhausted";
    if (violations.empty() && clean)
      ++ok;
    else
      problems += " seed " + std::to_string(seed) + ": " +
                  (violations.empty() ? "reason " + out.termination_reason : violations.front());
  }
  return {ok == 10, std::to_string(ok) + "/10 runs clean, " + std::to_string(assigned) +
                        " pseudo-labels assigned and discarded" + problems};
}

// 8. Byte-identical logs and checkpoint/resume.
Outcome determinism() {
  const auto ds = desk_dataset(7);
  auto config = miner::MiningConfig::desk();
  config.seed = 7;
  std::string detail;
  miner::SimulatedOracle o1(ds), o2(ds);
  const auto a = miner::run(config, ds, o1);
  const auto b = miner::run(config, ds, o2);
  const bool identical = a.log.text() == b.log.text();
  detail += identical ? "repeat run identical (" + std::to_string(a.log.lines().size()) + " events)"
                      : "repeat run differs";

  // Random selection keeps the loop going for several rounds.
  config.selection = miner::SelectionStrategy::Random;
  config.annotation_budget = 40;
  const auto dir = test::scratch_dir("acceptance-resume");
  miner::SimulatedOracle o3(ds), o4(ds);
  miner::Engine full(config, ds, o3, dir);
  full.run();
  const auto& lines = full.log().lines();
  bool suffix_ok = full.rounds_completed() >= 3;
  int checked = 0;
  for (int round = 1; round < full.rounds_completed() && suffix_ok; ++round) {
    auto resumed =
        miner::Engine::resume(dir / "checkpoints" / ("round-" + std::to_string(round) + ".json"), ds, o4);
    resumed->run();
    const auto& tail = resumed->log().lines();
    suffix_ok = tail.size() < lines.size() &&
                std::equal(tail.begin(), tail.end(), lines.end() - static_cast<std::ptrdiff_t>(tail.size())) &&
                resumed->state() == full.state();
    ++checked;
  }
  detail += suffix_ok ? ", resume from " + std::to_string(checked) + " checkpoints reproduces the log suffix"
                      : ", resume suffix differs";
  return {identical && suffix_ok, detail};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"solver matches exhaustive enumeration", solver_equivalence},
      {"weight rule and validation arithmetic", weight_and_validation_arithmetic},
      {"gradients match finite differences", gradient_correctness},
      {"mAP matches brute-force oracle", map_oracle},
      {"engine beats random selection by 2 mAP at 30% budget", engine_beats_random},
      {"cross-image pseudo-labels beat single-image confidence", ssm_beats_spl},
      {"pseudo-labels disposed, runs terminate cleanly", disposability_and_termination},
      {"deterministic logs and resume", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %zu %s: %s: %s\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
