#include <doctest.h>

#include <set>

#include "miner/al.hpp"
#include "miner/error.hpp"
#include "miner/png_codec.hpp"
#include "support.hpp"

using miner::AnnotationRequest;
using miner::AnnotationResult;

namespace {

// Five categories; the bias alone makes `positive` categories fire.
miner::DetectorState biased_state(const std::set<int>& positive) {
  auto s = miner::DetectorState::zeros(5);
  for (int j = 0; j < 5; ++j) s.classifier[j * s.row_size() + miner::kFeatureDim] = positive.count(j) ? 5.0 : -5.0;
  return s;
}

struct Scene {
  miner::Dataset ds;
  miner::ImageIndex index;
  miner::UnlabeledPool pool;
  std::vector<miner::ConsistencyRecord> records;

  explicit Scene(int proposals) {
    auto img = test::noise_image("u0", 64, 64, 3);
    img.split = miner::Split::Unlabeled;
    img.objects.push_back({{10, 10, 30, 30}, 3, 0, 0});
    ds.images.push_back(img);
    index = miner::ImageIndex(ds);
    for (int i = 0; i < proposals; ++i) {
      miner::RegionProposal p;
      p.id = "u0#" + std::to_string(1000 + i);
      p.image_id = "u0";
      p.box = {i % 40, i % 30, i % 40 + 16, i % 30 + 20};
      p.features = miner::extract_features(ds.images[0], p.box);
      pool.add(p);
      miner::ConsistencyRecord r;
      r.proposal_id = p.id;
      r.s_score = 0.05;
      records.push_back(r);
    }
  }
};

}  // namespace

TEST_CASE("positive categories are those above one half") {
  CHECK(miner::positive_categories(std::vector<double>{0.6, 0.5, 0.9, 0.1}) == std::vector<int>{0, 2});
}

TEST_CASE("a low score with two positives is eligible") {
  Scene scene(1);
  const auto out = miner::select_low_consistency(scene.records, scene.pool, scene.index, biased_state({2, 4}), {},
                                                 1, 0);
  REQUIRE(out.size() == 1);
  CHECK(out[0].positive_categories == std::vector<int>{2, 4});
  CHECK(out[0].s_score == 0.05);
  CHECK(out[0].proposal_id == "u0#1000");
}

TEST_CASE("a low score with one positive is not eligible") {
  Scene scene(1);
  CHECK(miner::select_low_consistency(scene.records, scene.pool, scene.index, biased_state({2}), {}, 1, 0).empty());
}

TEST_CASE("scores at or above tau_low and absent scores are not eligible") {
  Scene scene(3);
  scene.records[0].s_score = 0.1;
  scene.records[1].s_score = 0.5;
  scene.records[2].s_score = std::nullopt;
  CHECK(miner::select_low_consistency(scene.records, scene.pool, scene.index, biased_state({2, 4}), {}, 1, 0).empty());
}

TEST_CASE("selection draws exactly z of many eligible records, deterministically") {
  Scene scene(200);
  miner::LowConsistencyParams params;
  params.z = 100;
  const auto state = biased_state({0, 1});
  const auto a = miner::select_low_consistency(scene.records, scene.pool, scene.index, state, params, 42, 3);
  const auto b = miner::select_low_consistency(scene.records, scene.pool, scene.index, state, params, 42, 3);
  REQUIRE(a.size() == 100);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].request_id == b[i].request_id);
    CHECK(scene.pool.contains(a[i].proposal_id));
    ids.insert(a[i].proposal_id);
    CHECK(a[i].created_at == 3);
  }
  CHECK(ids.size() == 100);
  const auto c = miner::select_low_consistency(scene.records, scene.pool, scene.index, state, params, 43, 3);
  std::set<std::string> other;
  for (const auto& r : c) other.insert(r.proposal_id);
  CHECK(other != ids);
}

TEST_CASE("selection is independent of record order") {
  Scene scene(30);
  miner::LowConsistencyParams params;
  params.z = 7;
  const auto state = biased_state({0, 1});
  const auto a = miner::select_low_consistency(scene.records, scene.pool, scene.index, state, params, 5, 0);
  auto reversed = scene.records;
  std::reverse(reversed.begin(), reversed.end());
  const auto b = miner::select_low_consistency(reversed, scene.pool, scene.index, state, params, 5, 0);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].proposal_id == b[i].proposal_id);
}

TEST_CASE("request thumbnails decode to the crop pixels") {
  Scene scene(1);
  const auto out = miner::select_random(scene.pool, scene.index, biased_state({}), 1, 9, 0);
  REQUIRE(out.size() == 1);
  CHECK_FALSE(out[0].s_score);
  const auto png = miner::decode_png(out[0].thumbnail_png);
  CHECK(png.width == out[0].box.width());
  CHECK(png.height == out[0].box.height());
  CHECK(png.pixels == miner::crop_pixels(scene.ds.images[0], out[0].box));
}

TEST_CASE("random selection caps at the pool size") {
  Scene scene(4);
  CHECK(miner::select_random(scene.pool, scene.index, biased_state({}), 10, 1, 0).size() == 4);
}

TEST_CASE("oracle labels by the best-overlapping object") {
  auto img = test::flat_image("a", 64, 64, 0, 0, 0);
  img.objects.push_back({{0, 0, 20, 20}, 3, 0, 0});
  miner::Dataset ds;
  ds.images.push_back(img);
  const miner::ImageIndex index(ds);
  AnnotationRequest r;
  r.request_id = "r";
  r.image_id = "a";

  r.box = {0, 0, 20, 25};  // IoU 0.8
  auto res = miner::oracle_annotate(r, index);
  CHECK(res.label == 3);
  CHECK(res.corrected_box == miner::BoundingBox{0, 0, 20, 20});

  r.box = {40, 40, 60, 60};
  res = miner::oracle_annotate(r, index);
  CHECK(res.label == miner::kBackgroundLabel);
  CHECK_FALSE(res.corrected_box);

  r.box = {0, 0, 20, 40};  // IoU exactly 0.5
  CHECK(miner::oracle_annotate(r, index).label == 3);

  r.image_id = "missing";
  CHECK_THROWS_AS(miner::oracle_annotate(r, index), miner::Error);
}

TEST_CASE("applying annotations moves proposals and is idempotent") {
  Scene scene(3);
  miner::SamplePools pools;
  pools.unlabeled = scene.pool;
  const auto requests = miner::select_random(pools.unlabeled, scene.index, biased_state({}), 3, 1, 0);
  std::map<std::string, AnnotationRequest> pending;
  for (const auto& r : requests) pending[r.request_id] = r;
  const std::vector<AnnotationResult> results{
      {requests[0].request_id, 3, miner::BoundingBox{10, 10, 30, 30}, miner::AnnotatorKind::SimulatedOracle},
      {requests[1].request_id, miner::kBackgroundLabel, std::nullopt, miner::AnnotatorKind::SimulatedOracle}};
  const std::size_t total = pools.labeled.size() + pools.unlabeled.size();

  auto report = miner::apply_annotations(results, pending, pools, scene.index, 5);
  CHECK(report.applied == 2);
  CHECK(pools.labeled.size() + pools.unlabeled.size() == total);
  CHECK(pools.unlabeled.size() == 1);
  CHECK_FALSE(pools.unlabeled.contains(requests[0].proposal_id));
  CHECK(pools.labeled.contains(requests[0].proposal_id));

  const auto& fg = pools.labeled[0];
  CHECK(fg.label.source == miner::LabelSource::User);
  CHECK(fg.label.positive_category() == 3);
  CHECK(fg.label.regression_target == miner::encode_deltas(requests[0].box, {10, 10, 30, 30}));
  const auto& bg = pools.labeled[1];
  CHECK_FALSE(bg.label.positive_category());
  CHECK_FALSE(bg.label.regression_target);

  report = miner::apply_annotations(results, pending, pools, scene.index, 5);
  CHECK(report.applied == 0);
  CHECK(report.duplicates == 2);
  CHECK(pools.labeled.size() == 2);
}

TEST_CASE("conflicting and stale results are rejected without side effects") {
  Scene scene(2);
  miner::SamplePools pools;
  pools.unlabeled = scene.pool;
  const auto requests = miner::select_random(pools.unlabeled, scene.index, biased_state({}), 2, 1, 0);
  std::map<std::string, AnnotationRequest> pending;
  for (const auto& r : requests) pending[r.request_id] = r;
  const AnnotationResult first{requests[0].request_id, 1, std::nullopt, miner::AnnotatorKind::Human};
  miner::apply_annotations(std::vector{first}, pending, pools, scene.index, 5);

  auto conflicting = first;
  conflicting.label = 2;
  try {
    miner::apply_annotations(std::vector{conflicting}, pending, pools, scene.index, 5);
    FAIL("expected an error");
  } catch (const miner::Error& e) {
    CHECK(e.code() == miner::ErrorCode::ConflictingResult);
  }

  const AnnotationResult good{requests[1].request_id, 1, std::nullopt, miner::AnnotatorKind::Human};
  const AnnotationResult stale{"req-9-nothing", 1, std::nullopt, miner::AnnotatorKind::Human};
  try {
    miner::apply_annotations(std::vector{good, stale}, pending, pools, scene.index, 5);
    FAIL("expected an error");
  } catch (const miner::Error& e) {
    CHECK(e.code() == miner::ErrorCode::StaleRequest);
  }
  CHECK(pools.unlabeled.contains(requests[1].proposal_id));
  CHECK(pools.labeled.size() == 1);
}

TEST_CASE("request and result json round trip") {
  Scene scene(1);
  const auto req = miner::select_low_consistency(scene.records, scene.pool, scene.index, biased_state({2, 4}), {},
                                                 1, 2)
                       .at(0);
  const auto back = miner::annotation_request_from_json(miner::to_json(req));
  CHECK(back.request_id == req.request_id);
  CHECK(back.box == req.box);
  CHECK(back.thumbnail_png == req.thumbnail_png);
  CHECK(back.positive_categories == req.positive_categories);
  CHECK(back.s_score == req.s_score);
  const AnnotationResult res{"r", 2, miner::BoundingBox{1, 2, 3, 4}, miner::AnnotatorKind::Human};
  CHECK(miner::annotation_result_from_json(miner::to_json(res)) == res);
}
