#include <doctest.h>

#include <fstream>
#include <set>

#include "miner/error.hpp"
#include "miner/synthbench.hpp"
#include "support.hpp"

using miner::BoundingBox;

TEST_CASE("generation is deterministic in the spec") {
  const auto spec = test::small_spec(5);
  CHECK(miner::generate_dataset(spec) == miner::generate_dataset(spec));
  auto other = spec;
  other.seed = 6;
  CHECK_FALSE(miner::generate_dataset(spec) == miner::generate_dataset(other));
}

TEST_CASE("generated objects respect the spec") {
  auto spec = test::small_spec(2);
  spec.num_categories = 5;
  spec.num_labeled = 10;
  const auto ds = miner::generate_dataset(spec);
  CHECK(ds.split(miner::Split::TrainLabeled).size() == 10);
  CHECK(ds.split(miner::Split::Unlabeled).size() == 6);
  CHECK(ds.split(miner::Split::Test).size() == 6);
  for (const auto& img : ds.images) {
    CHECK(img.pixels.size() == static_cast<std::size_t>(img.width * img.height * 3));
    for (const auto& obj : img.objects) {
      CHECK(obj.category >= 0);
      CHECK(obj.category < 5);
      CHECK(miner::fits_inside(obj.box, img.width, img.height));
    }
  }
}

TEST_CASE("every category appears in every split") {
  const auto ds = miner::generate_dataset(test::small_spec(3));
  for (auto split : {miner::Split::TrainLabeled, miner::Split::Unlabeled, miner::Split::Test}) {
    std::set<int> seen;
    for (const auto* img : ds.split(split))
      for (const auto& obj : img->objects) seen.insert(obj.category);
    CHECK(seen.size() == 3);
  }
}

TEST_CASE("objects that cannot fit are rejected") {
  auto spec = test::small_spec(1);
  spec.width = 64;
  spec.height = 64;
  spec.min_object_size = 80;
  spec.max_object_size = 80;
  CHECK_THROWS_AS(miner::generate_dataset(spec), miner::Error);
}

TEST_CASE("scene spec json round trip and unknown keys") {
  auto spec = test::small_spec(9);
  spec.distractor_density = 0.25;
  CHECK(miner::scene_spec_from_json(miner::to_json(spec)) == spec);
  auto j = miner::to_json(spec);
  j["bogus"] = 1;
  CHECK_THROWS_AS(miner::scene_spec_from_json(j), miner::Error);
}

TEST_CASE("paste copies the crop verbatim and leaves ground truth alone") {
  const auto source = test::noise_image("src", 40, 30, 1);
  const auto target = test::noise_image("dst", 48, 48, 2);
  const BoundingBox crop{5, 4, 22, 19};
  const auto result = miner::paste(source, crop, target, 77);
  const auto& placed = result.placed_box;
  CHECK(placed.width() == crop.width());
  CHECK(placed.height() == crop.height());
  CHECK(miner::clip(placed, target.width, target.height) == placed);
  CHECK(miner::crop_pixels(result.image, placed) == miner::crop_pixels(source, crop));
  CHECK(result.image.objects == target.objects);
  CHECK(miner::paste(source, crop, target, 77).placed_box == placed);
  for (int y = 0; y < target.height; ++y)
    for (int x = 0; x < target.width; ++x) {
      if (x >= placed.x_min && x < placed.x_max && y >= placed.y_min && y < placed.y_max) continue;
      for (int c = 0; c < 3; ++c) REQUIRE(result.image.at(x, y, c) == target.at(x, y, c));
    }
}

TEST_CASE("paste placements cover every valid position roughly uniformly") {
  const auto source = test::flat_image("src", 10, 10, 9, 9, 9);
  const auto target = test::flat_image("dst", 13, 12, 0, 0, 0);
  const BoundingBox crop{0, 0, 10, 10};
  // (13 - 10 + 1) x (12 - 10 + 1) = 12 positions
  std::map<std::pair<int, int>, int> counts;
  const int draws = 6000;
  for (int s = 0; s < draws; ++s) {
    const auto placed = miner::paste(source, crop, target, static_cast<std::uint64_t>(s)).placed_box;
    ++counts[{placed.x_min, placed.y_min}];
  }
  CHECK(counts.size() == 12);
  double chi2 = 0;
  const double expected = draws / 12.0;
  for (const auto& [pos, n] : counts) chi2 += (n - expected) * (n - expected) / expected;
  // 11 degrees of freedom; 31.3 is the 0.999 quantile
  CHECK(chi2 < 31.3);
}

TEST_CASE("paste of a crop larger than the target fails") {
  const auto source = test::flat_image("src", 40, 40, 1, 1, 1);
  const auto target = test::flat_image("dst", 20, 20, 0, 0, 0);
  try {
    miner::paste(source, {0, 0, 30, 10}, target, 1);
    FAIL("expected an error");
  } catch (const miner::Error& e) {
    CHECK(e.code() == miner::ErrorCode::CropTooLarge);
  }
}

TEST_CASE("dataset save and load round trip") {
  const auto ds = miner::generate_dataset(test::small_spec(4));
  const auto dir = test::scratch_dir("dataset-roundtrip");
  miner::save_dataset(ds, dir);
  CHECK(miner::load_dataset(dir) == ds);
}

TEST_CASE("truncated dataset file is a malformed record") {
  const auto ds = miner::generate_dataset(test::small_spec(4));
  const auto dir = test::scratch_dir("dataset-truncated");
  miner::save_dataset(ds, dir);
  const auto path = dir / "dataset.jsonl";
  std::string text;
  {
    std::ifstream in(path);
    text.assign(std::istreambuf_iterator<char>(in), {});
  }
  std::ofstream(path, std::ios::trunc) << text.substr(0, text.size() / 2);
  try {
    miner::load_dataset(dir);
    FAIL("expected an error");
  } catch (const miner::Error& e) {
    CHECK(e.code() == miner::ErrorCode::MalformedRecord);
    CHECK(std::string(e.what()).find("line") != std::string::npos);
  }
}

TEST_CASE("unsupported dataset version is rejected") {
  const auto ds = miner::generate_dataset(test::small_spec(4));
  const auto dir = test::scratch_dir("dataset-version");
  miner::save_dataset(ds, dir);
  std::ifstream in(dir / "manifest.json");
  auto manifest = nlohmann::json::parse(in);
  in.close();
  manifest["format_version"] = 999;
  std::ofstream(dir / "manifest.json", std::ios::trunc) << manifest.dump();
  try {
    miner::load_dataset(dir);
    FAIL("expected an error");
  } catch (const miner::Error& e) {
    CHECK(e.code() == miner::ErrorCode::VersionMismatch);
  }
}

TEST_CASE("image index lookup") {
  const auto ds = miner::generate_dataset(test::small_spec(4));
  const miner::ImageIndex index(ds);
  CHECK(&index.at(ds.images[3].id) == &ds.images[3]);
  CHECK(index.find("nope") == nullptr);
  CHECK_THROWS_AS(index.at("nope"), miner::Error);
}
