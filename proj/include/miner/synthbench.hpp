#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "miner/geometry.hpp"

namespace miner {

enum class Split { TrainLabeled, Unlabeled, Test };

const char* to_string(Split split) noexcept;
Split split_from_string(const std::string& text);

enum class Texture { Solid, HorizontalStripes, VerticalStripes, Checker, Ring };

struct CategoryStyle {
  std::array<std::uint8_t, 3> color{};
  Texture texture = Texture::Solid;

  friend bool operator==(const CategoryStyle&, const CategoryStyle&) = default;
};

struct GroundTruthObject {
  BoundingBox box;
  int category = 0;
  double occluder_level = 0.0;
  double noise_level = 0.0;

  friend bool operator==(const GroundTruthObject&, const GroundTruthObject&) = default;
};

struct SyntheticImage {
  std::string id;
  Split split = Split::TrainLabeled;
  int width = 64;
  int height = 64;
  std::vector<std::uint8_t> pixels;  // row-major RGB
  std::vector<GroundTruthObject> objects;

  std::uint8_t at(int x, int y, int channel) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + channel];
  }
  bool has_category(int category) const;

  friend bool operator==(const SyntheticImage&, const SyntheticImage&) = default;
};

/// Generation parameters. Sizes are in pixels; levels are in [0,1].
struct SceneSpec {
  int num_categories = 5;
  int num_labeled = 200;
  int num_unlabeled = 300;
  int num_test = 100;
  int width = 64;
  int height = 64;
  int min_objects = 1;
  int max_objects = 3;
  int min_object_size = 12;
  int max_object_size = 24;
  /// Empty means the default palette for `num_categories`.
  std::vector<CategoryStyle> palette;
  /// Expected number of unannotated two-style distractor shapes per image.
  double distractor_density = 1.0;
  double max_noise = 0.5;
  double max_occlusion = 0.4;
  std::uint64_t seed = 1;

  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

void validate(const SceneSpec& spec);

std::vector<CategoryStyle> default_palette(int num_categories);

nlohmann::json to_json(const SceneSpec& spec);
SceneSpec scene_spec_from_json(const nlohmann::json& j);

struct Dataset {
  SceneSpec spec;
  std::vector<SyntheticImage> images;

  std::vector<const SyntheticImage*> split(Split which) const;
  const SyntheticImage* find(const std::string& id) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Id lookup over the images of a dataset; the dataset must outlive the index.
class ImageIndex {
 public:
  ImageIndex() = default;
  explicit ImageIndex(const Dataset& dataset);

  const SyntheticImage* find(const std::string& id) const;
  /// Throws UnknownImage.
  const SyntheticImage& at(const std::string& id) const;

 private:
  std::unordered_map<std::string, const SyntheticImage*> by_id_;
};

/// Deterministic in `spec`; throws InvalidArgument for specs that cannot be realized.
Dataset generate_dataset(const SceneSpec& spec);

struct PasteResult {
  SyntheticImage image;
  BoundingBox placed_box;
};

/// Copies the `crop` pixels of `source` verbatim into a copy of `target` at a
/// seeded uniformly random position where the crop fits entirely. The target's
/// ground truth is left untouched.
PasteResult paste(const SyntheticImage& source, const BoundingBox& crop,
                  const SyntheticImage& target, std::uint64_t seed);

/// Row-major RGB bytes of `box` within `image`.
std::vector<std::uint8_t> crop_pixels(const SyntheticImage& image, const BoundingBox& box);

inline constexpr int kDatasetFormatVersion = 1;

/// Writes `<dir>/dataset.jsonl` and the `<dir>/manifest.json` sidecar.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

nlohmann::json image_to_json(const SyntheticImage& image);
SyntheticImage image_from_json(const nlohmann::json& j);

}  // namespace miner
