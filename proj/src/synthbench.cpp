#include "miner/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "miner/base64.hpp"
#include "miner/error.hpp"
#include "miner/random.hpp"

namespace miner {
namespace {

constexpr int kPlacementAttempts = 200;

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

struct Canvas {
  int width;
  int height;
  std::vector<double> values;  // RGB, row-major

  Canvas(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h * 3, 0.0) {}
  double& at(int x, int y, int c) { return values[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

// Every shape has a dark outline so a window on a whole shape differs from one inside it.
constexpr int kOutline = 2;
constexpr double kOutlineGain = 0.15;

/// Brightness multiplier of `texture` at offset (u,v) inside a w x h shape.
double texture_gain(Texture texture, int u, int v, int w, int h) {
  switch (texture) {
    case Texture::Solid: return 1.0;
    case Texture::HorizontalStripes: return (v / 3) % 2 == 0 ? 1.0 : 0.45;
    case Texture::VerticalStripes: return (u / 3) % 2 == 0 ? 1.0 : 0.45;
    case Texture::Checker: return ((u / 4) + (v / 4)) % 2 == 0 ? 1.0 : 0.4;
    case Texture::Ring: {
      const int t = std::max(2, std::min(w, h) / 4);
      const bool border = u < t || v < t || u >= w - t || v >= h - t;
      return border ? 1.0 : 0.3;
    }
  }
  return 1.0;
}

void draw_shape(Canvas& canvas, const BoundingBox& box, const CategoryStyle& style,
                const std::array<double, 3>& jitter) {
  const int w = box.width();
  const int h = box.height();
  for (int y = box.y_min; y < box.y_max; ++y)
    for (int x = box.x_min; x < box.x_max; ++x) {
      const int u = x - box.x_min;
      const int v = y - box.y_min;
      const bool outline = u < kOutline || v < kOutline || u >= w - kOutline || v >= h - kOutline;
      const double g = outline ? kOutlineGain : texture_gain(style.texture, u, v, w, h);
      for (int c = 0; c < 3; ++c) canvas.at(x, y, c) = (style.color[c] + jitter[c]) * g;
    }
}

bool overlaps_any(const BoundingBox& box, const std::vector<BoundingBox>& placed) {
  // One pixel of clearance keeps shapes visually separate; it also implies IoU < 0.3.
  const BoundingBox grown{box.x_min - 1, box.y_min - 1, box.x_max + 1, box.y_max + 1};
  return std::any_of(placed.begin(), placed.end(),
                     [&](const BoundingBox& p) { return intersection_area(grown, p) > 0; });
}

BoundingBox random_shape_box(Rng& rng, const SceneSpec& spec) {
  const int h = static_cast<int>(rng.uniform_int(spec.min_object_size, spec.max_object_size));
  const double aspect = rng.uniform(1.0, 1.8);
  const int w = std::clamp(static_cast<int>(std::lround(h * aspect)), spec.min_object_size,
                           spec.max_object_size);
  const int x = static_cast<int>(rng.uniform_int(0, spec.width - w));
  const int y = static_cast<int>(rng.uniform_int(0, spec.height - h));
  return {x, y, x + w, y + h};
}

std::string image_id(Split split, int index) {
  std::ostringstream os;
  os << (split == Split::TrainLabeled ? "train" : split == Split::Unlabeled ? "unlabeled" : "test")
     << '-';
  os.width(4);
  os.fill('0');
  os << index;
  return os.str();
}

/// Renders one image; returns false when the requested objects could not be placed.
bool render_image(const SceneSpec& spec, const std::vector<CategoryStyle>& palette,
                  const std::vector<int>& categories, std::uint64_t seed, SyntheticImage& out) {
  Rng rng(seed);
  Canvas canvas(spec.width, spec.height);

  std::array<double, 3> base;
  for (auto& b : base) b = rng.uniform(70.0, 150.0);
  const double gx = rng.uniform(-0.8, 0.8);
  const double gy = rng.uniform(-0.8, 0.8);
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x)
      for (int c = 0; c < 3; ++c)
        canvas.at(x, y, c) = base[c] + gx * (x - spec.width / 2) + gy * (y - spec.height / 2);

  const double noise = rng.uniform(0.0, spec.max_noise);
  std::vector<BoundingBox> placed;
  out.objects.clear();
  for (int category : categories) {
    BoundingBox box{};
    bool ok = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !ok; ++attempt) {
      box = random_shape_box(rng, spec);
      ok = !overlaps_any(box, placed);
    }
    if (!ok) return false;
    placed.push_back(box);
    std::array<double, 3> jitter;
    for (auto& j : jitter) j = rng.uniform(-12.0, 12.0);
    draw_shape(canvas, box, palette[category], jitter);

    double occlusion = 0.0;
    if (spec.max_occlusion > 0.0 && rng.bernoulli(0.5)) {
      occlusion = rng.uniform(0.0, spec.max_occlusion);
      const int strip = static_cast<int>(std::floor(occlusion * box.width()));
      if (strip > 0) {
        const double gray = rng.uniform(60.0, 160.0);
        const bool left = rng.bernoulli(0.5);
        const int x0 = left ? box.x_min : box.x_max - strip;
        for (int y = box.y_min; y < box.y_max; ++y)
          for (int x = x0; x < x0 + strip; ++x)
            for (int c = 0; c < 3; ++c) canvas.at(x, y, c) = gray;
      }
    }
    out.objects.push_back({box, category, occlusion, noise});
  }

  // Distractors mix the styles of two categories and are never annotated.
  const double density = std::max(0.0, spec.distractor_density);
  int distractors = static_cast<int>(std::floor(density));
  if (rng.bernoulli(density - std::floor(density))) ++distractors;
  for (int d = 0; d < distractors; ++d) {
    BoundingBox box{};
    bool ok = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !ok; ++attempt) {
      box = random_shape_box(rng, spec);
      ok = !overlaps_any(box, placed);
    }
    if (!ok) continue;
    placed.push_back(box);
    const int a = static_cast<int>(rng.uniform_int(0, spec.num_categories - 1));
    int b = static_cast<int>(rng.uniform_int(0, spec.num_categories - 2));
    if (b >= a) ++b;
    std::array<double, 3> jitter;
    for (auto& j : jitter) j = rng.uniform(-12.0, 12.0);
    BoundingBox first = box;
    BoundingBox second = box;
    if (rng.bernoulli(0.5)) {
      first.x_max = second.x_min = box.x_min + box.width() / 2;
    } else {
      first.y_max = second.y_min = box.y_min + box.height() / 2;
    }
    draw_shape(canvas, first, palette[a], jitter);
    draw_shape(canvas, second, palette[b], jitter);
  }

  const double sigma = 40.0 * noise;
  out.pixels.resize(canvas.values.size());
  for (std::size_t i = 0; i < canvas.values.size(); ++i)
    out.pixels[i] = to_byte(canvas.values[i] + (sigma > 0.0 ? sigma * rng.normal() : 0.0));
  return true;
}

void generate_split(const SceneSpec& spec, const std::vector<CategoryStyle>& palette, Split split,
                    int count, std::vector<SyntheticImage>& out) {
  const auto split_tag = static_cast<std::uint64_t>(split);
  Rng layout(derive_seed(spec.seed, {split_tag, 0xC0FFEEULL}));

  std::vector<int> counts(count);
  for (auto& c : counts) c = static_cast<int>(layout.uniform_int(spec.min_objects, spec.max_objects));
  int total = 0;
  for (int c : counts) total += c;
  for (int i = 0; total < spec.num_categories; i = (i + 1) % count) {
    if (counts[i] < spec.max_objects) {
      ++counts[i];
      ++total;
    }
  }

  // The first m object slots of the split carry each category once.
  int slot = 0;
  for (int i = 0; i < count; ++i) {
    std::vector<int> categories(counts[i]);
    for (auto& c : categories) {
      c = slot < spec.num_categories
              ? slot
              : static_cast<int>(layout.uniform_int(0, spec.num_categories - 1));
      ++slot;
    }
    SyntheticImage image;
    image.id = image_id(split, i);
    image.split = split;
    image.width = spec.width;
    image.height = spec.height;
    bool ok = false;
    for (std::uint64_t attempt = 0; attempt < 64 && !ok; ++attempt)
      ok = render_image(spec, palette, categories,
                        derive_seed(spec.seed, {split_tag, static_cast<std::uint64_t>(i), attempt}),
                        image);
    if (!ok)
      throw Error(ErrorCode::InvalidArgument, "generate_dataset: cannot place objects in " + image.id);
    out.push_back(std::move(image));
  }
}

}  // namespace

const char* to_string(Split split) noexcept {
  switch (split) {
    case Split::TrainLabeled: return "train-labeled";
    case Split::Unlabeled: return "unlabeled";
    case Split::Test: return "test";
  }
  return "unknown";
}

Split split_from_string(const std::string& text) {
  if (text == "train-labeled") return Split::TrainLabeled;
  if (text == "unlabeled") return Split::Unlabeled;
  if (text == "test") return Split::Test;
  throw Error(ErrorCode::MalformedRecord, "unknown split '" + text + "'");
}

bool SyntheticImage::has_category(int category) const {
  return std::any_of(objects.begin(), objects.end(),
                     [&](const GroundTruthObject& o) { return o.category == category; });
}

std::vector<CategoryStyle> default_palette(int num_categories) {
  static const std::vector<CategoryStyle> base = {
      {{210, 40, 40}, Texture::Solid},          {{40, 180, 60}, Texture::HorizontalStripes},
      {{50, 70, 220}, Texture::Ring},           {{225, 205, 40}, Texture::Checker},
      {{190, 50, 190}, Texture::VerticalStripes}, {{40, 200, 210}, Texture::Solid},
      {{235, 130, 30}, Texture::Ring},          {{235, 235, 235}, Texture::HorizontalStripes},
  };
  std::vector<CategoryStyle> out;
  for (int i = 0; i < num_categories; ++i) {
    if (i < static_cast<int>(base.size())) {
      out.push_back(base[i]);
      continue;
    }
    const std::uint64_t h = splitmix64(static_cast<std::uint64_t>(i));
    out.push_back({{static_cast<std::uint8_t>(h & 0xff), static_cast<std::uint8_t>((h >> 8) & 0xff),
                    static_cast<std::uint8_t>((h >> 16) & 0xff)},
                   static_cast<Texture>((h >> 24) % 5)});
  }
  return out;
}

void validate(const SceneSpec& spec) {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidArgument, "scene spec: " + msg); };
  if (spec.num_categories < 2) fail("num_categories must be >= 2");
  if (spec.num_labeled < 1 || spec.num_unlabeled < 1 || spec.num_test < 1)
    fail("every split needs at least one image");
  if (spec.width <= 0 || spec.height <= 0) fail("image size must be positive");
  if (spec.min_objects < 1 || spec.max_objects < spec.min_objects) fail("bad objects-per-image range");
  if (spec.min_object_size < 4 || spec.max_object_size < spec.min_object_size)
    fail("bad object size range");
  if (spec.max_object_size > spec.width || spec.max_object_size > spec.height)
    fail("object size " + std::to_string(spec.max_object_size) + " cannot fit a " +
         std::to_string(spec.width) + "x" + std::to_string(spec.height) + " image");
  if (!spec.palette.empty() && static_cast<int>(spec.palette.size()) != spec.num_categories)
    fail("palette must list one style per category");
  for (int count : {spec.num_labeled, spec.num_unlabeled, spec.num_test})
    if (static_cast<long long>(count) * spec.max_objects < spec.num_categories)
      fail("a split is too small to contain every category");
  if (spec.distractor_density < 0.0) fail("distractor_density must be >= 0");
  if (spec.max_noise < 0.0 || spec.max_noise > 1.0) fail("max_noise must be in [0,1]");
  if (spec.max_occlusion < 0.0 || spec.max_occlusion > 1.0) fail("max_occlusion must be in [0,1]");
}

Dataset generate_dataset(const SceneSpec& spec) {
  validate(spec);
  const auto palette = spec.palette.empty() ? default_palette(spec.num_categories) : spec.palette;
  Dataset ds;
  ds.spec = spec;
  generate_split(spec, palette, Split::TrainLabeled, spec.num_labeled, ds.images);
  generate_split(spec, palette, Split::Unlabeled, spec.num_unlabeled, ds.images);
  generate_split(spec, palette, Split::Test, spec.num_test, ds.images);
  return ds;
}

std::vector<const SyntheticImage*> Dataset::split(Split which) const {
  std::vector<const SyntheticImage*> out;
  for (const auto& img : images)
    if (img.split == which) out.push_back(&img);
  return out;
}

const SyntheticImage* Dataset::find(const std::string& id) const {
  for (const auto& img : images)
    if (img.id == id) return &img;
  return nullptr;
}

ImageIndex::ImageIndex(const Dataset& dataset) {
  for (const auto& img : dataset.images) by_id_.emplace(img.id, &img);
}

const SyntheticImage* ImageIndex::find(const std::string& id) const {
  const auto it = by_id_.find(id);
  return it == by_id_.end() ? nullptr : it->second;
}

const SyntheticImage& ImageIndex::at(const std::string& id) const {
  const auto* img = find(id);
  if (!img) throw Error(ErrorCode::UnknownImage, "no image with id '" + id + "'");
  return *img;
}

std::vector<std::uint8_t> crop_pixels(const SyntheticImage& image, const BoundingBox& box) {
  if (!fits_inside(box, image.width, image.height))
    throw Error(ErrorCode::InvalidArgument, "crop box outside image " + image.id);
  std::vector<std::uint8_t> out;
  out.reserve(static_cast<std::size_t>(box.area()) * 3);
  for (int y = box.y_min; y < box.y_max; ++y) {
    const auto* row = &image.pixels[(static_cast<std::size_t>(y) * image.width + box.x_min) * 3];
    out.insert(out.end(), row, row + static_cast<std::size_t>(box.width()) * 3);
  }
  return out;
}

PasteResult paste(const SyntheticImage& source, const BoundingBox& crop,
                  const SyntheticImage& target, std::uint64_t seed) {
  if (!fits_inside(crop, source.width, source.height))
    throw Error(ErrorCode::InvalidArgument, "paste: crop outside source image " + source.id);
  if (crop.width() > target.width || crop.height() > target.height)
    throw Error(ErrorCode::CropTooLarge, "paste: crop does not fit target image " + target.id);
  const int nx = target.width - crop.width() + 1;
  const int ny = target.height - crop.height() + 1;
  Rng rng(seed);
  const auto cell = rng.uniform_int(0, static_cast<std::int64_t>(nx) * ny - 1);
  const int x = static_cast<int>(cell % nx);
  const int y = static_cast<int>(cell / nx);

  PasteResult result{target, {x, y, x + crop.width(), y + crop.height()}};
  const std::size_t row_bytes = static_cast<std::size_t>(crop.width()) * 3;
  for (int r = 0; r < crop.height(); ++r) {
    const auto* src = &source.pixels[(static_cast<std::size_t>(crop.y_min + r) * source.width + crop.x_min) * 3];
    auto* dst = &result.image.pixels[(static_cast<std::size_t>(y + r) * target.width + x) * 3];
    std::copy(src, src + row_bytes, dst);
  }
  return result;
}

nlohmann::json to_json(const SceneSpec& spec) {
  nlohmann::json palette = nlohmann::json::array();
  for (const auto& s : spec.palette)
    palette.push_back({{"color", {s.color[0], s.color[1], s.color[2]}},
                       {"texture", static_cast<int>(s.texture)}});
  return {{"num_categories", spec.num_categories},
          {"num_labeled", spec.num_labeled},
          {"num_unlabeled", spec.num_unlabeled},
          {"num_test", spec.num_test},
          {"width", spec.width},
          {"height", spec.height},
          {"min_objects", spec.min_objects},
          {"max_objects", spec.max_objects},
          {"min_object_size", spec.min_object_size},
          {"max_object_size", spec.max_object_size},
          {"palette", palette},
          {"distractor_density", spec.distractor_density},
          {"max_noise", spec.max_noise},
          {"max_occlusion", spec.max_occlusion},
          {"seed", spec.seed}};
}

SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  static const std::set<std::string> kKeys{
      "num_categories", "num_labeled",  "num_unlabeled", "num_test",           "width",
      "height",         "min_objects",  "max_objects",   "min_object_size",    "max_object_size",
      "distractor_density", "max_noise", "max_occlusion", "seed",              "palette"};
  if (!j.is_object()) throw Error(ErrorCode::MalformedRecord, "scene spec must be an object");
  for (const auto& [key, _] : j.items())
    if (!kKeys.count(key)) throw Error(ErrorCode::InvalidArgument, "scene spec: unknown key " + key);
  SceneSpec s;
  try {
    s.num_categories = j.value("num_categories", s.num_categories);
    s.num_labeled = j.value("num_labeled", s.num_labeled);
    s.num_unlabeled = j.value("num_unlabeled", s.num_unlabeled);
    s.num_test = j.value("num_test", s.num_test);
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    s.min_objects = j.value("min_objects", s.min_objects);
    s.max_objects = j.value("max_objects", s.max_objects);
    s.min_object_size = j.value("min_object_size", s.min_object_size);
    s.max_object_size = j.value("max_object_size", s.max_object_size);
    s.distractor_density = j.value("distractor_density", s.distractor_density);
    s.max_noise = j.value("max_noise", s.max_noise);
    s.max_occlusion = j.value("max_occlusion", s.max_occlusion);
    s.seed = j.value("seed", s.seed);
    if (j.contains("palette"))
      for (const auto& p : j.at("palette")) {
        CategoryStyle style;
        for (int c = 0; c < 3; ++c) style.color[c] = p.at("color").at(c).get<std::uint8_t>();
        style.texture = static_cast<Texture>(p.at("texture").get<int>());
        s.palette.push_back(style);
      }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, std::string("scene spec: ") + e.what());
  }
  return s;
}

nlohmann::json image_to_json(const SyntheticImage& image) {
  nlohmann::json objects = nlohmann::json::array();
  for (const auto& o : image.objects)
    objects.push_back({{"box", to_json(o.box)},
                       {"category", o.category},
                       {"occluder_level", o.occluder_level},
                       {"noise_level", o.noise_level}});
  return {{"format_version", kDatasetFormatVersion},
          {"id", image.id},
          {"split", to_string(image.split)},
          {"width", image.width},
          {"height", image.height},
          {"pixels", base64_encode(image.pixels)},
          {"objects", objects}};
}

SyntheticImage image_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::MalformedRecord, "image record is not an object");
  if (!j.contains("format_version") || !j["format_version"].is_number_integer())
    throw Error(ErrorCode::MalformedRecord, "missing format_version");
  if (j["format_version"].get<int>() != kDatasetFormatVersion)
    throw Error(ErrorCode::VersionMismatch,
                "dataset format_version " + std::to_string(j["format_version"].get<int>()));
  SyntheticImage img;
  try {
    img.id = j.at("id").get<std::string>();
    img.split = split_from_string(j.at("split").get<std::string>());
    img.width = j.at("width").get<int>();
    img.height = j.at("height").get<int>();
    auto bytes = base64_decode(j.at("pixels").get<std::string>());
    if (!bytes) throw Error(ErrorCode::MalformedRecord, "pixels are not valid base64");
    if (img.width <= 0 || img.height <= 0 ||
        bytes->size() != static_cast<std::size_t>(img.width) * img.height * 3)
      throw Error(ErrorCode::MalformedRecord, "pixel buffer does not match width x height x 3");
    img.pixels = std::move(*bytes);
    for (const auto& o : j.at("objects")) {
      GroundTruthObject obj;
      obj.box = box_from_json(o.at("box"));
      obj.category = o.at("category").get<int>();
      obj.occluder_level = o.value("occluder_level", 0.0);
      obj.noise_level = o.value("noise_level", 0.0);
      if (!fits_inside(obj.box, img.width, img.height) || obj.category < 0)
        throw Error(ErrorCode::MalformedRecord, "object box outside image or negative category");
      img.objects.push_back(obj);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, e.what());
  }
  return img;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream lines(dir / "dataset.jsonl", std::ios::binary | std::ios::trunc);
  if (!lines) throw Error(ErrorCode::Io, "cannot write " + (dir / "dataset.jsonl").string());
  for (const auto& img : dataset.images) lines << image_to_json(img).dump() << '\n';

  nlohmann::json counts = {{"train-labeled", 0}, {"unlabeled", 0}, {"test", 0}};
  for (const auto& img : dataset.images) counts[to_string(img.split)] = counts[to_string(img.split)].get<int>() + 1;
  std::ofstream manifest(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!manifest) throw Error(ErrorCode::Io, "cannot write " + (dir / "manifest.json").string());
  manifest << nlohmann::json{{"format_version", kDatasetFormatVersion},
                             {"spec", to_json(dataset.spec)},
                             {"counts", counts}}
                  .dump(2)
           << '\n';
  if (!lines || !manifest) throw Error(ErrorCode::Io, "write failed in " + dir.string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest_in(dir / "manifest.json", std::ios::binary);
  if (!manifest_in) throw Error(ErrorCode::Io, "cannot read " + (dir / "manifest.json").string());
  nlohmann::json manifest = nlohmann::json::parse(manifest_in, nullptr, false);
  if (manifest.is_discarded() || !manifest.is_object())
    throw Error(ErrorCode::MalformedRecord, "manifest.json is not valid JSON");
  if (manifest.value("format_version", -1) != kDatasetFormatVersion)
    throw Error(ErrorCode::VersionMismatch,
                "manifest format_version " + manifest.value("format_version", nlohmann::json()).dump());

  Dataset ds;
  ds.spec = scene_spec_from_json(manifest.at("spec"));

  std::ifstream in(dir / "dataset.jsonl", std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot read " + (dir / "dataset.jsonl").string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw Error(ErrorCode::MalformedRecord, "line " + std::to_string(line_no) + ": invalid JSON");
    try {
      ds.images.push_back(image_from_json(j));
    } catch (const Error& e) {
      if (e.code() == ErrorCode::VersionMismatch) throw;
      throw Error(ErrorCode::MalformedRecord, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (manifest.contains("counts")) {
    for (Split s : {Split::TrainLabeled, Split::Unlabeled, Split::Test}) {
      const auto expected = manifest["counts"].value(to_string(s), 0);
      const auto actual = static_cast<int>(ds.split(s).size());
      if (expected != actual)
        throw Error(ErrorCode::MalformedRecord,
                    "line " + std::to_string(line_no + 1) + ": expected " + std::to_string(expected) +
                        " " + to_string(s) + " images, found " + std::to_string(actual));
    }
  }
  return ds;
}

}  // namespace miner
