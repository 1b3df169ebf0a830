#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "miner/detector.hpp"
#include "miner/random.hpp"
#include "miner/synthbench.hpp"

namespace test {

/// A blank image of one colour.
inline miner::SyntheticImage flat_image(const std::string& id, int w, int h, std::uint8_t r, std::uint8_t g,
                                        std::uint8_t b) {
  miner::SyntheticImage img;
  img.id = id;
  img.split = miner::Split::TrainLabeled;
  img.width = w;
  img.height = h;
  img.pixels.resize(static_cast<std::size_t>(w) * h * 3);
  for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
    img.pixels[i] = r;
    img.pixels[i + 1] = g;
    img.pixels[i + 2] = b;
  }
  return img;
}

inline miner::SyntheticImage noise_image(const std::string& id, int w, int h, std::uint64_t seed) {
  miner::SyntheticImage img = flat_image(id, w, h, 0, 0, 0);
  miner::Rng rng(seed);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return img;
}

inline miner::DetectorState random_state(int m, int d, miner::Rng& rng, double scale = 0.3) {
  auto s = miner::DetectorState::zeros(m, d);
  for (auto& w : s.classifier) w = scale * rng.normal();
  for (auto& w : s.regressor) w = scale * rng.normal();
  return s;
}

inline std::vector<double> random_features(int d, miner::Rng& rng) {
  std::vector<double> f(d);
  for (auto& v : f) v = rng.uniform(-1.0, 1.0);
  return f;
}

/// A small scene spec that keeps engine tests fast.
inline miner::SceneSpec small_spec(std::uint64_t seed) {
  miner::SceneSpec spec;
  spec.num_categories = 3;
  spec.num_labeled = 12;
  spec.num_unlabeled = 6;
  spec.num_test = 6;
  spec.width = 48;
  spec.height = 48;
  spec.max_objects = 2;
  spec.seed = seed;
  return spec;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("miner-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace test
