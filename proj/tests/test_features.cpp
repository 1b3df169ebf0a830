#include <doctest.h>

#include "miner/error.hpp"
#include "miner/features.hpp"
#include "support.hpp"

namespace {

// Two-pass floating mean and variance per cell, independent of the integer path.
std::vector<double> reference_features(const miner::SyntheticImage& img, const miner::BoundingBox& b) {
  std::vector<double> out;
  for (int gy = 0; gy < 4; ++gy)
    for (int gx = 0; gx < 4; ++gx) {
      const int x0 = b.x_min + gx * b.width() / 4, x1 = b.x_min + (gx + 1) * b.width() / 4;
      const int y0 = b.y_min + gy * b.height() / 4, y1 = b.y_min + (gy + 1) * b.height() / 4;
      for (int c = 0; c < 3; ++c) {
        double mean = 0;
        int n = 0;
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x, ++n) mean += img.at(x, y, c);
        if (n == 0) {
          out.push_back(0);
          out.push_back(0);
          continue;
        }
        mean /= n;
        double var = 0;
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x) var += (img.at(x, y, c) - mean) * (img.at(x, y, c) - mean);
        out.push_back(mean / 255.0);
        out.push_back(var / n / (127.5 * 127.5));
      }
    }
  out.push_back(static_cast<double>(b.width()) / b.height());
  out.push_back(static_cast<double>(b.width() * b.height()) / (img.width * img.height));
  return out;
}

}  // namespace

TEST_CASE("feature dimension is 98") {
  const auto img = test::noise_image("a", 32, 32, 1);
  CHECK(miner::kFeatureDim == 98);
  CHECK(miner::extract_features(img, {0, 0, 16, 16}).size() == 98);
}

TEST_CASE("uniform crop has zero variance entries") {
  const auto img = test::flat_image("a", 32, 32, 200, 10, 90);
  const auto f = miner::extract_features(img, {3, 4, 20, 17});
  for (int cell = 0; cell < 16; ++cell)
    for (int c = 0; c < 3; ++c) CHECK(f[(cell * 3 + c) * 2 + 1] == 0.0);
  CHECK(f[0] == doctest::Approx(200.0 / 255.0));
}

TEST_CASE("identical crops give identical features") {
  const auto src = test::noise_image("a", 32, 32, 5);
  const auto pasted = miner::paste(src, {2, 2, 18, 14}, test::noise_image("b", 40, 40, 6), 3);
  const auto a = miner::extract_features(src, {2, 2, 18, 14});
  auto b = miner::extract_features(pasted.image, pasted.placed_box);
  // only the relative-area entry depends on the canvas
  b.back() = a.back();
  CHECK(a == b);
}

TEST_CASE("features match a floating-point reference") {
  const auto img = test::noise_image("a", 40, 36, 8);
  miner::Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const int x0 = static_cast<int>(rng.uniform_int(0, 30)), y0 = static_cast<int>(rng.uniform_int(0, 26));
    const miner::BoundingBox b{x0, y0, static_cast<int>(rng.uniform_int(x0 + 1, 40)),
                               static_cast<int>(rng.uniform_int(y0 + 1, 36))};
    const auto got = miner::extract_features(img, b);
    const auto want = reference_features(img, b);
    REQUIRE(got.size() == want.size());
    for (std::size_t k = 0; k < got.size(); ++k) CHECK(got[k] == doctest::Approx(want[k]).epsilon(1e-12));
  }
}

TEST_CASE("integral image path equals the direct path bit for bit") {
  const auto img = test::noise_image("a", 48, 40, 12);
  const miner::IntegralImage integral(img);
  miner::Rng rng(2);
  std::vector<double> out(miner::kFeatureDim);
  for (int i = 0; i < 200; ++i) {
    const int x0 = static_cast<int>(rng.uniform_int(0, 46)), y0 = static_cast<int>(rng.uniform_int(0, 38));
    const miner::BoundingBox b{x0, y0, static_cast<int>(rng.uniform_int(x0 + 1, 48)),
                               static_cast<int>(rng.uniform_int(y0 + 1, 40))};
    integral.features(b, out);
    CHECK(out == miner::extract_features(img, b));
  }
}

TEST_CASE("boxes outside the image are rejected") {
  const auto img = test::flat_image("a", 16, 16, 0, 0, 0);
  CHECK_THROWS_AS(miner::extract_features(img, {10, 10, 20, 20}), miner::Error);
  std::vector<double> out(miner::kFeatureDim);
  CHECK_THROWS_AS(miner::IntegralImage(img).features({10, 10, 20, 20}, out), miner::Error);
}
