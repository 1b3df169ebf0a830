#include <doctest.h>

#include <set>

#include "miner/base64.hpp"
#include "miner/error.hpp"
#include "miner/png_codec.hpp"
#include "miner/random.hpp"

TEST_CASE("derive_seed separates tag streams") {
  CHECK(miner::derive_seed(1, {1, 2}) != miner::derive_seed(1, {2, 1}));
  CHECK(miner::derive_seed(1, {1}) != miner::derive_seed(2, {1}));
  CHECK(miner::derive_seed(7, {3, 4}) == miner::derive_seed(7, {3, 4}));
}

TEST_CASE("uniform_int stays in range and hits both ends") {
  miner::Rng rng(9);
  std::set<std::int64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto v = rng.uniform_int(-3, 3);
    CHECK(v >= -3);
    CHECK(v <= 3);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
}

TEST_CASE("sample_indices draws distinct indices") {
  miner::Rng rng(4);
  const auto idx = rng.sample_indices(50, 20);
  CHECK(idx.size() == 20);
  CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == 20);
  for (auto i : idx) CHECK(i < 50);
  CHECK(rng.sample_indices(5, 10).size() == 5);
}

TEST_CASE("normal draws have roughly unit variance") {
  miner::Rng rng(21);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    sum += v;
    sq += v * v;
  }
  CHECK(sum / n == doctest::Approx(0.0).epsilon(0.05).scale(1.0));
  CHECK(sq / n == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("base64 known vectors") {
  auto enc = [](std::string s) { return miner::base64_encode({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}); };
  CHECK(enc("") == "");
  CHECK(enc("f") == "Zg==");
  CHECK(enc("fo") == "Zm8=");
  CHECK(enc("foo") == "Zm9v");
  CHECK(enc("foobar") == "Zm9vYmFy");
  const auto dec = miner::base64_decode("Zm9vYmE=");
  REQUIRE(dec);
  CHECK(std::string(dec->begin(), dec->end()) == "fooba");
  CHECK_FALSE(miner::base64_decode("Zm9*"));
  CHECK_FALSE(miner::base64_decode("Zm9"));
}

TEST_CASE("base64 round trip of random bytes") {
  miner::Rng rng(8);
  for (int n = 0; n < 40; ++n) {
    std::vector<std::uint8_t> bytes(n);
    for (auto& b : bytes) b = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    CHECK(miner::base64_decode(miner::base64_encode(bytes)) == bytes);
  }
}

TEST_CASE("png round trip preserves pixels") {
  miner::RgbImage img{7, 5, {}};
  miner::Rng rng(2);
  for (int i = 0; i < 7 * 5 * 3; ++i) img.pixels.push_back(static_cast<std::uint8_t>(rng.uniform_int(0, 255)));
  const auto png = miner::encode_png(img);
  REQUIRE(png.size() > 8);
  CHECK(png[1] == 'P');
  const auto back = miner::decode_png(png);
  CHECK(back.width == 7);
  CHECK(back.height == 5);
  CHECK(back.pixels == img.pixels);
}

TEST_CASE("png decoder rejects garbage") {
  const std::vector<std::uint8_t> junk{1, 2, 3, 4, 5, 6, 7, 8, 9};
  CHECK_THROWS_AS(miner::decode_png(junk), miner::Error);
}
