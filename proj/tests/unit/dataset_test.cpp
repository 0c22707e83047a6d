#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "skipvae/dataset.hpp"

using namespace skipvae;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("skipvae_dataset_" + name);
}

}  // namespace

TEST(Idx, SingleImageFixtureRoundTripsByteExactly) {
  IdxImages img{1, 2, 3, {0, 1, 2, 253, 254, 255}};
  auto bytes = encode_idx_images(img);
  // Hand-written big-endian header.
  const std::vector<std::uint8_t> header{0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 3};
  ASSERT_EQ(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 16), header);
  auto back = parse_idx_images(bytes);
  EXPECT_EQ(back.count, 1u);
  EXPECT_EQ(back.rows, 2u);
  EXPECT_EQ(back.cols, 3u);
  EXPECT_EQ(back.pixels, img.pixels);
  EXPECT_EQ(encode_idx_images(back), bytes);
}

TEST(Idx, CorruptMagicNamesOffset) {
  std::vector<std::uint8_t> bytes(20, 0);
  try {
    parse_idx_images(bytes);
    FAIL();
  } catch (const IdxFormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
    EXPECT_NE(std::string(e.what()).find("offset 0"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("0x00000000"), std::string::npos);
  }
}

TEST(Idx, TruncatedHeaderAndPayload) {
  auto bytes = encode_idx_images({2, 2, 2, std::vector<std::uint8_t>(8, 7)});
  EXPECT_THROW(parse_idx_images(std::span(bytes).first(10)), IdxFormatError);
  EXPECT_THROW(parse_idx_images(std::span(bytes).first(20)), IdxFormatError);
  auto labels = encode_idx_labels(std::vector<int>{1, 2, 3});
  EXPECT_THROW(parse_idx_labels(std::span(labels).first(9)), IdxFormatError);
}

TEST(Idx, LabelCountMismatchIsDataError) {
  auto img = temp_file("img"), lab = temp_file("lab");
  detail::write_file(img, encode_idx_images({2, 1, 2, {0, 255, 255, 0}}));
  detail::write_file(lab, encode_idx_labels(std::vector<int>{3}));
  EXPECT_THROW(load_idx(img, lab), DataError);
  detail::write_file(lab, encode_idx_labels(std::vector<int>{3, 4}));
  auto ds = load_idx(img, lab);
  EXPECT_EQ(ds.count, 2u);
  EXPECT_EQ(ds.dim, 2u);
  EXPECT_EQ(*ds.labels, (std::vector<int>{3, 4}));
  std::filesystem::remove(img);
  std::filesystem::remove(lab);
}

TEST(Idx, MissingFileIsDataError) { EXPECT_THROW(load_idx("/nonexistent/images"), DataError); }

TEST(Binarize, ThresholdBoundary) {
  Dataset ds;
  ds.count = 1;
  ds.dim = 4;
  ds.pixels = {0, 127, 128, 255};
  auto b = binarize(ds, BinarizeMode::threshold);
  EXPECT_EQ(b.pixels, (std::vector<std::uint8_t>{0, 0, 1, 1}));
  EXPECT_TRUE(b.binary);
}

TEST(Binarize, AllZeroImageStaysZero) {
  Dataset ds;
  ds.count = 2;
  ds.dim = 3;
  ds.pixels.assign(6, 0);
  EXPECT_EQ(binarize(ds, BinarizeMode::threshold).pixels, ds.pixels);
  EXPECT_EQ(binarize(ds, BinarizeMode::stochastic, 5).pixels, ds.pixels);
}

TEST(Binarize, ThresholdIsIdempotent) {
  Dataset ds;
  ds.count = 1;
  ds.dim = 5;
  ds.pixels = {3, 200, 127, 128, 90};
  auto once = binarize(ds, BinarizeMode::threshold);
  auto twice = binarize(once, BinarizeMode::threshold);
  EXPECT_EQ(once.pixels, twice.pixels);
}

TEST(Binarize, StochasticIsFrozenPerSeed) {
  Dataset ds;
  ds.count = 100;
  ds.dim = 10;
  ds.pixels.assign(1000, 128);
  auto a = binarize(ds, BinarizeMode::stochastic, 7);
  auto b = binarize(ds, BinarizeMode::stochastic, 7);
  auto c = binarize(ds, BinarizeMode::stochastic, 8);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_NE(a.pixels, c.pixels);
  double ones = 0;
  for (auto p : a.pixels) ones += p;
  EXPECT_NEAR(ones / 1000.0, 128.0 / 255.0, 4 * std::sqrt(0.25 / 1000.0));
}

TEST(Batch, RequiresBinarizedData) {
  Dataset ds;
  ds.count = 1;
  ds.dim = 2;
  ds.pixels = {0, 255};
  std::vector<std::size_t> idx{0};
  EXPECT_THROW(ds.batch(idx), DataError);
}

TEST(Synthetic, DeterministicPerSeed) {
  auto a = synthetic_grid(50, 16, 1), b = synthetic_grid(50, 16, 1);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(*a.labels, *b.labels);
}

TEST(Synthetic, LabelHistogramCoversAllPrototypes) {
  auto ds = synthetic_grid(30, 8, 2);
  std::vector<int> hist(10, 0);
  for (int l : *ds.labels) ++hist[l];
  for (int h : hist) EXPECT_EQ(h, 3);
}

TEST(Synthetic, FlipRateWithinFourSigma) {
  const std::size_t n = 2000, p = 100;
  auto ds = synthetic_grid(n, p, 3);
  // Prototype estimate: per-pixel majority within each label.
  std::size_t flips = 0;
  for (int k = 0; k < 10; ++k) {
    for (std::size_t j = 0; j < p; ++j) {
      std::size_t ones = 0, total = 0;
      for (std::size_t i = k; i < n; i += 10, ++total) ones += ds.pixels[i * p + j];
      flips += std::min(ones, total - ones);
    }
  }
  const double rate = double(flips) / double(n * p);
  const double sigma = std::sqrt(0.05 * 0.95 / double(n * p));
  EXPECT_NEAR(rate, 0.05, 4 * sigma);
}

TEST(Synthetic, TooFewExamples) { EXPECT_THROW(synthetic_grid(9, 4, 0), DataError); }

TEST(Dataset, SliceAndSelectKeepLabels) {
  auto ds = synthetic_grid(20, 4, 0);
  auto s = ds.slice(5, 8);
  EXPECT_EQ(s.count, 3u);
  EXPECT_EQ((*s.labels)[0], 5);
  EXPECT_THROW(ds.slice(5, 30), DataError);
}

TEST(Mnist, StandardTrainHeaderWhenAvailable) {
  const std::filesystem::path path = std::filesystem::path(SKIPVAE_MNIST_DIR) / "train-images-idx3-ubyte";
  if (!std::filesystem::exists(path)) GTEST_SKIP() << "MNIST not present";
  auto bytes = detail::read_file(path);
  auto img = parse_idx_images(bytes);
  EXPECT_EQ(img.count, 60000u);
  EXPECT_EQ(img.rows, 28u);
  EXPECT_EQ(img.cols, 28u);
}
