#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <fmt/format.h>
#include <unistd.h>

#include "dcm/common/error.hpp"
#include "dcm/data/dataset.hpp"
#include "dcm/data/pipeline.hpp"

namespace dcm::data {
namespace {

namespace fs = std::filesystem;

std::vector<std::uint8_t> random_cifar_bytes(std::size_t records, Engine& eng) {
  std::vector<std::uint8_t> b(records * 3073);
  for (std::size_t r = 0; r < records; ++r) {
    b[r * 3073] = static_cast<std::uint8_t>(uniform_index(eng, 10));
    for (std::size_t j = 1; j < 3073; ++j) b[r * 3073 + j] = static_cast<std::uint8_t>(eng());
  }
  return b;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

Dataset balanced(std::size_t n, std::size_t classes, std::size_t side = 2) {
  Dataset ds;
  ds.channels = 1;
  ds.height = ds.width = side;
  ds.num_classes = classes;
  for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(static_cast<std::int32_t>(i % classes));
  ds.images.assign(n * side * side, 7);
  return ds;
}

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / fmt::format("dcm_data_{}", ::getpid())) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

TEST(Cifar, DecodeEncodeRoundTripIsBitExact) {
  Engine eng(1);
  const auto bytes = random_cifar_bytes(7, eng);
  const auto ds = decode_cifar10(bytes, "mem");
  EXPECT_EQ(ds.size(), 7u);
  EXPECT_EQ(ds.labels[0], bytes[0]);
  EXPECT_EQ(ds.image(0)[0], bytes[1]);
  EXPECT_EQ(encode_cifar10(ds), bytes);
}

TEST(Cifar, MalformedInputIsReportedWithOffset) {
  Engine eng(2);
  auto bytes = random_cifar_bytes(2, eng);
  try {
    decode_cifar10(std::span(bytes).first(bytes.size() - 5), "short.bin");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("short.bin"), std::string::npos);
  }
  bytes[3073] = 12;
  try {
    decode_cifar10(bytes, "label.bin");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 3073"), std::string::npos) << e.what();
  }
}

TEST(Cifar, LoadsStandardFileLayout) {
  TempDir dir;
  Engine eng(3);
  std::vector<std::uint8_t> first;
  for (int b = 1; b <= 5; ++b) {
    auto bytes = random_cifar_bytes(3, eng);
    if (b == 1) first = bytes;
    write_bytes(dir.path() / fmt::format("data_batch_{}.bin", b), bytes);
  }
  write_bytes(dir.path() / "test_batch.bin", random_cifar_bytes(4, eng));
  const auto s = load_cifar10(dir.path());
  EXPECT_EQ(s.train.size(), 15u);
  EXPECT_EQ(s.test.size(), 4u);
  EXPECT_EQ(s.train.channels, 3u);
  EXPECT_EQ(s.train.height, 32u);
  EXPECT_EQ(s.train.labels[0], first[0]);
  fs::remove(dir.path() / "data_batch_4.bin");
  EXPECT_THROW(load_cifar10(dir.path()), DataError);
}

TEST(Mnist, RoundTripAndErrors) {
  Engine eng(4);
  Dataset ds = balanced(9, 10, 28);
  for (auto& p : ds.images) p = static_cast<std::uint8_t>(eng());
  const auto img = encode_mnist_images(ds);
  const auto lab = encode_mnist_labels(ds);
  EXPECT_EQ(img[2], 0x08);
  EXPECT_EQ(img[3], 0x03);
  const auto back = decode_mnist(img, lab, "img", "lab");
  EXPECT_EQ(back.images, ds.images);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(encode_mnist_images(back), img);
  EXPECT_EQ(encode_mnist_labels(back), lab);

  auto bad = img;
  bad[3] = 0x01;
  try {
    decode_mnist(bad, lab, "t10k-images-idx3-ubyte", "lab");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("t10k-images-idx3-ubyte"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("offset 0"), std::string::npos);
  }
  EXPECT_THROW(decode_mnist(std::span(img).first(img.size() - 1), lab, "i", "l"), DataError);

  TempDir dir;
  write_bytes(dir.path() / "train-images-idx3-ubyte", img);
  write_bytes(dir.path() / "train-labels-idx1-ubyte", lab);
  write_bytes(dir.path() / "t10k-images-idx3-ubyte", img);
  write_bytes(dir.path() / "t10k-labels-idx1-ubyte", lab);
  const auto s = load_mnist(dir.path());
  EXPECT_EQ(s.test.size(), 9u);
  EXPECT_EQ(s.test.channels, 1u);
  EXPECT_EQ(s.test.height, 28u);
}

TEST(Normalization, StatisticsMatchDirectComputation) {
  Dataset ds = balanced(3, 2, 2);
  ds.channels = 1;
  ds.images = {0, 255, 0, 255, 51, 51, 51, 51, 102, 102, 102, 102};
  const auto n = channel_stats(ds);
  const double mean = (2 * 1.0 + 4 * 0.2 + 4 * 0.4) / 12.0;
  double var = 0;
  for (auto p : ds.images) var += (p / 255.0 - mean) * (p / 255.0 - mean);
  EXPECT_NEAR(n.mean[0], mean, 1e-12);
  EXPECT_NEAR(n.std[0], std::sqrt(var / 12.0), 1e-12);
}

TEST(Augment, CenterCropWithoutFlipIsNormalization) {
  Engine eng(5);
  std::vector<std::uint8_t> img(3 * 32 * 32);
  for (auto& p : img) p = static_cast<std::uint8_t>(eng());
  Normalization norm{{0.4, 0.5, 0.6}, {0.2, 0.25, 0.3}};
  std::vector<double> a(img.size()), b(img.size());
  augment_image<double>(img, 3, 32, 32, {4, 4, false}, norm, a);
  normalize_image<double>(img, 3, 32, 32, norm, b);
  EXPECT_EQ(a, b);
}

TEST(Augment, ShiftFlipAndPadding) {
  // 1 channel 4x4 image with pixel value = 10*row + col.
  std::vector<std::uint8_t> img(16);
  for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<std::uint8_t>(10 * (i / 4) + i % 4);
  Normalization id{{0.0}, {1.0 / 255.0}};  // maps bytes to their own value
  std::vector<double> out(16);
  augment_image<double>(img, 1, 4, 4, {5, 3, false}, id, out);
  // Row y reads source row y+1, column x reads source column x-1 (zero when negative).
  EXPECT_DOUBLE_EQ(out[0], 0.0);
  EXPECT_DOUBLE_EQ(out[1], 10.0);
  EXPECT_DOUBLE_EQ(out[3 * 4 + 1], 0.0);  // row 4 of the source is padding
  augment_image<double>(img, 1, 4, 4, {4, 4, true}, id, out);
  EXPECT_DOUBLE_EQ(out[0], 3.0);
  EXPECT_DOUBLE_EQ(out[5], 12.0);
}

TEST(Augment, ConstantMeanImageNormalizesToZero) {
  std::vector<std::uint8_t> img(2 * 9, 51);
  Normalization norm{{0.2, 0.2}, {0.1, 0.3}};
  std::vector<double> out(img.size());
  normalize_image<double>(img, 2, 3, 3, norm, out);
  for (double v : out) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Augment, OffsetsStayInRange) {
  Engine eng(6);
  std::set<std::size_t> seen;
  std::size_t flips = 0;
  for (int i = 0; i < 100000; ++i) {
    const auto cf = draw_crop_flip(eng);
    ASSERT_LE(cf.dy, 8u);
    ASSERT_LE(cf.dx, 8u);
    seen.insert(cf.dy);
    flips += cf.flip;
  }
  EXPECT_EQ(seen.size(), 9u);
  EXPECT_NEAR(static_cast<double>(flips) / 100000.0, 0.5, 0.01);
}

TEST(Corruption, ZeroRatioIsIdentity) {
  auto ds = balanced(50, 10);
  auto [out, plan] = corrupt_labels(ds, 0.0, 1);
  EXPECT_EQ(out.labels, ds.labels);
  EXPECT_TRUE(plan.indices.empty());
}

TEST(Corruption, CountAndWrongnessForEveryRatioAndSeed) {
  auto ds = balanced(10000, 10);
  for (double ratio : {0.2, 0.5, 0.8}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto [out, plan] = corrupt_labels(ds, ratio, seed);
      ASSERT_EQ(plan.indices.size(), static_cast<std::size_t>(std::llround(ratio * 10000)));
      std::size_t changed = 0;
      for (std::size_t i = 0; i < ds.size(); ++i) changed += out.labels[i] != ds.labels[i];
      EXPECT_EQ(changed, plan.indices.size());
      for (std::size_t j = 0; j < plan.indices.size(); ++j) {
        EXPECT_NE(plan.new_labels[j], plan.old_labels[j]);
        EXPECT_EQ(out.labels[plan.indices[j]], plan.new_labels[j]);
      }
    }
  }
  EXPECT_EQ(corrupt_labels(ds, 0.5, 3).second.to_text(), corrupt_labels(ds, 0.5, 3).second.to_text());
  EXPECT_NE(corrupt_labels(ds, 0.5, 3).second.to_text(), corrupt_labels(ds, 0.5, 4).second.to_text());
}

TEST(Corruption, ReplacementLabelsCoverOtherClasses) {
  auto ds = balanced(3000, 3);
  auto [out, plan] = corrupt_labels(ds, 1.0, 9);
  std::size_t plus_one = 0;
  for (std::size_t j = 0; j < plan.indices.size(); ++j) {
    plus_one += (plan.old_labels[j] + 1) % 3 == plan.new_labels[j];
  }
  EXPECT_NEAR(static_cast<double>(plus_one) / 3000.0, 0.5, 0.05);
}

TEST(Corruption, Errors) {
  EXPECT_THROW(corrupt_labels(balanced(4, 1), 0.5, 1), DataError);
  EXPECT_THROW(corrupt_labels(balanced(4, 2), 1.5, 1), DataError);
  const auto line = corrupt_labels(balanced(4, 2), 0.25, 1).second.to_text();
  EXPECT_EQ(std::count(line.begin(), line.end(), '\n'), 1);
}

TEST(Subset, StratifiedCountsAndDeterminism) {
  auto ds = balanced(50000, 10);
  const auto a = stratified_subset(ds, 10000, 1);
  EXPECT_EQ(a.size(), 10000u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  for (auto c : class_counts(select(ds, a))) EXPECT_EQ(c, 1000u);
  EXPECT_EQ(a, stratified_subset(ds, 10000, 1));
  EXPECT_NE(a, stratified_subset(ds, 10000, 2));

  auto uneven = balanced(10, 3);  // class counts 4,3,3
  const auto b = stratified_subset(uneven, 5, 1);
  const auto counts = class_counts(select(uneven, b));
  EXPECT_EQ(counts[0] + counts[1] + counts[2], 5u);
  EXPECT_EQ(counts[0], 2u);
  EXPECT_THROW(stratified_subset(uneven, 11, 1), DataError);
}

TEST(Batching, SizesCoverageAndOrder) {
  const auto b = batch_iter(10, 3, 1, 0);
  ASSERT_EQ(b.size(), 4u);
  EXPECT_EQ(b[0].size(), 3u);
  EXPECT_EQ(b[3].size(), 1u);
  std::set<std::size_t> all;
  for (const auto& batch : b) all.insert(batch.begin(), batch.end());
  EXPECT_EQ(all.size(), 10u);
  EXPECT_EQ(b, batch_iter(10, 3, 1, 0));
  EXPECT_NE(batch_iter(50000, 128, 1, 0), batch_iter(50000, 128, 1, 1));
  EXPECT_THROW(batch_iter(10, 0, 1, 0), DataError);
}

TEST(Batching, AugmentationDoesNotDependOnBatchComposition) {
  SyntheticOptions o;
  o.train_size = 20;
  o.test_size = 10;
  const auto s = synthetic_dataset(o, 3);
  const auto norm = channel_stats(s.train);
  std::vector<std::size_t> one{7};
  std::vector<std::size_t> many{3, 7, 11};
  const auto a = make_batch<float>(s.train, one, norm, true, 5, 2);
  const auto b = make_batch<float>(s.train, many, norm, true, 5, 2);
  const std::size_t sz = s.train.image_size();
  EXPECT_TRUE(std::equal(a.images.values().begin(), a.images.values().end(),
                         b.images.values().begin() + static_cast<std::ptrdiff_t>(sz)));
  EXPECT_EQ(b.labels[1], s.train.labels[7]);
  EXPECT_EQ(b.images.shape(), ag::Shape({3, 3, 16, 16}));
}

TEST(Synthetic, ShapesAndDeterminism) {
  SyntheticOptions o;
  const auto a = synthetic_dataset(o, 1);
  a.train.check();
  a.test.check();
  EXPECT_EQ(a.train.size(), o.train_size);
  EXPECT_EQ(fingerprint(a.train), fingerprint(synthetic_dataset(o, 1).train));
  EXPECT_NE(fingerprint(a.train), fingerprint(synthetic_dataset(o, 2).train));
  for (auto c : class_counts(a.test)) EXPECT_GT(c, 0u);
}

}  // namespace
}  // namespace dcm::data
