#pragma once

// In-memory image classification datasets and their on-disk formats.
//
// CIFAR-10 binary: records of 1 label byte followed by 3072 pixel bytes
// (1024 red, 1024 green, 1024 blue, row-major 32x32). Files
// data_batch_1.bin .. data_batch_5.bin and test_batch.bin.
// MNIST IDX: big-endian u32 magic (2051 images, 2049 labels), u32 dims,
// then unsigned bytes. Files train-images-idx3-ubyte, train-labels-idx1-ubyte,
// t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dcm::data {

struct Dataset {
  std::vector<std::uint8_t> images;  // [N, C, H, W]
  std::vector<std::int32_t> labels;  // [N]
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 0;
  std::string split;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {images.data() + i * image_size(), image_size()};
  }
  /// Throws DataError when sizes or labels are inconsistent.
  void check() const;
};

struct Splits {
  Dataset train;
  Dataset test;
};

/// Samples at the given positions, in that order.
Dataset select(const Dataset& ds, std::span<const std::size_t> indices);

/// FNV-1a over shape, labels and pixels.
std::uint64_t fingerprint(const Dataset& ds);

/// Per-class sample counts.
std::vector<std::size_t> class_counts(const Dataset& ds);

Dataset decode_cifar10(std::span<const std::uint8_t> bytes, std::string_view source);
std::vector<std::uint8_t> encode_cifar10(const Dataset& ds);
Splits load_cifar10(const std::filesystem::path& dir);

Dataset decode_mnist(std::span<const std::uint8_t> image_bytes,
                     std::span<const std::uint8_t> label_bytes, std::string_view image_source,
                     std::string_view label_source);
std::vector<std::uint8_t> encode_mnist_images(const Dataset& ds);
std::vector<std::uint8_t> encode_mnist_labels(const Dataset& ds);
Splits load_mnist(const std::filesystem::path& dir);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

struct SyntheticOptions {
  std::size_t train_size = 512;
  std::size_t test_size = 256;
  std::size_t num_classes = 10;
  std::size_t channels = 3;
  std::size_t side = 16;
  double noise = 40.0;  // half-width of the uniform pixel noise
};

/// Class prototypes (smooth random patterns) plus per-sample noise and shifts;
/// learnable by a small CNN within a few epochs.
Splits synthetic_dataset(const SyntheticOptions& options, std::uint64_t seed);

}  // namespace dcm::data
