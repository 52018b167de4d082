#pragma once

// Augmentation, label corruption, subsets and batching.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dcm/autograd/tensor.hpp"
#include "dcm/common/random.hpp"
#include "dcm/data/dataset.hpp"

namespace dcm::data {

/// Per-channel mean and population std of pixels scaled to [0,1].
struct Normalization {
  std::vector<double> mean;
  std::vector<double> std;
};

/// Statistics of a training split; never computed from test data.
Normalization channel_stats(const Dataset& train);

struct CropFlip {
  std::size_t dy = 4;
  std::size_t dx = 4;
  bool flip = false;
};

constexpr std::size_t kPad = 4;

/// Crop offsets uniform in [0, 2*kPad], flip with probability 1/2.
CropFlip draw_crop_flip(Engine& eng);

/// Zero-pad by kPad, crop back to H x W at (dy, dx), optionally mirror
/// horizontally, then normalize. `out` has C*H*W entries.
template <typename T>
void augment_image(std::span<const std::uint8_t> image, std::size_t channels, std::size_t height,
                   std::size_t width, const CropFlip& cf, const Normalization& norm,
                   std::span<T> out);

/// Normalization only (evaluation path).
template <typename T>
void normalize_image(std::span<const std::uint8_t> image, std::size_t channels,
                     std::size_t height, std::size_t width, const Normalization& norm,
                     std::span<T> out);

struct CorruptionPlan {
  double ratio = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> indices;  // ascending
  std::vector<std::int32_t> old_labels;
  std::vector<std::int32_t> new_labels;

  /// One "index old_label new_label" line per corrupted sample.
  std::string to_text() const;
};

/// Exactly round(ratio * N) samples receive a label drawn uniformly from
/// the other M-1 classes.
std::pair<Dataset, CorruptionPlan> corrupt_labels(const Dataset& ds, double ratio,
                                                  std::uint64_t seed);

/// Seeded class-stratified subset of `n` samples, in ascending original
/// order. Per-class quotas are proportional (largest remainder).
std::vector<std::size_t> stratified_subset(const Dataset& ds, std::size_t n, std::uint64_t seed);

/// Sample order of one epoch, split into batches; the last batch may be short.
std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size,
                                                 std::uint64_t seed, std::uint64_t epoch);

template <typename T>
struct LabeledBatch {
  ag::Tensor<T> images;
  std::vector<std::int32_t> labels;
};

/// Builds a batch. With `augment`, each sample's crop/flip is drawn from a
/// stream keyed on (seed, epoch, sample index), independent of batching.
template <typename T>
LabeledBatch<T> make_batch(const Dataset& ds, std::span<const std::size_t> indices,
                           const Normalization& norm, bool augment, std::uint64_t seed,
                           std::uint64_t epoch);

}  // namespace dcm::data
