#include "dcm/data/pipeline.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dcm/common/error.hpp"

namespace dcm::data {

Normalization channel_stats(const Dataset& train) {
  train.check();
  const std::size_t px = train.height * train.width;
  Normalization norm;
  norm.mean.assign(train.channels, 0.0);
  norm.std.assign(train.channels, 0.0);
  for (std::size_t c = 0; c < train.channels; ++c) {
    long double s = 0, s2 = 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      const std::uint8_t* p = train.images.data() + i * train.image_size() + c * px;
      for (std::size_t j = 0; j < px; ++j) {
        const long double v = p[j] / 255.0L;
        s += v;
        s2 += v * v;
      }
    }
    const long double n = static_cast<long double>(train.size() * px);
    const long double mean = s / n;
    norm.mean[c] = static_cast<double>(mean);
    const double var = static_cast<double>(std::max(0.0L, s2 / n - mean * mean));
    norm.std[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return norm;
}

CropFlip draw_crop_flip(Engine& eng) {
  CropFlip cf;
  cf.dy = uniform_index(eng, 2 * kPad + 1);
  cf.dx = uniform_index(eng, 2 * kPad + 1);
  cf.flip = (eng() >> 63) != 0;
  return cf;
}

template <typename T>
void augment_image(std::span<const std::uint8_t> image, std::size_t channels, std::size_t height,
                   std::size_t width, const CropFlip& cf, const Normalization& norm,
                   std::span<T> out) {
  for (std::size_t c = 0; c < channels; ++c) {
    const double mean = norm.mean[c], inv = 1.0 / norm.std[c];
    for (std::size_t y = 0; y < height; ++y) {
      // Row/column in the padded frame, shifted back to source coordinates.
      const long sy = static_cast<long>(y + cf.dy) - static_cast<long>(kPad);
      for (std::size_t x = 0; x < width; ++x) {
        const std::size_t xo = cf.flip ? width - 1 - x : x;
        const long sx = static_cast<long>(xo + cf.dx) - static_cast<long>(kPad);
        double v = 0.0;
        if (sy >= 0 && sx >= 0 && sy < static_cast<long>(height) && sx < static_cast<long>(width)) {
          v = image[c * height * width + static_cast<std::size_t>(sy) * width +
                    static_cast<std::size_t>(sx)] /
              255.0;
        }
        out[c * height * width + y * width + x] = static_cast<T>((v - mean) * inv);
      }
    }
  }
}

template <typename T>
void normalize_image(std::span<const std::uint8_t> image, std::size_t channels,
                     std::size_t height, std::size_t width, const Normalization& norm,
                     std::span<T> out) {
  const std::size_t px = height * width;
  for (std::size_t c = 0; c < channels; ++c) {
    const double mean = norm.mean[c], inv = 1.0 / norm.std[c];
    for (std::size_t j = 0; j < px; ++j) {
      out[c * px + j] = static_cast<T>((image[c * px + j] / 255.0 - mean) * inv);
    }
  }
}

std::string CorruptionPlan::to_text() const {
  std::string out;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out += fmt::format("{} {} {}\n", indices[i], old_labels[i], new_labels[i]);
  }
  return out;
}

std::pair<Dataset, CorruptionPlan> corrupt_labels(const Dataset& ds, double ratio,
                                                  std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw DataError(fmt::format("corrupt_labels: ratio {} outside [0, 1]", ratio));
  }
  if (ds.num_classes < 2) throw DataError("corrupt_labels: needs at least 2 classes");
  CorruptionPlan plan;
  plan.ratio = ratio;
  plan.seed = seed;
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(ds.size())));

  Engine eng(derive_seed(seed, "corrupt"));
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order.begin(), order.end(), eng);
  plan.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(plan.indices.begin(), plan.indices.end());

  Dataset out = ds;
  const auto m = static_cast<std::uint64_t>(ds.num_classes);
  for (auto i : plan.indices) {
    const auto old = ds.labels[i];
    const auto shift = 1 + uniform_index(eng, m - 1);
    const auto fresh = static_cast<std::int32_t>((static_cast<std::uint64_t>(old) + shift) % m);
    out.labels[i] = fresh;
    plan.old_labels.push_back(old);
    plan.new_labels.push_back(fresh);
  }
  return {std::move(out), std::move(plan)};
}

std::vector<std::size_t> stratified_subset(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  if (n > ds.size()) {
    throw DataError(fmt::format("stratified_subset: {} samples requested from {}", n, ds.size()));
  }
  const auto counts = class_counts(ds);
  std::vector<std::size_t> quota(counts.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    const double exact = static_cast<double>(n) * static_cast<double>(counts[c]) /
                         static_cast<double>(ds.size());
    quota[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[c];
    remainders.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++quota[remainders[i].second];

  std::vector<std::vector<std::size_t>> by_class(counts.size());
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  std::vector<std::size_t> chosen;
  chosen.reserve(n);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    Engine eng(derive_seed(derive_seed(seed, "subset"), c));
    shuffle(by_class[c].begin(), by_class[c].end(), eng);
    chosen.insert(chosen.end(), by_class[c].begin(),
                  by_class[c].begin() + static_cast<std::ptrdiff_t>(quota[c]));
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size,
                                                 std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw DataError("batch_iter: batch size must be at least 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Engine eng(derive_seed(derive_seed(seed, "shuffle"), epoch));
  shuffle(order.begin(), order.end(), eng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

template <typename T>
LabeledBatch<T> make_batch(const Dataset& ds, std::span<const std::size_t> indices,
                           const Normalization& norm, bool augment, std::uint64_t seed,
                           std::uint64_t epoch) {
  if (indices.empty()) throw DataError("make_batch: empty batch");
  const std::size_t sz = ds.image_size();
  std::vector<T> values(indices.size() * sz);
  LabeledBatch<T> batch;
  batch.labels.reserve(indices.size());
  const std::uint64_t epoch_seed = derive_seed(derive_seed(seed, "augment"), epoch);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto i = indices[b];
    std::span<T> out(values.data() + b * sz, sz);
    if (augment) {
      Engine eng(derive_seed(epoch_seed, i));
      augment_image<T>(ds.image(i), ds.channels, ds.height, ds.width, draw_crop_flip(eng), norm,
                       out);
    } else {
      normalize_image<T>(ds.image(i), ds.channels, ds.height, ds.width, norm, out);
    }
    batch.labels.push_back(ds.labels[i]);
  }
  batch.images =
      ag::Tensor<T>::from({indices.size(), ds.channels, ds.height, ds.width}, std::move(values));
  return batch;
}

#define DCM_INSTANTIATE(T)                                                                      \
  template void augment_image<T>(std::span<const std::uint8_t>, std::size_t, std::size_t,       \
                                 std::size_t, const CropFlip&, const Normalization&,            \
                                 std::span<T>);                                                 \
  template void normalize_image<T>(std::span<const std::uint8_t>, std::size_t, std::size_t,     \
                                   std::size_t, const Normalization&, std::span<T>);            \
  template LabeledBatch<T> make_batch<T>(const Dataset&, std::span<const std::size_t>,          \
                                         const Normalization&, bool, std::uint64_t,             \
                                         std::uint64_t);

DCM_INSTANTIATE(float)
DCM_INSTANTIATE(double)

}  // namespace dcm::data
