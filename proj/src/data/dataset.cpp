#include "dcm/data/dataset.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "dcm/common/error.hpp"
#include "dcm/common/random.hpp"

namespace dcm::data {

namespace {

constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarImage = 3 * kCifarSide * kCifarSide;
constexpr std::size_t kCifarRecord = 1 + kCifarImage;
constexpr std::uint32_t kIdxImages = 2051;
constexpr std::uint32_t kIdxLabels = 2049;

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t offset,
                        std::string_view source) {
  if (offset + 4 > b.size()) {
    throw DataError(fmt::format("{}: truncated header at offset {}", source, offset));
  }
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

void append(Dataset& into, const Dataset& from) {
  into.images.insert(into.images.end(), from.images.begin(), from.images.end());
  into.labels.insert(into.labels.end(), from.labels.begin(), from.labels.end());
}

}  // namespace

void Dataset::check() const {
  if (labels.empty()) throw DataError(fmt::format("dataset '{}' is empty", split));
  if (images.size() != labels.size() * image_size()) {
    throw DataError(fmt::format("dataset '{}': {} pixel bytes for {} samples of {}x{}x{}", split,
                                images.size(), labels.size(), channels, height, width));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw DataError(fmt::format("dataset '{}': label {} of sample {} outside [0, {})", split,
                                  labels[i], i, num_classes));
    }
  }
}

Dataset select(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.num_classes = ds.num_classes;
  out.split = ds.split;
  out.images.reserve(indices.size() * ds.image_size());
  out.labels.reserve(indices.size());
  for (auto i : indices) {
    if (i >= ds.size()) {
      throw DataError(fmt::format("select: index {} beyond dataset of {}", i, ds.size()));
    }
    auto img = ds.image(i);
    out.images.insert(out.images.end(), img.begin(), img.end());
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

std::uint64_t fingerprint(const Dataset& ds) {
  auto h = fnv1a64(fmt::format("{} {} {} {} {}", ds.size(), ds.channels, ds.height, ds.width,
                               ds.num_classes));
  h = fnv1a64({reinterpret_cast<const char*>(ds.labels.data()),
               ds.labels.size() * sizeof(std::int32_t)},
              h);
  return fnv1a64({reinterpret_cast<const char*>(ds.images.data()), ds.images.size()}, h);
}

std::vector<std::size_t> class_counts(const Dataset& ds) {
  std::vector<std::size_t> counts(ds.num_classes, 0);
  for (auto y : ds.labels) ++counts.at(static_cast<std::size_t>(y));
  return counts;
}

Dataset decode_cifar10(std::span<const std::uint8_t> bytes, std::string_view source) {
  if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
    throw DataError(fmt::format("{}: size {} is not a positive multiple of the {}-byte record",
                                source, bytes.size(), kCifarRecord));
  }
  Dataset ds;
  ds.channels = 3;
  ds.height = ds.width = kCifarSide;
  ds.num_classes = 10;
  const std::size_t n = bytes.size() / kCifarRecord;
  ds.labels.reserve(n);
  ds.images.reserve(n * kCifarImage);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t offset = r * kCifarRecord;
    if (bytes[offset] >= 10) {
      throw DataError(fmt::format("{}: label byte {} at offset {} is not in 0..9", source,
                                  bytes[offset], offset));
    }
    ds.labels.push_back(bytes[offset]);
    ds.images.insert(ds.images.end(), bytes.begin() + offset + 1,
                     bytes.begin() + offset + kCifarRecord);
  }
  return ds;
}

std::vector<std::uint8_t> encode_cifar10(const Dataset& ds) {
  if (ds.channels != 3 || ds.height != kCifarSide || ds.width != kCifarSide) {
    throw DataError("encode_cifar10: dataset is not 3x32x32");
  }
  std::vector<std::uint8_t> out;
  out.reserve(ds.size() * kCifarRecord);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out.push_back(static_cast<std::uint8_t>(ds.labels[i]));
    auto img = ds.image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("{}: cannot open", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Splits load_cifar10(const std::filesystem::path& dir) {
  Splits s;
  for (int b = 1; b <= 5; ++b) {
    const auto path = dir / fmt::format("data_batch_{}.bin", b);
    const auto part = decode_cifar10(read_file(path), path.string());
    if (b == 1) {
      s.train = part;
    } else {
      append(s.train, part);
    }
  }
  const auto test_path = dir / "test_batch.bin";
  s.test = decode_cifar10(read_file(test_path), test_path.string());
  s.train.split = "train";
  s.test.split = "test";
  return s;
}

Dataset decode_mnist(std::span<const std::uint8_t> image_bytes,
                     std::span<const std::uint8_t> label_bytes, std::string_view image_source,
                     std::string_view label_source) {
  if (auto magic = read_be32(image_bytes, 0, image_source); magic != kIdxImages) {
    throw DataError(fmt::format("{}: bad magic {} at offset 0 (expected {})", image_source, magic,
                                kIdxImages));
  }
  if (auto magic = read_be32(label_bytes, 0, label_source); magic != kIdxLabels) {
    throw DataError(fmt::format("{}: bad magic {} at offset 0 (expected {})", label_source, magic,
                                kIdxLabels));
  }
  const std::size_t n = read_be32(image_bytes, 4, image_source);
  const std::size_t rows = read_be32(image_bytes, 8, image_source);
  const std::size_t cols = read_be32(image_bytes, 12, image_source);
  const std::size_t n_labels = read_be32(label_bytes, 4, label_source);
  if (n != n_labels) {
    throw DataError(fmt::format("{} holds {} images but {} holds {} labels", image_source, n,
                                label_source, n_labels));
  }
  if (image_bytes.size() != 16 + n * rows * cols) {
    throw DataError(fmt::format("{}: expected {} bytes, found {} (payload from offset 16)",
                                image_source, 16 + n * rows * cols, image_bytes.size()));
  }
  if (label_bytes.size() != 8 + n) {
    throw DataError(fmt::format("{}: expected {} bytes, found {} (payload from offset 8)",
                                label_source, 8 + n, label_bytes.size()));
  }
  Dataset ds;
  ds.channels = 1;
  ds.height = rows;
  ds.width = cols;
  ds.num_classes = 10;
  ds.images.assign(image_bytes.begin() + 16, image_bytes.end());
  ds.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = label_bytes[8 + i];
    if (y >= 10) {
      throw DataError(
          fmt::format("{}: label {} at offset {} is not in 0..9", label_source, y, 8 + i));
    }
    ds.labels.push_back(y);
  }
  return ds;
}

std::vector<std::uint8_t> encode_mnist_images(const Dataset& ds) {
  std::vector<std::uint8_t> out;
  write_be32(out, kIdxImages);
  write_be32(out, static_cast<std::uint32_t>(ds.size()));
  write_be32(out, static_cast<std::uint32_t>(ds.height));
  write_be32(out, static_cast<std::uint32_t>(ds.width));
  out.insert(out.end(), ds.images.begin(), ds.images.end());
  return out;
}

std::vector<std::uint8_t> encode_mnist_labels(const Dataset& ds) {
  std::vector<std::uint8_t> out;
  write_be32(out, kIdxLabels);
  write_be32(out, static_cast<std::uint32_t>(ds.size()));
  for (auto y : ds.labels) out.push_back(static_cast<std::uint8_t>(y));
  return out;
}

Splits load_mnist(const std::filesystem::path& dir) {
  auto load = [&](const char* images, const char* labels, const char* split) {
    const auto ip = dir / images;
    const auto lp = dir / labels;
    Dataset ds = decode_mnist(read_file(ip), read_file(lp), ip.string(), lp.string());
    ds.split = split;
    return ds;
  };
  return {load("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "train"),
          load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", "test")};
}

Splits synthetic_dataset(const SyntheticOptions& o, std::uint64_t seed) {
  if (o.num_classes < 2 || o.channels == 0 || o.side < 4 || o.train_size == 0 ||
      o.test_size == 0) {
    throw DataError("synthetic_dataset: needs >= 2 classes, >= 1 channel, side >= 4, samples > 0");
  }
  // Each prototype is a 4x4 grid of random levels, bilinearly upsampled.
  Engine proto_eng(derive_seed(seed, "prototypes"));
  const std::size_t px = o.side * o.side;
  std::vector<double> prototypes(o.num_classes * o.channels * px);
  for (std::size_t c = 0; c < o.num_classes * o.channels; ++c) {
    double grid[4][4];
    for (auto& row : grid) {
      for (auto& v : row) v = uniform(proto_eng, 30.0, 225.0);
    }
    for (std::size_t y = 0; y < o.side; ++y) {
      for (std::size_t x = 0; x < o.side; ++x) {
        const double gy = 3.0 * static_cast<double>(y) / static_cast<double>(o.side - 1);
        const double gx = 3.0 * static_cast<double>(x) / static_cast<double>(o.side - 1);
        const auto y0 = std::min<std::size_t>(2, static_cast<std::size_t>(gy));
        const auto x0 = std::min<std::size_t>(2, static_cast<std::size_t>(gx));
        const double fy = gy - static_cast<double>(y0), fx = gx - static_cast<double>(x0);
        prototypes[c * px + y * o.side + x] =
            (1 - fy) * ((1 - fx) * grid[y0][x0] + fx * grid[y0][x0 + 1]) +
            fy * ((1 - fx) * grid[y0 + 1][x0] + fx * grid[y0 + 1][x0 + 1]);
      }
    }
  }

  auto make = [&](std::size_t n, const char* split) {
    Engine eng(derive_seed(seed, split));
    Dataset ds;
    ds.channels = o.channels;
    ds.height = ds.width = o.side;
    ds.num_classes = o.num_classes;
    ds.split = split;
    ds.images.resize(n * ds.image_size());
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto y = static_cast<std::size_t>(i % o.num_classes);
      ds.labels[i] = static_cast<std::int32_t>(y);
      const auto sy = static_cast<long>(uniform_index(eng, 3)) - 1;
      const auto sx = static_cast<long>(uniform_index(eng, 3)) - 1;
      for (std::size_t c = 0; c < o.channels; ++c) {
        for (std::size_t r = 0; r < o.side; ++r) {
          for (std::size_t x = 0; x < o.side; ++x) {
            const auto rr = static_cast<std::size_t>(
                std::clamp<long>(static_cast<long>(r) + sy, 0, static_cast<long>(o.side) - 1));
            const auto xx = static_cast<std::size_t>(
                std::clamp<long>(static_cast<long>(x) + sx, 0, static_cast<long>(o.side) - 1));
            const double v = prototypes[(y * o.channels + c) * px + rr * o.side + xx] +
                             uniform(eng, -o.noise, o.noise);
            ds.images[i * ds.image_size() + c * px + r * o.side + x] =
                static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
          }
        }
      }
    }
    return ds;
  };
  return {make(o.train_size, "train"), make(o.test_size, "test")};
}

}  // namespace dcm::data
