#pragma once

// Parameter manifest: named tensors of a trained backbone.
//
// On disk:
//   dcm-manifest 1
//   meta <key> <value>                         (zero or more)
//   entries <n>
//   <param|buffer> <name> <ndim> <dims...>     (one line per entry)
//   end
// followed by the values of every entry, in order, as little-endian float32.

#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dcm/autograd/shape.hpp"

namespace dcm::net {

struct ManifestEntry {
  std::string name;
  ag::Shape shape;
  bool trainable = true;  // false for batch-norm running statistics
  std::vector<double> values;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  /// Free-form provenance (single-token keys, values without newlines).
  std::vector<std::pair<std::string, std::string>> meta;

  /// Number of trainable scalars.
  std::size_t parameter_count() const;
  const ManifestEntry* find(const std::string& name) const;
};

void write_manifest(const Manifest& m, const std::filesystem::path& path);
/// Throws DataError naming the file and the failing position.
Manifest read_manifest(const std::filesystem::path& path);

}  // namespace dcm::net
