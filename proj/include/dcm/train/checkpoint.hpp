#pragma once

// Binary checkpoint, little-endian:
//   "DCMCKPT1" | u32 scalar bytes | u64 epoch | u64 iteration | u64 seed
//   two networks: u32 tensor count, then per tensor
//     u32 name length, name, u32 rank, u64 dims..., values
//   two optimizers: u32 buffer count, per buffer u64 length, values
//   u64 history rows, per row: u64 epoch, f64 lr, 2 x 7 f64 metrics
//   u64 FNV-1a checksum of all preceding bytes
// Values are stored at the training precision, so 64-bit runs resume exactly.

#include <filesystem>

#include "dcm/train/trainer.hpp"

namespace dcm::train {

/// Writes to a temporary file and renames it over `path`.
template <typename T>
void checkpoint_save(const TrainState<T>& state, const std::filesystem::path& path);

/// Reads a checkpoint into a deep copy of `like`, which fixes the expected
/// tensor names and shapes. Throws CheckpointError on any mismatch or
/// corruption; `like` is never modified.
template <typename T>
TrainState<T> checkpoint_load(const std::filesystem::path& path, const TrainState<T>& like);

}  // namespace dcm::train
