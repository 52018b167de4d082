#pragma once

// Multi-seed experiment runner. Layout of an output directory:
//   config.json               resolved configuration plus its hash
//   subset.txt, corruption.txt  data plans (when used)
//   seed_<s>.csv              per-epoch metrics, rewritten after every epoch
//   seed_<s>_net<i>.manifest  exported backbones after the last epoch
//   seed_<s>_teacher.csv/.manifest  kd teacher pre-training (kd only)
//   checkpoints/seed_<s>.ckpt latest checkpoint
//   summary.csv               mean and population std of final test error
//   FAILED                    present when the run stopped on an error
// Text outputs start with "# config_hash=<h> data_hash=<h>".

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dcm/data/dataset.hpp"
#include "dcm/data/pipeline.hpp"
#include "dcm/exp/config.hpp"
#include "dcm/train/trainer.hpp"

namespace dcm::exp {

struct PreparedData {
  data::Splits splits;
  std::vector<std::size_t> subset;  // indices into the full training split; empty = all
  std::optional<data::CorruptionPlan> corruption;
  std::string data_hash;
};

/// Loads the dataset and applies the subset and corruption plans.
PreparedData prepare_data(const DatasetConfig& config);

struct RunOptions {
  bool resume = false;   // continue from checkpoints in the output directory
  /// Stop every seed once this many epochs are done (0 = run to the end).
  std::size_t stop_after = 0;
  std::ostream* log = nullptr;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::size_t epochs_done = 0;
  double final_top1[2] = {0, 0};
};

struct RunResult {
  std::string config_hash;
  std::string data_hash;
  std::vector<SeedResult> seeds;
  bool complete = false;  // every seed reached the last epoch
};

/// Runs every seed of `config` into config.out. On an error the FAILED
/// marker is written, finished files are kept and the error is rethrown.
RunResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

struct MetricsHeader {
  std::string config_hash;
  std::string data_hash;
};

/// "# config_hash=<h> data_hash=<h>"
std::string header_line(const MetricsHeader& header);
/// Throws DataError when `line` is not a header line.
MetricsHeader parse_header_line(const std::string& line, const std::string& source);

/// Per-seed metrics file contents; epochs are written 1-based.
std::string metrics_csv(std::uint64_t seed, const std::vector<train::EpochMetrics>& history,
                        const MetricsHeader& header);

/// Mean and population standard deviation.
std::pair<double, double> mean_std(const std::vector<double>& values);

/// Writes through a temporary file and a rename.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

/// Backbone manifest of one network from a run directory's checkpoint.
net::Manifest export_from_run(const std::filesystem::path& run_dir, std::uint64_t seed,
                              std::size_t net_index);

}  // namespace dcm::exp
