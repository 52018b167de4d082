#pragma once

// Experiment configuration (JSON). Omitted fields take the desk-scale
// defaults below; the resolved form written next to results lists every
// field explicitly.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcm/autograd/optim.hpp"
#include "dcm/distill/losses.hpp"
#include "dcm/net/spec.hpp"
#include "dcm/train/schedule.hpp"

namespace dcm::exp {

struct DatasetConfig {
  std::string kind = "cifar10";  // cifar10 | mnist | synthetic
  std::string path;              // directory for cifar10 / mnist
  std::size_t subset = 10000;    // stratified training subset; 0 = full split
  std::uint64_t subset_seed = 0;
  double corrupt_ratio = 0.0;
  std::uint64_t corrupt_seed = 0;
  // synthetic only
  std::size_t train_size = 512;
  std::size_t test_size = 256;
  std::size_t num_classes = 10;
  std::size_t side = 16;
  std::size_t channels = 3;
  std::uint64_t synthetic_seed = 0;
};

struct NetConfig {
  std::string backbone = "tinyres8";
  net::HeadStyle head_style = net::HeadStyle::Default;
  std::vector<std::size_t> locations;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::vector<NetConfig> nets;  // exactly two
  distill::Mode mode = distill::Mode::DCM;
  distill::LossWeights weights;
  distill::ObjectiveOptions objective;
  train::Schedule schedule;
  ag::SgdOptions optimizer;
  std::size_t batch_size = 128;
  bool augment = true;
  std::vector<std::uint64_t> seeds;
  std::string precision = "f32";  // f32 | f64
  std::string teacher_manifest;   // kd only; empty = pre-train the teacher
  std::string out = "runs/default";

  /// Input channels / classes implied by the dataset kind.
  std::size_t input_channels() const;
  std::size_t num_classes() const;
  net::BackboneSpec backbone(std::size_t net_index) const;
};

/// Parses and validates; throws ConfigError listing every problem with its
/// field path.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

/// Every field, defaults materialized.
nlohmann::json to_json(const ExperimentConfig& config);

/// Problems of an already-built config (parse_config runs this too).
std::vector<std::string> validate(const ExperimentConfig& config);

/// Hex FNV-1a of the resolved config without its output directory.
std::string config_hash(const ExperimentConfig& config);

/// Replaces the mode: auxiliary locations are dropped for modes without
/// auxiliary heads and filled with every boundary for modes that need them
/// when none were given; weights revert to the new mode's defaults.
ExperimentConfig with_mode(ExperimentConfig config, distill::Mode mode);

}  // namespace dcm::exp
