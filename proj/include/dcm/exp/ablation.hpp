#pragma once

// Ablation matrix derived from one base configuration. Groups:
//   locations  dml reference, then dcm with every non-empty subset of the
//              attachment points
//   heads      dcm with default, narrow and apfc heads
//   loss       dml, dcm-1, dcm-2, dcm
//   ds         baseline, ds, dml, dml+ds, dcm
//   noise0.2, noise0.5, noise0.8   baseline and dcm on corrupted labels
// The first variant of each group is the margin reference of its comparison.

#include <ostream>
#include <string>
#include <vector>

#include "dcm/exp/config.hpp"
#include "dcm/exp/runner.hpp"

namespace dcm::exp {

struct AblationVariant {
  std::string group;
  std::string name;
  ExperimentConfig config;  // out = <base out>/<group>/<name>
};

const std::vector<std::string>& ablation_groups();

/// `groups` selects by name; "noise" selects every noise group; empty = all.
std::vector<AblationVariant> ablation_matrix(const ExperimentConfig& base,
                                             const std::vector<std::string>& groups = {});

struct AblationOptions {
  std::vector<std::string> groups;
  bool dry_run = false;  // write the resolved configs only
  RunOptions run;
};

/// Runs every variant, then writes <group>/compare.txt and compare.csv.
/// Failed variants are reported and skipped; returns the number of failures.
std::size_t run_ablation(const ExperimentConfig& base, const AblationOptions& options);

}  // namespace dcm::exp
