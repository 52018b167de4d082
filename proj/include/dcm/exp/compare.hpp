#pragma once

// Side-by-side summary of run directories, computed from the per-seed CSVs.
//
// Errors are reported in percent. margin(X) = mean(baseline) - mean(X), so a
// positive margin means X has the lower test error.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dcm::exp {

struct RunSource {
  std::filesystem::path dir;
  std::string label;  // empty = directory name
};

/// "label=path" or "path".
RunSource parse_run_source(const std::string& text);

struct RunTable {
  std::string label;
  std::string mode;
  std::vector<std::string> config_hashes;  // distinct hashes merged under this label
  std::string data_hash;
  std::size_t epochs = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> final_top1[2];  // per seed, fractions
  double mean[2] = {0, 0};            // percent
  double std[2] = {0, 0};             // percent, population
};

/// Reads config.json and every seed_<s>.csv of one run directory. Every
/// seed must have reached the configured last epoch.
RunTable load_run(const RunSource& source);

struct CompareOptions {
  std::string baseline;  // label of the margin reference; empty = first run
  bool force = false;    // allow merging runs with different config hashes
};

struct Comparison {
  std::vector<RunTable> runs;
  std::size_t baseline = 0;

  std::string text() const;
  std::string csv() const;
  double margin_of(std::size_t run, std::size_t net) const;
};

/// Runs sharing a label are merged (their seeds pooled). Throws DataError on
/// mismatched datasets or epoch counts, and on mixed config hashes within a
/// label unless forced.
Comparison compare_runs(const std::vector<RunSource>& sources, const CompareOptions& options = {});

}  // namespace dcm::exp
