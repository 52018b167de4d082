#include "dcm/exp/compare.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>

#include "dcm/common/error.hpp"
#include "dcm/exp/config.hpp"
#include "dcm/exp/runner.hpp"

namespace dcm::exp {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

double parse_double(const std::string& text, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size()) {
    throw DataError(fmt::format("{}: not a number '{}'", where, text));
  }
  return v;
}

std::uint64_t parse_uint(const std::string& text, const std::string& where) {
  if (text.empty() || !std::all_of(text.begin(), text.end(), ::isdigit)) {
    throw DataError(fmt::format("{}: not an unsigned integer '{}'", where, text));
  }
  return std::stoull(text);
}

void finalize(RunTable& run) {
  for (std::size_t i = 0; i < 2; ++i) {
    const auto [mean, std] = mean_std(run.final_top1[i]);
    run.mean[i] = 100.0 * mean;
    run.std[i] = 100.0 * std;
  }
}

}  // namespace

RunSource parse_run_source(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) return {text, ""};
  return {text.substr(eq + 1), text.substr(0, eq)};
}

RunTable load_run(const RunSource& source) {
  const fs::path& dir = source.dir;
  if (!fs::exists(dir / "config.json")) {
    throw DataError(fmt::format("{}: not a run directory (no config.json)", dir.string()));
  }
  ExperimentConfig config;
  try {
    config = load_config((dir / "config.json").string());
  } catch (const ConfigError& e) {
    throw DataError(fmt::format("{}: unreadable run config: {}", dir.string(), e.what()));
  }
  RunTable run;
  run.label = source.label.empty() ? dir.filename().string() : source.label;
  if (run.label.empty()) run.label = dir.parent_path().filename().string();
  run.mode = std::string(distill::to_string(config.mode));
  run.epochs = config.schedule.epochs;
  const std::string hash = config_hash(config);
  run.config_hashes.push_back(hash);

  static const std::regex name_pattern(R"(seed_(\d+)\.csv)");
  std::vector<std::pair<std::uint64_t, fs::path>> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, name_pattern)) files.emplace_back(std::stoull(m[1]), entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError(fmt::format("{}: no seed_<s>.csv files", dir.string()));

  for (const auto& [seed, path] : files) {
    const std::string source_name = path.string();
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    const MetricsHeader header = parse_header_line(line, source_name);
    if (std::find(run.config_hashes.begin(), run.config_hashes.end(), header.config_hash) ==
        run.config_hashes.end()) {
      run.config_hashes.push_back(header.config_hash);
    }
    if (run.data_hash.empty()) {
      run.data_hash = header.data_hash;
    } else if (run.data_hash != header.data_hash) {
      throw DataError(fmt::format("{}: data_hash {} differs from {} in the same run", source_name,
                                  header.data_hash, run.data_hash));
    }
    std::getline(in, line);
    const auto columns = split(line, ',');
    if (columns.size() != 10 || columns[0] != "seed" || columns[9] != "test_top1") {
      throw DataError(fmt::format("{}: unexpected column header '{}'", source_name, line));
    }
    double final_top1[2] = {std::nan(""), std::nan("")};
    std::size_t last_epoch = 0;
    std::size_t line_no = 2;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const std::string where = fmt::format("{}:{}", source_name, line_no);
      const auto cells = split(line, ',');
      if (cells.size() != 10) throw DataError(fmt::format("{}: expected 10 cells", where));
      const auto epoch = parse_uint(cells[1], where);
      const auto net = parse_uint(cells[3], where);
      if (net < 1 || net > 2) throw DataError(fmt::format("{}: net must be 1 or 2", where));
      last_epoch = std::max<std::size_t>(last_epoch, epoch);
      if (epoch == run.epochs) final_top1[net - 1] = parse_double(cells[9], where);
    }
    if (last_epoch != run.epochs || std::isnan(final_top1[0]) || std::isnan(final_top1[1])) {
      throw DataError(fmt::format("{}: incomplete run (last epoch {} of {})", source_name,
                                  last_epoch, run.epochs));
    }
    run.seeds.push_back(seed);
    for (std::size_t i = 0; i < 2; ++i) run.final_top1[i].push_back(final_top1[i]);
  }
  finalize(run);
  return run;
}

Comparison compare_runs(const std::vector<RunSource>& sources, const CompareOptions& options) {
  if (sources.empty()) throw DataError("compare: no run directories given");
  Comparison out;
  for (const auto& source : sources) {
    RunTable run = load_run(source);
    auto taken = [&](const std::string& label) {
      return std::any_of(out.runs.begin(), out.runs.end(),
                         [&](const RunTable& r) { return r.label == label; });
    };
    // Only explicitly labelled runs are merged.
    if (source.label.empty() && taken(run.label)) {
      const std::string stem = run.label;
      for (std::size_t n = 2; taken(run.label); ++n) run.label = fmt::format("{}#{}", stem, n);
    }
    auto it = std::find_if(out.runs.begin(), out.runs.end(),
                           [&](const RunTable& r) { return r.label == run.label; });
    if (it == out.runs.end()) {
      out.runs.push_back(std::move(run));
      continue;
    }
    if (it->data_hash != run.data_hash || it->epochs != run.epochs) {
      throw DataError(fmt::format("compare: runs labelled '{}' use different data or epochs",
                                  run.label));
    }
    for (std::size_t k = 0; k < run.seeds.size(); ++k) {
      if (std::find(it->seeds.begin(), it->seeds.end(), run.seeds[k]) != it->seeds.end()) {
        throw DataError(fmt::format("compare: seed {} appears twice under '{}'", run.seeds[k],
                                    run.label));
      }
      it->seeds.push_back(run.seeds[k]);
      for (std::size_t i = 0; i < 2; ++i) it->final_top1[i].push_back(run.final_top1[i][k]);
    }
    for (const auto& h : run.config_hashes) {
      if (std::find(it->config_hashes.begin(), it->config_hashes.end(), h) ==
          it->config_hashes.end()) {
        it->config_hashes.push_back(h);
      }
    }
    finalize(*it);
  }
  for (const auto& run : out.runs) {
    if (run.config_hashes.size() > 1 && !options.force) {
      throw DataError(fmt::format(
          "compare: '{}' mixes config hashes {}; pass --force to aggregate anyway", run.label,
          fmt::join(run.config_hashes, ", ")));
    }
    if (run.data_hash != out.runs.front().data_hash) {
      throw DataError(fmt::format("compare: '{}' was trained on different data ({} vs {})",
                                  run.label, run.data_hash, out.runs.front().data_hash));
    }
    if (run.epochs != out.runs.front().epochs) {
      throw DataError(fmt::format("compare: '{}' ran {} epochs, '{}' ran {}", run.label,
                                  run.epochs, out.runs.front().label, out.runs.front().epochs));
    }
  }
  if (!options.baseline.empty()) {
    auto it = std::find_if(out.runs.begin(), out.runs.end(),
                           [&](const RunTable& r) { return r.label == options.baseline; });
    if (it == out.runs.end()) {
      throw DataError(fmt::format("compare: baseline '{}' is not among the runs", options.baseline));
    }
    out.baseline = static_cast<std::size_t>(it - out.runs.begin());
  }
  return out;
}

double Comparison::margin_of(std::size_t run, std::size_t net) const {
  return runs.at(baseline).mean[net] - runs.at(run).mean[net];
}

std::string Comparison::text() const {
  const auto& base = runs.at(baseline);
  std::string out = fmt::format("test error (%), mean(std) over seeds; data_hash {}, {} epochs\n",
                                base.data_hash, base.epochs);
  out += fmt::format("margin(X) = mean({}) - mean(X)\n\n", base.label);
  std::vector<std::string> headers{""};
  for (const auto& r : runs) headers.push_back(r.label);
  for (std::size_t r = 0; r < runs.size(); ++r) {
    if (r != baseline) headers.push_back(fmt::format("margin({})", runs[r].label));
  }
  std::vector<std::vector<std::string>> rows{headers};
  for (std::size_t net = 0; net < 2; ++net) {
    std::vector<std::string> row{fmt::format("Net{}", net + 1)};
    for (const auto& r : runs) row.push_back(fmt::format("{:.2f}({:.2f})", r.mean[net], r.std[net]));
    for (std::size_t r = 0; r < runs.size(); ++r) {
      if (r != baseline) row.push_back(fmt::format("{:+.2f}", margin_of(r, net)));
    }
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> width(headers.size(), 0);
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  for (const auto& row : rows) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) {
      line += fmt::format("{:<{}}", row[c], width[c] + 2);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
  }
  out += "\n";
  for (const auto& r : runs) {
    out += fmt::format("{}: mode {}, seeds [{}], config_hash {}\n", r.label, r.mode,
                       fmt::join(r.seeds, ","), fmt::join(r.config_hashes, "+"));
  }
  return out;
}

std::string Comparison::csv() const {
  const auto& base = runs.at(baseline);
  std::string out = fmt::format("# data_hash={} epochs={} baseline={}\n", base.data_hash,
                                base.epochs, base.label);
  out += "label,mode,config_hash,seeds,net,mean_test_top1_pct,std_test_top1_pct,margin_pct\n";
  for (std::size_t r = 0; r < runs.size(); ++r) {
    for (std::size_t net = 0; net < 2; ++net) {
      out += fmt::format("{},{},{},{},{},{},{},{}\n", runs[r].label, runs[r].mode,
                         fmt::join(runs[r].config_hashes, "+"), runs[r].seeds.size(), net + 1,
                         runs[r].mean[net], runs[r].std[net], margin_of(r, net));
    }
  }
  return out;
}

}  // namespace dcm::exp
