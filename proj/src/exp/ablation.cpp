#include "dcm/exp/ablation.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <filesystem>

#include "dcm/common/error.hpp"
#include "dcm/exp/compare.hpp"

namespace dcm::exp {

namespace fs = std::filesystem;

namespace {

using distill::Mode;

AblationVariant variant(const ExperimentConfig& base, std::string group, std::string name,
                        ExperimentConfig config) {
  config.out = (fs::path(base.out) / group / name).string();
  return {std::move(group), std::move(name), std::move(config)};
}

bool selected(const std::vector<std::string>& groups, const std::string& group) {
  if (groups.empty()) return true;
  return std::any_of(groups.begin(), groups.end(), [&](const std::string& g) {
    return g == group || (g == "noise" && group.rfind("noise", 0) == 0);
  });
}

}  // namespace

const std::vector<std::string>& ablation_groups() {
  static const std::vector<std::string> groups{"locations", "heads",    "loss",    "ds",
                                               "noise0.2",  "noise0.5", "noise0.8"};
  return groups;
}

std::vector<AblationVariant> ablation_matrix(const ExperimentConfig& base,
                                             const std::vector<std::string>& groups) {
  for (const auto& g : groups) {
    if (g != "noise" &&
        std::find(ablation_groups().begin(), ablation_groups().end(), g) == ablation_groups().end()) {
      throw ConfigError({fmt::format("ablation group '{}' unknown (expected one of {}, noise)", g,
                                     fmt::join(ablation_groups(), ", "))});
    }
  }
  std::vector<AblationVariant> out;
  auto mode_variant = [&](const std::string& group, Mode mode) {
    out.push_back(variant(base, group, std::string(distill::to_string(mode)), with_mode(base, mode)));
  };

  if (selected(groups, "locations")) {
    const auto points0 = net::attachment_points(base.backbone(0));
    const auto points1 = net::attachment_points(base.backbone(1));
    if (points0.size() != points1.size()) {
      throw ConfigError({"ablation locations: both backbones need the same number of attachment "
                         "points"});
    }
    mode_variant("locations", Mode::DML);
    const std::size_t n = points0.size();
    for (std::size_t mask = 1; mask < (std::size_t{1} << n); ++mask) {
      auto c = with_mode(base, Mode::DCM);
      c.nets[0].locations.clear();
      c.nets[1].locations.clear();
      for (std::size_t b = 0; b < n; ++b) {
        if (mask & (std::size_t{1} << b)) {
          c.nets[0].locations.push_back(points0[b]);
          c.nets[1].locations.push_back(points1[b]);
        }
      }
      out.push_back(variant(base, "locations",
                            fmt::format("q{}", fmt::join(c.nets[0].locations, "_")), c));
    }
  }
  if (selected(groups, "heads")) {
    for (auto style : {net::HeadStyle::Default, net::HeadStyle::Narrow, net::HeadStyle::Apfc}) {
      auto c = with_mode(base, Mode::DCM);
      for (auto& n : c.nets) n.head_style = style;
      out.push_back(variant(base, "heads", std::string(net::to_string(style)), c));
    }
  }
  if (selected(groups, "loss")) {
    for (auto mode : {Mode::DML, Mode::DCM1, Mode::DCM2, Mode::DCM}) mode_variant("loss", mode);
  }
  if (selected(groups, "ds")) {
    for (auto mode : {Mode::Baseline, Mode::DS, Mode::DML, Mode::DMLDS, Mode::DCM}) {
      mode_variant("ds", mode);
    }
  }
  for (double ratio : {0.2, 0.5, 0.8}) {
    const std::string group = fmt::format("noise{}", ratio);
    if (!selected(groups, group)) continue;
    for (auto mode : {Mode::Baseline, Mode::DCM}) {
      auto c = with_mode(base, mode);
      c.dataset.corrupt_ratio = ratio;
      out.push_back(variant(base, group, std::string(distill::to_string(mode)), c));
    }
  }
  for (const auto& v : out) {
    auto problems = validate(v.config);
    if (!problems.empty()) {
      for (auto& p : problems) p = fmt::format("{}/{}: {}", v.group, v.name, p);
      throw ConfigError(std::move(problems));
    }
  }
  return out;
}

std::size_t run_ablation(const ExperimentConfig& base, const AblationOptions& options) {
  const auto variants = ablation_matrix(base, options.groups);
  std::size_t failures = 0;
  std::vector<std::string> failed_groups;
  for (const auto& v : variants) {
    fs::create_directories(v.config.out);
    if (options.dry_run) {
      auto j = to_json(v.config);
      j["config_hash"] = config_hash(v.config);
      write_text_atomic(fs::path(v.config.out) / "config.json", j.dump(2) + "\n");
      continue;
    }
    if (options.run.log) *options.run.log << "== " << v.group << "/" << v.name << std::endl;
    try {
      run_experiment(v.config, options.run);
    } catch (const std::exception& e) {
      ++failures;
      failed_groups.push_back(v.group);
      if (options.run.log) {
        *options.run.log << v.group << "/" << v.name << " failed: " << e.what() << std::endl;
      }
    }
  }
  if (options.dry_run) return 0;

  std::vector<std::string> groups;
  for (const auto& v : variants) {
    if (std::find(groups.begin(), groups.end(), v.group) == groups.end()) groups.push_back(v.group);
  }
  for (const auto& group : groups) {
    if (std::find(failed_groups.begin(), failed_groups.end(), group) != failed_groups.end()) continue;
    std::vector<RunSource> sources;
    for (const auto& v : variants) {
      if (v.group == group) sources.push_back({v.config.out, v.name});
    }
    const auto table = compare_runs(sources);
    const fs::path dir = fs::path(base.out) / group;
    write_text_atomic(dir / "compare.txt", table.text());
    write_text_atomic(dir / "compare.csv", table.csv());
    if (options.run.log) *options.run.log << "== " << group << "\n" << table.text() << std::flush;
  }
  return failures;
}

}  // namespace dcm::exp
