// dcm: experiment front end.
//
//   dcm run      --config cfg.json [--seeds 1,2,3] [--out dir] [--mode-override dcm]
//                [--subset N] [--corrupt-ratio r] [--resume] [--stop-after E]
//   dcm validate --config cfg.json [overrides]
//   dcm compare  [label=]run_dir... [--baseline label] [--force] [--out prefix]
//   dcm export   --run dir --seed s --net 1|2 --out file.manifest
//   dcm ablate   --config cfg.json [--groups loss,noise] [--dry-run] [overrides]
//
// Exit codes: 0 success, 1 configuration error, 2 runtime failure.

#include <CLI11.hpp>
#include <fmt/format.h>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dcm/common/error.hpp"
#include "dcm/exp/ablation.hpp"
#include "dcm/exp/compare.hpp"
#include "dcm/exp/config.hpp"
#include "dcm/exp/runner.hpp"
#include "dcm/net/manifest.hpp"

namespace {

constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

struct Overrides {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::string mode;
  std::optional<std::size_t> subset;
  std::optional<double> corrupt_ratio;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config, "experiment config (JSON)")->required();
    cmd->add_option("--seeds", seeds, "comma-separated seeds")->delimiter(',');
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--mode-override", mode,
                    "baseline, ds, kd, dml, dml+ds, dcm-1, dcm-2 or dcm");
    cmd->add_option("--subset", subset, "stratified training subset size (0 = full)");
    cmd->add_option("--corrupt-ratio", corrupt_ratio, "fraction of corrupted training labels");
  }

  dcm::exp::ExperimentConfig load() const {
    auto c = dcm::exp::load_config(config);
    if (!mode.empty()) {
      try {
        c = dcm::exp::with_mode(std::move(c), dcm::distill::parse_mode(mode));
      } catch (const dcm::ConfigError&) {
        throw;
      } catch (const dcm::Error& e) {
        throw dcm::ConfigError({fmt::format("--mode-override: {}", e.what())});
      }
    }
    if (!seeds.empty()) c.seeds = seeds;
    if (!out.empty()) c.out = out;
    if (subset) c.dataset.subset = *subset;
    if (corrupt_ratio) c.dataset.corrupt_ratio = *corrupt_ratio;
    auto problems = dcm::exp::validate(c);
    if (!problems.empty()) throw dcm::ConfigError(std::move(problems));
    return c;
  }
};

void print_config_error(const dcm::ConfigError& e) {
  std::cerr << "configuration error:\n";
  for (const auto& p : e.problems()) std::cerr << "  " << p << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense cross-layer mutual distillation experiments"};
  app.require_subcommand(1);

  Overrides run_args;
  bool resume = false;
  std::size_t stop_after = 0;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "train every seed of an experiment");
  run_args.add_to(run);
  run->add_flag("--resume", resume, "continue from checkpoints in the output directory");
  run->add_option("--stop-after", stop_after, "stop each seed after this many epochs");
  run->add_flag("--quiet", quiet, "no per-epoch log");

  Overrides validate_args;
  auto* validate = app.add_subcommand("validate", "check a config and print it resolved");
  validate_args.add_to(validate);

  std::vector<std::string> runs;
  std::string baseline;
  bool force = false;
  std::string compare_out;
  auto* compare = app.add_subcommand("compare", "tabulate runs side by side");
  compare->add_option("runs", runs, "run directories, optionally as label=dir")->required();
  compare->add_option("--baseline", baseline, "label of the margin reference (default: first)");
  compare->add_flag("--force", force, "aggregate runs with different config hashes");
  compare->add_option("--out", compare_out, "write <prefix>.txt and <prefix>.csv");

  std::string export_run;
  std::uint64_t export_seed = 1;
  std::size_t export_net = 1;
  std::string export_out;
  auto* exporter = app.add_subcommand("export", "write a backbone manifest from a checkpoint");
  exporter->add_option("--run", export_run, "run directory")->required();
  exporter->add_option("--seed", export_seed, "seed")->required();
  exporter->add_option("--net", export_net, "network (1 or 2)")->check(CLI::Range(1, 2));
  exporter->add_option("--out", export_out, "manifest path")->required();

  Overrides ablate_args;
  std::vector<std::string> groups;
  bool dry_run = false;
  auto* ablate = app.add_subcommand("ablate", "run the ablation matrix of a base config");
  ablate_args.add_to(ablate);
  ablate->add_option("--groups", groups, "subset of groups")->delimiter(',');
  ablate->add_flag("--dry-run", dry_run, "write the variant configs only");
  ablate->add_option("--stop-after", stop_after, "stop each seed after this many epochs");
  ablate->add_flag("--quiet", quiet, "no per-epoch log");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  try {
    if (*run) {
      const auto config = run_args.load();
      dcm::exp::RunOptions options;
      options.resume = resume;
      options.stop_after = stop_after;
      options.log = quiet ? nullptr : &std::cerr;
      const auto result = dcm::exp::run_experiment(config, options);
      std::cout << fmt::format("{}: config_hash {} data_hash {}{}\n", config.out,
                               result.config_hash, result.data_hash,
                               result.complete ? "" : " (incomplete)");
      for (const auto& s : result.seeds) {
        std::cout << fmt::format("seed {}: {} epochs, final test error net1 {:.4f} net2 {:.4f}\n",
                                 s.seed, s.epochs_done, s.final_top1[0], s.final_top1[1]);
      }
    } else if (*validate) {
      const auto config = validate_args.load();
      auto j = dcm::exp::to_json(config);
      j["config_hash"] = dcm::exp::config_hash(config);
      std::cout << j.dump(2) << "\n";
    } else if (*compare) {
      std::vector<dcm::exp::RunSource> sources;
      for (const auto& r : runs) sources.push_back(dcm::exp::parse_run_source(r));
      const auto table = dcm::exp::compare_runs(sources, {.baseline = baseline, .force = force});
      std::cout << table.text();
      if (!compare_out.empty()) {
        dcm::exp::write_text_atomic(compare_out + ".txt", table.text());
        dcm::exp::write_text_atomic(compare_out + ".csv", table.csv());
      }
    } else if (*exporter) {
      const auto manifest = dcm::exp::export_from_run(export_run, export_seed, export_net - 1);
      dcm::net::write_manifest(manifest, export_out);
      std::cout << fmt::format("{}: {} parameters\n", export_out, manifest.parameter_count());
    } else if (*ablate) {
      const auto config = ablate_args.load();
      dcm::exp::AblationOptions options;
      options.groups = groups;
      options.dry_run = dry_run;
      options.run.stop_after = stop_after;
      options.run.log = quiet ? nullptr : &std::cerr;
      if (dry_run) {
        for (const auto& v : dcm::exp::ablation_matrix(config, groups)) {
          std::cout << v.group << "/" << v.name << "\t" << v.config.out << "\n";
        }
      }
      const std::size_t failures = dcm::exp::run_ablation(config, options);
      if (failures > 0) {
        std::cerr << failures << " variant(s) failed\n";
        return kRuntimeError;
      }
    }
  } catch (const dcm::ConfigError& e) {
    print_config_error(e);
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}
