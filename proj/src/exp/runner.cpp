#include "dcm/exp/runner.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include "dcm/common/error.hpp"
#include "dcm/common/random.hpp"
#include "dcm/net/manifest.hpp"
#include "dcm/net/network.hpp"
#include "dcm/train/checkpoint.hpp"

namespace dcm::exp {

namespace fs = std::filesystem;

namespace {

constexpr const char* kCsvColumns =
    "seed,epoch,lr,net,loss_total,loss_c,loss_ds,loss_dcm1,loss_dcm2,test_top1";

train::TrainConfig train_config(const ExperimentConfig& c, std::uint64_t seed) {
  train::TrainConfig t;
  t.mode = c.mode;
  t.weights = c.weights;
  t.objective = c.objective;
  t.schedule = c.schedule;
  t.sgd = c.optimizer;
  t.batch_size = c.batch_size;
  t.augment = c.augment;
  t.seed = seed;
  return t;
}

template <typename T>
net::SupervisedNet<T> build_net(const ExperimentConfig& c, std::size_t i, std::uint64_t seed) {
  const std::uint64_t s = derive_seed(seed, i);
  auto net = net::build_backbone<T>(c.backbone(i), s);
  if (!c.nets[i].locations.empty()) {
    net = net::attach_heads(std::move(net), c.nets[i].locations, c.nets[i].head_style, s);
  }
  return net;
}

template <typename T>
train::TrainState<T> fresh_state(const ExperimentConfig& c, std::uint64_t seed) {
  return train::initial_state(build_net<T>(c, 0, seed), build_net<T>(c, 1, seed),
                              train_config(c, seed));
}

fs::path seed_file(const fs::path& dir, std::uint64_t seed, std::string_view suffix) {
  return dir / fmt::format("seed_{}{}", seed, suffix);
}

fs::path checkpoint_path(const fs::path& dir, std::uint64_t seed) {
  return dir / "checkpoints" / fmt::format("seed_{}.ckpt", seed);
}

void stamp(net::Manifest& m, const MetricsHeader& header, std::uint64_t seed,
           std::string_view role) {
  m.meta = {{"config_hash", header.config_hash},
            {"data_hash", header.data_hash},
            {"seed", std::to_string(seed)},
            {"role", std::string(role)}};
}

void log_line(const RunOptions& options, const std::string& text) {
  if (options.log) *options.log << text << std::endl;
}

std::string epoch_log(std::uint64_t seed, const train::EpochMetrics& row, std::size_t epochs) {
  return fmt::format("seed {} epoch {}/{} lr {} | net1 loss {:.4f} err {:.4f} | net2 loss {:.4f} "
                     "err {:.4f}",
                     seed, row.epoch + 1, epochs, row.lr, row.nets[0].loss_total,
                     row.nets[0].test_top1, row.nets[1].loss_total, row.nets[1].test_top1);
}

// Baseline pre-training of the kd teacher (network 0); returns its backbone.
template <typename T>
net::Manifest pretrain_teacher(const ExperimentConfig& c, const PreparedData& data,
                               std::uint64_t seed, const MetricsHeader& header,
                               const RunOptions& options) {
  const fs::path dir = c.out;
  const fs::path manifest_path = seed_file(dir, seed, "_teacher.manifest");
  if (options.resume && fs::exists(manifest_path)) return net::read_manifest(manifest_path);

  train::TrainConfig tc = train_config(c, derive_seed(seed, "teacher"));
  tc.mode = distill::Mode::Baseline;
  const auto teacher = build_net<T>(c, 0, seed);
  train::JointTrainer<T> trainer(train::initial_state(teacher.clone(), teacher.clone(), tc),
                                 data.splits.train, data.splits.test, tc);
  trainer.run([&](const train::EpochMetrics& row, const train::TrainState<T>& state) {
    log_line(options, "teacher " + epoch_log(seed, row, c.schedule.epochs));
    write_text_atomic(seed_file(dir, seed, "_teacher.csv"),
                      metrics_csv(seed, state.history, header));
  });
  auto manifest = trainer.state().nets[0].export_backbone();
  stamp(manifest, header, seed, "teacher");
  net::write_manifest(manifest, manifest_path);
  // Reload so fresh and resumed runs start from the same stored values.
  return net::read_manifest(manifest_path);
}

template <typename T>
SeedResult run_seed(const ExperimentConfig& c, const PreparedData& data, std::uint64_t seed,
                    const MetricsHeader& header, const RunOptions& options) {
  const fs::path dir = c.out;
  const train::TrainConfig tc = train_config(c, seed);
  auto state = fresh_state<T>(c, seed);
  if (c.mode == distill::Mode::KD) {
    const auto manifest = c.teacher_manifest.empty()
                              ? pretrain_teacher<T>(c, data, seed, header, options)
                              : net::read_manifest(c.teacher_manifest);
    state.nets[0].import_backbone(manifest);
  }
  const fs::path ckpt = checkpoint_path(dir, seed);
  if (options.resume && fs::exists(ckpt)) {
    state = train::checkpoint_load(ckpt, state);
    log_line(options, fmt::format("seed {}: resuming after epoch {}", seed, state.epoch));
  }

  train::JointTrainer<T> trainer(std::move(state), data.splits.train, data.splits.test, tc);
  const std::size_t epochs = c.schedule.epochs;
  const std::size_t limit = options.stop_after == 0 ? epochs : std::min(epochs, options.stop_after);
  while (trainer.state().epoch < limit) {
    const auto row = trainer.run_epoch();
    train::checkpoint_save(trainer.state(), ckpt);
    write_text_atomic(seed_file(dir, seed, ".csv"),
                      metrics_csv(seed, trainer.state().history, header));
    log_line(options, epoch_log(seed, row, epochs));
  }
  const auto& final_state = trainer.state();
  write_text_atomic(seed_file(dir, seed, ".csv"), metrics_csv(seed, final_state.history, header));

  SeedResult result;
  result.seed = seed;
  result.epochs_done = final_state.epoch;
  if (!final_state.history.empty()) {
    for (std::size_t i = 0; i < 2; ++i) {
      result.final_top1[i] = final_state.history.back().nets[i].test_top1;
    }
  }
  if (final_state.epoch == epochs) {
    for (std::size_t i = 0; i < 2; ++i) {
      auto manifest = final_state.nets[i].export_backbone();
      stamp(manifest, header, seed, fmt::format("net{}", i + 1));
      net::write_manifest(manifest, seed_file(dir, seed, fmt::format("_net{}.manifest", i + 1)));
    }
  }
  return result;
}

void remove_outputs(const fs::path& dir) {
  static const std::regex pattern(
      R"(seed_\d+(_net\d+\.manifest|_teacher\.(csv|manifest)|\.csv)|summary\.csv|FAILED|subset\.txt|corruption\.txt)");
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && std::regex_match(entry.path().filename().string(), pattern)) {
      fs::remove(entry.path());
    }
  }
  fs::remove_all(dir / "checkpoints");
}

std::string summary_csv(const ExperimentConfig& c, const std::vector<SeedResult>& seeds,
                        const MetricsHeader& header) {
  std::string out = header_line(header) + "\n";
  out += "net,seeds,epochs,mean_test_top1,std_test_top1\n";
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> values;
    for (const auto& s : seeds) values.push_back(s.final_top1[i]);
    const auto [mean, std] = mean_std(values);
    out += fmt::format("{},{},{},{},{}\n", i + 1, seeds.size(), c.schedule.epochs, mean, std);
  }
  return out;
}

}  // namespace

PreparedData prepare_data(const DatasetConfig& config) {
  PreparedData out;
  if (config.kind == "cifar10") {
    out.splits = data::load_cifar10(config.path);
  } else if (config.kind == "mnist") {
    out.splits = data::load_mnist(config.path);
  } else if (config.kind == "synthetic") {
    data::SyntheticOptions options;
    options.train_size = config.train_size;
    options.test_size = config.test_size;
    options.num_classes = config.num_classes;
    options.channels = config.channels;
    options.side = config.side;
    out.splits = data::synthetic_dataset(options, config.synthetic_seed);
  } else {
    throw ConfigError({fmt::format("dataset.kind: unknown kind '{}'", config.kind)});
  }
  auto& train = out.splits.train;
  if (config.subset > 0 && config.subset < train.size()) {
    out.subset = data::stratified_subset(train, config.subset, config.subset_seed);
    train = data::select(train, out.subset);
  }
  if (config.corrupt_ratio > 0.0) {
    auto [corrupted, plan] = data::corrupt_labels(train, config.corrupt_ratio, config.corrupt_seed);
    train = std::move(corrupted);
    out.corruption = std::move(plan);
  }
  out.data_hash = fmt::format("{:016x}", derive_seed(data::fingerprint(train),
                                                     data::fingerprint(out.splits.test)));
  return out;
}

std::string header_line(const MetricsHeader& header) {
  return fmt::format("# config_hash={} data_hash={}", header.config_hash, header.data_hash);
}

MetricsHeader parse_header_line(const std::string& line, const std::string& source) {
  static const std::regex pattern(R"(# config_hash=([0-9a-f]+) data_hash=([0-9a-f]+))");
  std::smatch m;
  if (!std::regex_match(line, m, pattern)) {
    throw DataError(fmt::format("{}: missing '# config_hash=... data_hash=...' header", source));
  }
  return {m[1].str(), m[2].str()};
}

std::string metrics_csv(std::uint64_t seed, const std::vector<train::EpochMetrics>& history,
                        const MetricsHeader& header) {
  std::string out = header_line(header) + "\n" + kCsvColumns + "\n";
  for (const auto& row : history) {
    for (std::size_t i = 0; i < 2; ++i) {
      const auto& n = row.nets[i];
      out += fmt::format("{},{},{},{},{},{},{},{},{},{}\n", seed, row.epoch + 1, row.lr, i + 1,
                         n.loss_total, n.loss_c, n.loss_ds, n.loss_dcm1, n.loss_dcm2, n.test_top1);
    }
  }
  return out;
}

std::pair<double, double> mean_std(const std::vector<double>& values) {
  if (values.empty()) return {std::nan(""), std::nan("")};
  double sum = 0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  double sq = 0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return {mean, std::sqrt(sq / static_cast<double>(values.size()))};
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(fmt::format("{}: cannot open for writing", tmp.string()));
    out << text;
    if (!out.flush()) throw DataError(fmt::format("{}: write failed", tmp.string()));
  }
  fs::rename(tmp, path);
}

RunResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  const fs::path dir = config.out;
  fs::create_directories(dir / "checkpoints");
  const std::string hash = config_hash(config);
  const fs::path config_path = dir / "config.json";
  if (options.resume && fs::exists(config_path)) {
    const auto previous = config_hash(load_config(config_path.string()));
    if (previous != hash) {
      throw ConfigError({fmt::format("{}: existing run has config_hash {}, this config has {}",
                                     config_path.string(), previous, hash)});
    }
  }
  if (!options.resume) {
    remove_outputs(dir);
    fs::create_directories(dir / "checkpoints");
  }
  auto resolved = to_json(config);
  resolved["config_hash"] = hash;
  write_text_atomic(config_path, resolved.dump(2) + "\n");

  RunResult result;
  result.config_hash = hash;
  std::uint64_t current_seed = 0;
  try {
    const PreparedData data = prepare_data(config.dataset);
    result.data_hash = data.data_hash;
    const MetricsHeader header{hash, data.data_hash};
    log_line(options, fmt::format("config_hash {} data_hash {} train {} test {}", hash,
                                  data.data_hash, data.splits.train.size(),
                                  data.splits.test.size()));
    if (!data.subset.empty()) {
      std::string text = header_line(header) + "\n";
      for (auto i : data.subset) text += fmt::format("{}\n", i);
      write_text_atomic(dir / "subset.txt", text);
    }
    if (data.corruption) {
      write_text_atomic(dir / "corruption.txt",
                        header_line(header) + "\n" + data.corruption->to_text());
    }
    for (std::uint64_t seed : config.seeds) {
      current_seed = seed;
      result.seeds.push_back(config.precision == "f64"
                                 ? run_seed<double>(config, data, seed, header, options)
                                 : run_seed<float>(config, data, seed, header, options));
    }
    result.complete = true;
    for (const auto& s : result.seeds) {
      if (s.epochs_done != config.schedule.epochs) result.complete = false;
    }
    if (result.complete) {
      write_text_atomic(dir / "summary.csv", summary_csv(config, result.seeds, header));
    }
    fs::remove(dir / "FAILED");
  } catch (const std::exception& e) {
    std::ofstream marker(dir / "FAILED");
    marker << "# config_hash=" << hash << "\n"
           << "seed " << current_seed << ": " << e.what() << "\n";
    throw;
  }
  return result;
}

net::Manifest export_from_run(const fs::path& run_dir, std::uint64_t seed, std::size_t net_index) {
  if (net_index >= 2) throw ConfigError({fmt::format("net: expected 1 or 2, got {}", net_index + 1)});
  const auto config = load_config((run_dir / "config.json").string());
  const fs::path ckpt = checkpoint_path(run_dir, seed);
  if (!fs::exists(ckpt)) throw DataError(fmt::format("{}: no checkpoint", ckpt.string()));
  auto load = [&](auto tag) {
    using T = decltype(tag);
    const auto state = train::checkpoint_load(ckpt, fresh_state<T>(config, seed));
    auto m = state.nets[net_index].export_backbone();
    m.meta = {{"config_hash", config_hash(config)},
              {"seed", std::to_string(seed)},
              {"role", fmt::format("net{}", net_index + 1)},
              {"epoch", std::to_string(state.epoch)}};
    return m;
  };
  return config.precision == "f64" ? load(double{}) : load(float{});
}

}  // namespace dcm::exp
