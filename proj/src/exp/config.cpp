#include "dcm/exp/config.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>

#include "dcm/common/error.hpp"
#include "dcm/common/random.hpp"

namespace dcm::exp {

using nlohmann::json;

namespace {

using Problems = std::vector<std::string>;

struct WeightUse {
  bool alpha = false, beta = false, gamma = false, lambda = false;
};

WeightUse weight_use(distill::Mode mode, const distill::ObjectiveOptions& options) {
  using distill::Mode;
  switch (mode) {
    case Mode::Baseline: return {};
    case Mode::DS: return {.alpha = true};
    case Mode::KD:
    case Mode::DML: return {.lambda = true};
    case Mode::DMLDS: return {.alpha = true, .lambda = true};
    case Mode::DCM1: return {.alpha = true, .beta = true};
    case Mode::DCM2: return {.alpha = true, .beta = options.dcm2_keep_last_pair, .gamma = true};
    case Mode::DCM: return {.alpha = true, .beta = true, .gamma = true};
  }
  return {};
}

bool is_dcm(distill::Mode mode) {
  return mode == distill::Mode::DCM1 || mode == distill::Mode::DCM2 || mode == distill::Mode::DCM;
}

std::string field(const std::string& path, std::string_view key) {
  return path.empty() ? std::string(key) : fmt::format("{}.{}", path, key);
}

// Reports a non-object and any key outside `keys`.
bool expect_object(const json& j, const std::string& path, std::initializer_list<const char*> keys,
                   Problems& problems) {
  if (!j.is_object()) {
    problems.push_back(fmt::format("{}: expected an object", path.empty() ? "<root>" : path));
    return false;
  }
  for (const auto& [key, value] : j.items()) {
    const bool known = std::any_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; });
    if (!known) problems.push_back(fmt::format("{}: unknown field", field(path, key)));
  }
  return true;
}

bool is_non_negative_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

template <typename T>
bool convert(const json& v, T& out) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) return false;
  } else if constexpr (std::is_integral_v<T>) {
    if (!is_non_negative_integer(v)) return false;
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) return false;
  } else {
    if (!v.is_string()) return false;
  }
  out = v.get<T>();
  return true;
}

template <typename T>
const char* type_name() {
  if constexpr (std::is_same_v<T, bool>) return "a boolean";
  else if constexpr (std::is_integral_v<T>) return "a non-negative integer";
  else if constexpr (std::is_floating_point_v<T>) return "a number";
  else return "a string";
}

// Leaves `out` untouched when the key is absent. Returns whether it was present.
template <typename T>
bool read(const json& obj, const char* key, const std::string& path, T& out, Problems& problems) {
  auto it = obj.find(key);
  if (it == obj.end()) return false;
  if (!convert(*it, out)) {
    problems.push_back(fmt::format("{}: expected {}", field(path, key), type_name<T>()));
  }
  return true;
}

template <typename T>
bool read_array(const json& obj, const char* key, const std::string& path, std::vector<T>& out,
                Problems& problems) {
  auto it = obj.find(key);
  if (it == obj.end()) return false;
  const std::string where = field(path, key);
  if (!it->is_array()) {
    problems.push_back(fmt::format("{}: expected an array", where));
    return true;
  }
  out.clear();
  for (std::size_t i = 0; i < it->size(); ++i) {
    T v{};
    if (convert((*it)[i], v)) {
      out.push_back(v);
    } else {
      problems.push_back(fmt::format("{}[{}]: expected {}", where, i, type_name<T>()));
    }
  }
  return true;
}

template <typename Enum, typename Parse>
void read_enum(const json& obj, const char* key, const std::string& path, Enum& out, Parse parse,
               Problems& problems) {
  std::string text;
  if (!read(obj, key, path, text, problems) || text.empty()) return;
  try {
    out = parse(text);
  } catch (const Error& e) {
    problems.push_back(fmt::format("{}: {}", field(path, key), e.what()));
  }
}

struct Explicit {
  bool locations[2] = {false, false};
  bool milestones = false;
  bool alpha = false, beta = false, gamma = false, lambda = false;
};

void parse_dataset(const json& j, DatasetConfig& d, Problems& p) {
  const std::string path = "dataset";
  if (!expect_object(j, path,
                     {"kind", "path", "subset", "subset_seed", "corrupt_ratio", "corrupt_seed",
                      "synthetic"},
                     p)) {
    return;
  }
  read(j, "kind", path, d.kind, p);
  read(j, "path", path, d.path, p);
  read(j, "subset", path, d.subset, p);
  read(j, "subset_seed", path, d.subset_seed, p);
  read(j, "corrupt_ratio", path, d.corrupt_ratio, p);
  read(j, "corrupt_seed", path, d.corrupt_seed, p);
  if (auto it = j.find("synthetic"); it != j.end()) {
    const std::string sp = "dataset.synthetic";
    if (expect_object(*it, sp,
                      {"train_size", "test_size", "num_classes", "side", "channels", "seed"}, p)) {
      read(*it, "train_size", sp, d.train_size, p);
      read(*it, "test_size", sp, d.test_size, p);
      read(*it, "num_classes", sp, d.num_classes, p);
      read(*it, "side", sp, d.side, p);
      read(*it, "channels", sp, d.channels, p);
      read(*it, "seed", sp, d.synthetic_seed, p);
    }
  }
}

void parse_nets(const json& j, ExperimentConfig& c, Explicit& ex, Problems& p) {
  if (!j.is_array() || j.size() != 2) {
    p.push_back("nets: expected an array of exactly two networks");
    return;
  }
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string path = fmt::format("nets[{}]", i);
    if (!expect_object(j[i], path, {"backbone", "head_style", "locations"}, p)) continue;
    auto& n = c.nets[i];
    read(j[i], "backbone", path, n.backbone, p);
    read_enum(j[i], "head_style", path, n.head_style, net::parse_head_style, p);
    ex.locations[i] = read_array(j[i], "locations", path, n.locations, p);
  }
}

void parse_schedule(const json& j, train::Schedule& s, Explicit& ex, Problems& p) {
  const std::string path = "schedule";
  if (!expect_object(j, path, {"kind", "initial_lr", "epochs", "milestones"}, p)) return;
  std::string kind;
  if (read(j, "kind", path, kind, p)) {
    if (kind == "step") {
      s.kind = train::Schedule::Kind::Step;
    } else if (kind == "cosine") {
      s.kind = train::Schedule::Kind::Cosine;
    } else {
      p.push_back(fmt::format("schedule.kind: expected step or cosine, got '{}'", kind));
    }
  }
  read(j, "initial_lr", path, s.initial_lr, p);
  read(j, "epochs", path, s.epochs, p);
  auto it = j.find("milestones");
  if (it == j.end()) return;
  ex.milestones = true;
  s.milestones.clear();
  if (!it->is_array()) {
    p.push_back("schedule.milestones: expected an array of [epoch, divisor] pairs");
    return;
  }
  for (std::size_t i = 0; i < it->size(); ++i) {
    const json& m = (*it)[i];
    if (!m.is_array() || m.size() != 2 || !is_non_negative_integer(m[0]) || !m[1].is_number()) {
      p.push_back(fmt::format("schedule.milestones[{}]: expected [epoch, divisor]", i));
      continue;
    }
    s.milestones.emplace_back(m[0].get<std::size_t>(), m[1].get<double>());
  }
}

// Halving and three-quarter points, dividing by 5 (scaled WRN recipe).
std::vector<std::pair<std::size_t, double>> default_milestones(std::size_t epochs) {
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t e : {epochs / 2, epochs * 3 / 4}) {
    if (e > 0 && e < epochs && (out.empty() || out.back().first < e)) out.emplace_back(e, 5.0);
  }
  return out;
}

std::string join_locations(const std::vector<std::size_t>& v) {
  return fmt::format("[{}]", fmt::join(v, ", "));
}

}  // namespace

std::size_t ExperimentConfig::input_channels() const {
  if (dataset.kind == "mnist") return 1;
  if (dataset.kind == "synthetic") return dataset.channels;
  return 3;
}

std::size_t ExperimentConfig::num_classes() const {
  return dataset.kind == "synthetic" ? dataset.num_classes : 10;
}

net::BackboneSpec ExperimentConfig::backbone(std::size_t net_index) const {
  return net::backbone_preset(nets.at(net_index).backbone, num_classes(), input_channels());
}

ExperimentConfig parse_config(const json& j) {
  Problems p;
  ExperimentConfig c;
  c.nets.resize(2);
  c.seeds = {1, 2, 3};
  c.schedule.initial_lr = 0.1;
  c.schedule.epochs = 60;
  c.optimizer = {.momentum = 0.9, .weight_decay = 5e-4, .nesterov = false};
  Explicit ex;

  if (!expect_object(j, "",
                     {"dataset", "nets", "mode", "weights", "objective", "schedule", "optimizer",
                      "batch_size", "augment", "seeds", "precision", "teacher_manifest", "out",
                      "config_hash"},
                     p)) {
    throw ConfigError(std::move(p));
  }
  if (auto it = j.find("dataset"); it != j.end()) parse_dataset(*it, c.dataset, p);
  if (auto it = j.find("nets"); it != j.end()) parse_nets(*it, c, ex, p);
  read_enum(j, "mode", "", c.mode, distill::parse_mode, p);

  if (auto it = j.find("weights"); it != j.end()) {
    const std::string path = "weights";
    if (expect_object(*it, path, {"alpha", "beta", "gamma", "lambda", "temperature"}, p)) {
      ex.alpha = read(*it, "alpha", path, c.weights.alpha, p);
      ex.beta = read(*it, "beta", path, c.weights.beta, p);
      ex.gamma = read(*it, "gamma", path, c.weights.gamma, p);
      ex.lambda = read(*it, "lambda", path, c.weights.lambda, p);
      read(*it, "temperature", path, c.weights.temperature, p);
    }
  }
  if (auto it = j.find("objective"); it != j.end()) {
    const std::string path = "objective";
    if (expect_object(*it, path, {"dml_measure", "dcm2_keep_last_pair"}, p)) {
      std::string measure;
      if (read(*it, "dml_measure", path, measure, p)) {
        if (measure == "kl") {
          c.objective.dml_measure = distill::Measure::KullbackLeibler;
        } else if (measure == "ce") {
          c.objective.dml_measure = distill::Measure::SoftCrossEntropy;
        } else {
          p.push_back(fmt::format("objective.dml_measure: expected kl or ce, got '{}'", measure));
        }
      }
      read(*it, "dcm2_keep_last_pair", path, c.objective.dcm2_keep_last_pair, p);
    }
  }
  if (auto it = j.find("schedule"); it != j.end()) parse_schedule(*it, c.schedule, ex, p);
  if (auto it = j.find("optimizer"); it != j.end()) {
    const std::string path = "optimizer";
    if (expect_object(*it, path, {"momentum", "weight_decay", "nesterov"}, p)) {
      read(*it, "momentum", path, c.optimizer.momentum, p);
      read(*it, "weight_decay", path, c.optimizer.weight_decay, p);
      read(*it, "nesterov", path, c.optimizer.nesterov, p);
    }
  }
  read(j, "batch_size", "", c.batch_size, p);
  read(j, "augment", "", c.augment, p);
  read_array(j, "seeds", "", c.seeds, p);
  read(j, "precision", "", c.precision, p);
  read(j, "teacher_manifest", "", c.teacher_manifest, p);
  read(j, "out", "", c.out, p);

  // Defaults that depend on other fields.
  if (!ex.milestones && c.schedule.kind == train::Schedule::Kind::Step) {
    c.schedule.milestones = default_milestones(c.schedule.epochs);
  }
  const WeightUse use = weight_use(c.mode, c.objective);
  auto resolve = [&](const char* name, bool used, bool given, double& w) {
    if (used || !given) {
      if (!used) w = 0.0;
      return;
    }
    if (w != 0.0) {
      p.push_back(fmt::format("weights.{}: must be 0 in mode {} (got {})", name,
                              distill::to_string(c.mode), w));
    }
  };
  resolve("alpha", use.alpha, ex.alpha, c.weights.alpha);
  resolve("beta", use.beta, ex.beta, c.weights.beta);
  resolve("gamma", use.gamma, ex.gamma, c.weights.gamma);
  resolve("lambda", use.lambda, ex.lambda, c.weights.lambda);

  if (distill::uses_aux(c.mode)) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (ex.locations[i]) continue;
      try {
        c.nets[i].locations = net::attachment_points(c.backbone(i));
      } catch (const Error&) {
        // reported by validate()
      }
    }
  }

  for (auto& msg : validate(c)) {
    if (std::find(p.begin(), p.end(), msg) == p.end()) p.push_back(std::move(msg));
  }
  if (!p.empty()) throw ConfigError(std::move(p));
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({fmt::format("{}: cannot open", path)});
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError({fmt::format("{}: {}", path, e.what())});
  }
  return parse_config(j);
}

std::vector<std::string> validate(const ExperimentConfig& c) {
  Problems p;
  const auto& d = c.dataset;
  if (d.kind != "cifar10" && d.kind != "mnist" && d.kind != "synthetic") {
    p.push_back(fmt::format("dataset.kind: expected cifar10, mnist or synthetic, got '{}'", d.kind));
  }
  if ((d.kind == "cifar10" || d.kind == "mnist") && d.path.empty()) {
    p.push_back(fmt::format("dataset.path: required for {}", d.kind));
  }
  if (!(d.corrupt_ratio >= 0.0 && d.corrupt_ratio <= 1.0)) {
    p.push_back(fmt::format("dataset.corrupt_ratio: must lie in [0, 1], got {}", d.corrupt_ratio));
  }
  if (d.kind == "synthetic") {
    if (d.train_size == 0) p.push_back("dataset.synthetic.train_size: must be positive");
    if (d.test_size == 0) p.push_back("dataset.synthetic.test_size: must be positive");
    if (d.num_classes < 2) p.push_back("dataset.synthetic.num_classes: must be at least 2");
    if (d.side < 8) p.push_back("dataset.synthetic.side: must be at least 8");
    if (d.channels == 0) p.push_back("dataset.synthetic.channels: must be positive");
  }

  if (c.nets.size() != 2) {
    p.push_back("nets: expected exactly two networks");
  } else {
    for (std::size_t i = 0; i < 2; ++i) {
      const std::string path = fmt::format("nets[{}]", i);
      const auto& n = c.nets[i];
      net::BackboneSpec spec;
      try {
        spec = c.backbone(i);
      } catch (const ConfigError& e) {
        for (const auto& msg : e.problems()) p.push_back(fmt::format("{}.backbone: {}", path, msg));
        continue;
      }
      std::set<std::size_t> seen;
      for (std::size_t k = 0; k < n.locations.size(); ++k) {
        const std::size_t loc = n.locations[k];
        if (!net::is_attachment_point(spec, loc)) {
          p.push_back(fmt::format(
              "{}.locations[{}]: {} is not a down-sampling boundary of {} (valid: {})", path, k,
              loc, n.backbone, join_locations(net::attachment_points(spec))));
        } else if (!seen.insert(loc).second) {
          p.push_back(fmt::format("{}.locations[{}]: duplicate location {}", path, k, loc));
        }
      }
      if (!n.locations.empty() && !distill::uses_aux(c.mode)) {
        p.push_back(c.mode == distill::Mode::DML
                        ? fmt::format("{}.locations: DML requires empty Q", path)
                        : fmt::format("{}.locations: mode {} takes no auxiliary classifiers", path,
                                      distill::to_string(c.mode)));
      }
    }
    if (is_dcm(c.mode) && c.nets[0].locations.size() != c.nets[1].locations.size()) {
      p.push_back(fmt::format("nets: mode {} needs the same number of auxiliary classifiers on "
                              "both networks (got {} and {})",
                              distill::to_string(c.mode), c.nets[0].locations.size(),
                              c.nets[1].locations.size()));
    }
  }

  for (const auto& msg : c.weights.problems()) p.push_back("weights: " + msg);
  const WeightUse use = weight_use(c.mode, c.objective);
  auto unused = [&](const char* name, bool used, double w) {
    if (!used && w != 0.0) {
      p.push_back(fmt::format("weights.{}: must be 0 in mode {} (got {})", name,
                              distill::to_string(c.mode), w));
    }
  };
  unused("alpha", use.alpha, c.weights.alpha);
  unused("beta", use.beta, c.weights.beta);
  unused("gamma", use.gamma, c.weights.gamma);
  unused("lambda", use.lambda, c.weights.lambda);

  for (const auto& msg : c.schedule.problems()) p.push_back("schedule: " + msg);
  if (!(c.optimizer.momentum >= 0.0 && c.optimizer.momentum < 1.0)) {
    p.push_back(fmt::format("optimizer.momentum: must lie in [0, 1), got {}", c.optimizer.momentum));
  }
  if (!(c.optimizer.weight_decay >= 0.0) || !std::isfinite(c.optimizer.weight_decay)) {
    p.push_back(fmt::format("optimizer.weight_decay: must be non-negative, got {}",
                            c.optimizer.weight_decay));
  }
  if (c.batch_size == 0) p.push_back("batch_size: must be positive");
  if (c.seeds.empty()) p.push_back("seeds: at least one seed is required");
  std::set<std::uint64_t> unique(c.seeds.begin(), c.seeds.end());
  if (unique.size() != c.seeds.size()) p.push_back("seeds: duplicate seed");
  if (c.precision != "f32" && c.precision != "f64") {
    p.push_back(fmt::format("precision: expected f32 or f64, got '{}'", c.precision));
  }
  if (!c.teacher_manifest.empty() && c.mode != distill::Mode::KD) {
    p.push_back("teacher_manifest: only used in mode kd");
  }
  if (c.out.empty()) p.push_back("out: must not be empty");
  return p;
}

json to_json(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  json milestones = json::array();
  for (const auto& [epoch, divisor] : c.schedule.milestones) {
    milestones.push_back(json::array({epoch, divisor}));
  }
  json nets = json::array();
  for (const auto& n : c.nets) {
    nets.push_back({{"backbone", n.backbone},
                    {"head_style", std::string(net::to_string(n.head_style))},
                    {"locations", n.locations}});
  }
  return {
      {"dataset",
       {{"kind", d.kind},
        {"path", d.path},
        {"subset", d.subset},
        {"subset_seed", d.subset_seed},
        {"corrupt_ratio", d.corrupt_ratio},
        {"corrupt_seed", d.corrupt_seed},
        {"synthetic",
         {{"train_size", d.train_size},
          {"test_size", d.test_size},
          {"num_classes", d.num_classes},
          {"side", d.side},
          {"channels", d.channels},
          {"seed", d.synthetic_seed}}}}},
      {"nets", nets},
      {"mode", std::string(distill::to_string(c.mode))},
      {"weights",
       {{"alpha", c.weights.alpha},
        {"beta", c.weights.beta},
        {"gamma", c.weights.gamma},
        {"lambda", c.weights.lambda},
        {"temperature", c.weights.temperature}}},
      {"objective",
       {{"dml_measure",
         c.objective.dml_measure == distill::Measure::KullbackLeibler ? "kl" : "ce"},
        {"dcm2_keep_last_pair", c.objective.dcm2_keep_last_pair}}},
      {"schedule",
       {{"kind", c.schedule.kind == train::Schedule::Kind::Step ? "step" : "cosine"},
        {"initial_lr", c.schedule.initial_lr},
        {"epochs", c.schedule.epochs},
        {"milestones", milestones}}},
      {"optimizer",
       {{"momentum", c.optimizer.momentum},
        {"weight_decay", c.optimizer.weight_decay},
        {"nesterov", c.optimizer.nesterov}}},
      {"batch_size", c.batch_size},
      {"augment", c.augment},
      {"seeds", c.seeds},
      {"precision", c.precision},
      {"teacher_manifest", c.teacher_manifest},
      {"out", c.out},
  };
}

std::string config_hash(const ExperimentConfig& config) {
  json j = to_json(config);
  j.erase("out");
  j.erase("seeds");
  return fmt::format("{:016x}", fnv1a64(j.dump()));
}

ExperimentConfig with_mode(ExperimentConfig c, distill::Mode mode) {
  const WeightUse before = weight_use(c.mode, c.objective);
  const WeightUse after = weight_use(mode, c.objective);
  auto carry = [](bool used_before, bool used_after, double& w) {
    if (!used_after) {
      w = 0.0;
    } else if (!used_before) {
      w = 1.0;
    }
  };
  carry(before.alpha, after.alpha, c.weights.alpha);
  carry(before.beta, after.beta, c.weights.beta);
  carry(before.gamma, after.gamma, c.weights.gamma);
  carry(before.lambda, after.lambda, c.weights.lambda);
  const bool aux = distill::uses_aux(mode);
  for (std::size_t i = 0; i < c.nets.size(); ++i) {
    if (!aux) {
      c.nets[i].locations.clear();
    } else if (c.nets[i].locations.empty()) {
      c.nets[i].locations = net::attachment_points(c.backbone(i));
    }
  }
  if (mode != distill::Mode::KD) c.teacher_manifest.clear();
  c.mode = mode;
  return c;
}

}  // namespace dcm::exp
