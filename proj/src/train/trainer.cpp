#include "dcm/train/trainer.hpp"

#include <fmt/format.h>

#include <cmath>
#include <limits>

#include "dcm/autograd/ops.hpp"
#include "dcm/common/error.hpp"

namespace dcm::train {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <typename T>
std::vector<std::vector<T>> snapshot_buffers(const net::SupervisedNet<T>& n) {
  std::vector<std::vector<T>> out;
  for (const auto& t : n.tensors()) {
    if (!t.trainable) out.emplace_back(t.tensor.values().begin(), t.tensor.values().end());
  }
  return out;
}

template <typename T>
void restore_buffers(const net::SupervisedNet<T>& n, const std::vector<std::vector<T>>& saved) {
  std::size_t i = 0;
  for (auto t : n.tensors()) {
    if (t.trainable) continue;
    auto dst = t.tensor.mutable_values();
    std::copy(saved[i].begin(), saved[i].end(), dst.begin());
    ++i;
  }
}

template <typename T>
bool grads_finite(const std::vector<ag::Tensor<T>>& params) {
  for (const auto& p : params) {
    for (T g : p.grad()) {
      if (!std::isfinite(g)) return false;
    }
  }
  return true;
}

bool frozen(const TrainConfig& config, std::size_t i) {
  return config.mode == distill::Mode::KD && i == 0;
}

}  // namespace

template <typename T>
TrainState<T> initial_state(net::SupervisedNet<T> first, net::SupervisedNet<T> second,
                            const TrainConfig& config) {
  TrainState<T> s;
  s.seed = config.seed;
  s.nets = {std::move(first), std::move(second)};
  for (std::size_t i = 0; i < 2; ++i) {
    const auto params = s.nets[i].parameters();
    s.optimizers[i] = ag::OptimizerState<T>(std::span<const ag::Tensor<T>>(params), config.sgd);
  }
  return s;
}

namespace {

template <typename T>
std::pair<std::size_t, std::size_t> count_misses(std::span<const T> logits, std::size_t rows,
                                                 std::size_t cols,
                                                 std::span<const std::int32_t> labels) {
  if (logits.size() != rows * cols || labels.size() != rows) {
    throw ShapeError(fmt::format("top_k_errors: {} logits and {} labels for [{},{}]",
                                 logits.size(), labels.size(), rows, cols));
  }
  std::size_t miss1 = 0, miss5 = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto y = static_cast<std::size_t>(labels[r]);
    const T* z = logits.data() + r * cols;
    std::size_t rank = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (z[c] > z[y] || (z[c] == z[y] && c < y)) ++rank;
    }
    miss1 += rank >= 1;
    miss5 += rank >= 5;
  }
  return {miss1, miss5};
}

TopKErrors to_errors(std::size_t miss1, std::size_t miss5, std::size_t rows, std::size_t cols) {
  TopKErrors e;
  e.top1 = static_cast<double>(miss1) / static_cast<double>(rows);
  e.top5 = cols >= 5 ? static_cast<double>(miss5) / static_cast<double>(rows) : kNaN;
  return e;
}

}  // namespace

template <typename T>
TopKErrors top_k_errors(std::span<const T> logits, std::size_t rows, std::size_t cols,
                        std::span<const std::int32_t> labels) {
  if (rows == 0) throw Error("top_k_errors: no samples");
  const auto [miss1, miss5] = count_misses(logits, rows, cols, labels);
  return to_errors(miss1, miss5, rows, cols);
}

template <typename T>
TopKErrors evaluate(net::SupervisedNet<T>& net, const data::Dataset& test,
                    const data::Normalization& norm, std::size_t batch_size) {
  if (test.size() == 0) throw DataError("evaluate: empty test set");
  ag::NoGradGuard no_grad;
  std::size_t miss1 = 0, miss5 = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < test.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(test.size(), start + batch_size); ++i) idx.push_back(i);
    const auto batch = data::make_batch<T>(test, idx, norm, false, 0, 0);
    const auto logits = net.forward(batch.images, false);
    const auto [m1, m5] = count_misses<T>(logits.values(), idx.size(), test.num_classes, batch.labels);
    miss1 += m1;
    miss5 += m5;
  }
  return to_errors(miss1, miss5, test.size(), test.num_classes);
}

template <typename T>
JointObjectives<T> joint_objectives(std::array<net::SupervisedNet<T>*, 2> nets,
                                    const data::LabeledBatch<T>& batch, const TrainConfig& config) {
  std::array<std::vector<ag::Tensor<T>>, 2> logits;
  for (std::size_t i = 0; i < 2; ++i) {
    if (frozen(config, i)) {
      ag::NoGradGuard no_grad;
      logits[i] = nets[i]->forward_all_heads(batch.images, false);
    } else {
      logits[i] = nets[i]->forward_all_heads(batch.images, true);
    }
  }
  std::array<distill::KnowledgeSet<T>, 2> knowledge;
  if (distill::uses_peer(config.mode)) {
    ag::NoGradGuard no_grad;
    const auto temperature = static_cast<T>(config.weights.temperature);
    for (std::size_t i = 0; i < 2; ++i) {
      knowledge[i] = distill::knowledge_set<T>(logits[i], temperature);
    }
  }
  JointObjectives<T> out;
  for (std::size_t i = 0; i < 2; ++i) {
    if (frozen(config, i)) continue;
    out.net[i] = distill::dcm_objective<T>(logits[i], batch.labels, knowledge[1 - i],
                                           config.weights, config.mode, config.objective);
  }
  return out;
}

template <typename T>
JointTrainer<T>::JointTrainer(TrainState<T> state, const data::Dataset& train,
                              const data::Dataset& test, TrainConfig config)
    : state_(std::move(state)),
      train_(train),
      test_(test),
      config_(std::move(config)),
      norm_(data::channel_stats(train)) {
  if (train.num_classes != test.num_classes) {
    throw DataError(fmt::format("train split has {} classes, test split {}", train.num_classes,
                                test.num_classes));
  }
  for (const auto& n : state_.nets) {
    if (n.spec().num_classes != train.num_classes) {
      throw ConfigError({fmt::format("network '{}' predicts {} classes but the dataset has {}",
                                     n.spec().name, n.spec().num_classes, train.num_classes)});
    }
  }
}

template <typename T>
JointObjectives<T> JointTrainer<T>::step(const data::LabeledBatch<T>& batch, double lr) {
  std::array<std::vector<ag::Tensor<T>>, 2> params;
  std::array<std::vector<std::vector<T>>, 2> buffers;
  for (std::size_t i = 0; i < 2; ++i) {
    params[i] = state_.nets[i].parameters();
    ag::zero_grad(std::span<ag::Tensor<T>>(params[i]));
    buffers[i] = snapshot_buffers(state_.nets[i]);
  }
  auto fail = [&](const std::string& what) {
    for (std::size_t i = 0; i < 2; ++i) {
      restore_buffers(state_.nets[i], buffers[i]);
      ag::zero_grad(std::span<ag::Tensor<T>>(params[i]));
    }
    return DivergenceError(fmt::format("iteration {}: {}", state_.iteration, what));
  };

  auto obj = joint_objectives<T>({&state_.nets[0], &state_.nets[1]}, batch, config_);
  for (std::size_t i = 0; i < 2; ++i) {
    if (frozen(config_, i)) continue;
    const double loss = static_cast<double>(obj.net[i].total.item());
    if (!std::isfinite(loss)) throw fail(fmt::format("loss of network {} is {}", i + 1, loss));
  }
  for (std::size_t i = 0; i < 2; ++i) {
    if (!frozen(config_, i)) obj.net[i].total.backward();
  }
  for (std::size_t i = 0; i < 2; ++i) {
    if (!grads_finite(params[i])) throw fail(fmt::format("non-finite gradient in network {}", i + 1));
  }
  for (std::size_t i = 0; i < 2; ++i) {
    if (!frozen(config_, i)) {
      ag::sgd_step(std::span<ag::Tensor<T>>(params[i]), state_.optimizers[i], lr);
    }
  }
  ++state_.iteration;
  return obj;
}

template <typename T>
EpochMetrics JointTrainer<T>::run_epoch() {
  EpochMetrics row;
  row.epoch = state_.epoch;
  row.lr = lr_at(config_.schedule, state_.epoch);
  const auto batches = data::batch_iter(train_.size(), config_.batch_size, state_.seed, state_.epoch);
  std::array<std::array<double, 5>, 2> sums{};
  for (const auto& idx : batches) {
    const auto batch = data::make_batch<T>(train_, idx, norm_, config_.augment, state_.seed,
                                           state_.epoch);
    const auto obj = step(batch, row.lr);
    const auto w = static_cast<double>(idx.size());
    for (std::size_t i = 0; i < 2; ++i) {
      if (frozen(config_, i)) continue;
      const auto& o = obj.net[i];
      sums[i][0] += w * static_cast<double>(o.total.item());
      sums[i][1] += w * o.c;
      sums[i][2] += w * o.ds;
      sums[i][3] += w * o.dcm1;
      sums[i][4] += w * o.dcm2;
    }
  }
  const auto n = static_cast<double>(train_.size());
  for (std::size_t i = 0; i < 2; ++i) {
    auto& m = row.nets[i];
    if (frozen(config_, i)) {
      m.loss_total = m.loss_c = m.loss_ds = m.loss_dcm1 = m.loss_dcm2 = kNaN;
    } else {
      m.loss_total = sums[i][0] / n;
      m.loss_c = sums[i][1] / n;
      m.loss_ds = sums[i][2] / n;
      m.loss_dcm1 = sums[i][3] / n;
      m.loss_dcm2 = sums[i][4] / n;
    }
    const auto e = evaluate(state_.nets[i], test_, norm_, config_.eval_batch_size);
    m.test_top1 = e.top1;
    m.test_top5 = e.top5;
  }
  ++state_.epoch;
  state_.history.push_back(row);
  return row;
}

template <typename T>
void JointTrainer<T>::run(
    const std::function<void(const EpochMetrics&, const TrainState<T>&)>& on_epoch) {
  while (state_.epoch < config_.schedule.epochs) {
    const auto row = run_epoch();
    if (on_epoch) on_epoch(row, state_);
  }
}

#define DCM_INSTANTIATE(T)                                                                      \
  template TrainState<T> initial_state<T>(net::SupervisedNet<T>, net::SupervisedNet<T>,         \
                                          const TrainConfig&);                                  \
  template TopKErrors top_k_errors<T>(std::span<const T>, std::size_t, std::size_t,             \
                                      std::span<const std::int32_t>);                           \
  template TopKErrors evaluate<T>(net::SupervisedNet<T>&, const data::Dataset&,                 \
                                  const data::Normalization&, std::size_t);                     \
  template JointObjectives<T> joint_objectives<T>(std::array<net::SupervisedNet<T>*, 2>,        \
                                                  const data::LabeledBatch<T>&,                 \
                                                  const TrainConfig&);                          \
  template class JointTrainer<T>;

DCM_INSTANTIATE(float)
DCM_INSTANTIATE(double)

}  // namespace dcm::train
