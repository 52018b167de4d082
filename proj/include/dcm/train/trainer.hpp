#pragma once

// Joint training of two networks. Each iteration draws one batch, runs one
// forward pass per network through all of its classifiers, builds both
// objectives from these pre-update outputs, backpropagates each objective
// into its own network and then updates both networks.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dcm/autograd/optim.hpp"
#include "dcm/data/dataset.hpp"
#include "dcm/data/pipeline.hpp"
#include "dcm/distill/losses.hpp"
#include "dcm/net/network.hpp"
#include "dcm/train/schedule.hpp"

namespace dcm::train {

struct TrainConfig {
  distill::Mode mode = distill::Mode::DCM;
  distill::LossWeights weights;
  distill::ObjectiveOptions objective;
  Schedule schedule;
  ag::SgdOptions sgd{.momentum = 0.9, .weight_decay = 5e-4, .nesterov = false};
  std::size_t batch_size = 128;
  std::size_t eval_batch_size = 256;
  bool augment = true;
  std::uint64_t seed = 1;
};

struct NetMetrics {
  double loss_total = 0, loss_c = 0, loss_ds = 0, loss_dcm1 = 0, loss_dcm2 = 0;
  double test_top1 = 0;
  double test_top5 = 0;  // NaN when there are fewer than 5 classes
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  std::array<NetMetrics, 2> nets;
};

template <typename T>
struct TrainState {
  std::size_t epoch = 0;      // next epoch to run
  std::uint64_t iteration = 0;
  std::uint64_t seed = 0;     // batch order and augmentation derive from (seed, epoch)
  std::array<net::SupervisedNet<T>, 2> nets;
  std::array<ag::OptimizerState<T>, 2> optimizers;
  std::vector<EpochMetrics> history;
};

/// Fresh state: optimizer buffers sized to the networks' parameters.
template <typename T>
TrainState<T> initial_state(net::SupervisedNet<T> first, net::SupervisedNet<T> second,
                            const TrainConfig& config);

struct TopKErrors {
  double top1 = 0;
  double top5 = 0;  // NaN when there are fewer than 5 classes
};

/// Errors of [rows, cols] logits. A row counts as a top-k hit when fewer
/// than k classes outrank the true one (ties go to the lower index).
template <typename T>
TopKErrors top_k_errors(std::span<const T> logits, std::size_t rows, std::size_t cols,
                        std::span<const std::int32_t> labels);

/// Default classifier only, evaluation mode, no augmentation.
template <typename T>
TopKErrors evaluate(net::SupervisedNet<T>& net, const data::Dataset& test,
                    const data::Normalization& norm, std::size_t batch_size = 256);

template <typename T>
struct JointObjectives {
  std::array<distill::Objective<T>, 2> net;
};

/// Forward passes and both objectives for one batch (no backward, no update).
/// In KD mode the first network is the frozen teacher: it runs in evaluation
/// mode without a graph and its objective is left undefined.
template <typename T>
JointObjectives<T> joint_objectives(std::array<net::SupervisedNet<T>*, 2> nets,
                                    const data::LabeledBatch<T>& batch, const TrainConfig& config);

template <typename T>
class JointTrainer {
 public:
  JointTrainer(TrainState<T> state, const data::Dataset& train, const data::Dataset& test,
               TrainConfig config);

  /// One iteration at rate `lr`. Throws DivergenceError on a non-finite
  /// loss or gradient; the networks are then left as before the call.
  JointObjectives<T> step(const data::LabeledBatch<T>& batch, double lr);

  /// Trains state().epoch, evaluates both networks, appends and returns the row.
  EpochMetrics run_epoch();
  /// Runs the remaining epochs; `on_epoch` is called after each one.
  void run(const std::function<void(const EpochMetrics&, const TrainState<T>&)>& on_epoch = {});

  const TrainState<T>& state() const { return state_; }
  TrainState<T>& state() { return state_; }
  const data::Normalization& normalization() const { return norm_; }

 private:
  TrainState<T> state_;
  const data::Dataset& train_;
  const data::Dataset& test_;
  TrainConfig config_;
  data::Normalization norm_;
};

}  // namespace dcm::train
