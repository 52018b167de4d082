#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace dcm::train {

struct Schedule {
  enum class Kind { Step, Cosine };

  Kind kind = Kind::Step;
  double initial_lr = 0.1;
  /// (epoch, divisor): from `epoch` on, the rate is divided by `divisor`
  /// (cumulative). Step schedules only.
  std::vector<std::pair<std::size_t, double>> milestones;
  std::size_t epochs = 1;

  std::vector<std::string> problems() const;
};

/// Rate for a 0-based epoch; throws Error when epoch >= schedule.epochs.
/// Cosine: initial_lr * (1 + cos(pi * epoch / epochs)) / 2.
double lr_at(const Schedule& schedule, std::size_t epoch);

/// Divided by `divisor` every `every` epochs.
Schedule periodic_step(double initial_lr, std::size_t epochs, std::size_t every, double divisor);

}  // namespace dcm::train
