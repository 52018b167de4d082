#include "dcm/train/schedule.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numbers>

#include "dcm/common/error.hpp"

namespace dcm::train {

std::vector<std::string> Schedule::problems() const {
  std::vector<std::string> out;
  if (!(initial_lr > 0.0) || !std::isfinite(initial_lr)) {
    out.push_back(fmt::format("initial_lr must be positive, got {}", initial_lr));
  }
  if (epochs == 0) out.push_back("epochs must be at least 1");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    const auto& [epoch, divisor] = milestones[i];
    if (i > 0 && epoch <= milestones[i - 1].first) {
      out.push_back(fmt::format("milestones[{}]: epochs must be strictly increasing", i));
    }
    if (!(divisor > 1.0)) {
      out.push_back(fmt::format("milestones[{}]: divisor must exceed 1, got {}", i, divisor));
    }
    if (epoch == 0 || epoch >= epochs) {
      out.push_back(fmt::format("milestones[{}]: epoch {} outside [1, {})", i, epoch, epochs));
    }
  }
  if (kind == Kind::Cosine && !milestones.empty()) {
    out.push_back("cosine schedules take no milestones");
  }
  return out;
}

double lr_at(const Schedule& schedule, std::size_t epoch) {
  if (epoch >= schedule.epochs) {
    throw Error(fmt::format("lr_at: epoch {} outside [0, {})", epoch, schedule.epochs));
  }
  if (schedule.kind == Schedule::Kind::Cosine) {
    const double t = static_cast<double>(epoch) / static_cast<double>(schedule.epochs);
    return schedule.initial_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  }
  double lr = schedule.initial_lr;
  for (const auto& [at, divisor] : schedule.milestones) {
    if (epoch >= at) lr /= divisor;
  }
  return lr;
}

Schedule periodic_step(double initial_lr, std::size_t epochs, std::size_t every, double divisor) {
  Schedule s;
  s.initial_lr = initial_lr;
  s.epochs = epochs;
  for (std::size_t e = every; e < epochs; e += every) s.milestones.emplace_back(e, divisor);
  return s;
}

}  // namespace dcm::train
