#include "ulsam/train.hpp"

namespace ulsam {

void LrSchedule::validate() const {
  if (!(initial > 0.0)) throw ConfigError("lr: initial learning rate must be > 0");
  if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("lr: decay factor must be in (0, 1)");
  if (kind == ScheduleKind::StepDecay && every < 1) {
    throw ConfigError("lr: step period must be >= 1 epoch");
  }
}

double lr_at(const LrSchedule& schedule, int epoch) {
  if (epoch < 0) throw ConfigError("lr_at: epoch must be >= 0");
  switch (schedule.kind) {
    case ScheduleKind::StepDecay: {
      // Divide by (1/factor)^k: "1/10th per step" gives the exact decimal
      // doubles 0.01, 0.001 from 0.1.
      const int steps = epoch / schedule.every;
      return schedule.initial / std::pow(1.0 / schedule.factor, steps);
    }
    case ScheduleKind::ExpDecay:
      return schedule.initial * std::pow(schedule.factor, epoch);
  }
  return schedule.initial;
}

}  // namespace ulsam
