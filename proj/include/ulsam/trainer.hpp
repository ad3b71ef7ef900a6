#pragma once

// Epoch loop and evaluation over a float network.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ulsam/data.hpp"
#include "ulsam/network.hpp"
#include "ulsam/train.hpp"

namespace ulsam {

struct TrainConfig {
  LrSchedule schedule = LrSchedule::step_decay(0.1);
  double momentum = 0.9;
  double weight_decay = 4e-5;
  int batch_size = 128;
  int epochs = 30;
  std::uint64_t seed = 0;
  bool flip = false;            // random horizontal flip
  std::string checkpoint_path;  // written after every epoch when non-empty

  void validate() const;
};

struct EvalResult {
  double top1 = 0.0;
  std::optional<double> top5;  // absent when the model has fewer than 5 classes
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;      // mean over samples, training mode
  double train_accuracy = 0.0;  // running top-1 during the epoch, training mode
  EvalResult eval;              // inference mode, after the epoch's updates
};

std::string to_json_line(const EpochRecord& record);

EvalResult evaluate(Network<float>& net, const Dataset& data, int batch_size = 128);

/// Trains `net` in place. Evaluation each epoch uses `eval_data`, or the
/// training set when null.
std::vector<EpochRecord> train_loop(Network<float>& net, const Dataset& train_data,
                                    const Dataset* eval_data, const TrainConfig& config,
                                    const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace ulsam
