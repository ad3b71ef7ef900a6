#pragma once

// Optimiser, learning-rate schedules, loss and accuracy metrics.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ulsam/tensor.hpp"

namespace ulsam {

enum class ScheduleKind { StepDecay, ExpDecay };

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::StepDecay;
  double initial = 0.1;
  double factor = 0.1;  // StepDecay: multiplier per step; ExpDecay: per epoch
  int every = 30;       // StepDecay period in epochs

  static LrSchedule step_decay(double initial, double factor = 0.1, int every = 30) {
    return {ScheduleKind::StepDecay, initial, factor, every};
  }
  static LrSchedule exp_decay(double initial, double factor = 0.98) {
    return {ScheduleKind::ExpDecay, initial, factor, 1};
  }

  void validate() const;
};

/// StepDecay: lr0 * factor^floor(epoch / every). ExpDecay: lr0 * factor^epoch.
double lr_at(const LrSchedule& schedule, int epoch);

/// Momentum buffers, one per parameter tensor.
template <typename Scalar>
struct SgdState {
  std::vector<Eigen::Array<Scalar, Eigen::Dynamic, 1>> velocity;
};

struct SgdOptions {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// Coupled weight decay:
///   v <- momentum * v + (grad + weight_decay * param);  param <- param - lr * v
template <typename Scalar>
void sgd_step(std::span<Tensor<Scalar>* const> params, SgdState<Scalar>& state,
              const SgdOptions& opt) {
  if (state.velocity.empty()) {
    for (const Tensor<Scalar>* p : params) {
      state.velocity.push_back(Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(p->size()));
    }
  }
  if (state.velocity.size() != params.size()) {
    throw ConfigError("sgd_step: " + std::to_string(params.size()) + " parameters but " +
                      std::to_string(state.velocity.size()) + " momentum buffers");
  }
  const Scalar lr = Scalar(opt.lr);
  const Scalar momentum = Scalar(opt.momentum);
  const Scalar decay = Scalar(opt.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<Scalar>& p = *params[i];
    auto& v = state.velocity[i];
    if (v.size() != p.size()) throw ConfigError("sgd_step: shape mismatch for parameter " +
                                                std::to_string(i));
    const auto& g = p.grad();
    v = momentum * v + (g + decay * p.values());
    p.values() -= lr * v;
  }
}

template <typename Scalar>
struct LossResult {
  double loss = 0.0;
  Tensor<Scalar> grad;  // d loss / d logits
};

/// Mean negative log-likelihood of softmax(logits) at the true labels.
/// Logits are (N, C, 1, 1) or any (N, C*H*W) layout.
template <typename Scalar>
LossResult<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels) {
  const Index n = logits.shape().n;
  const Index classes = logits.shape().item();
  if (Index(labels.size()) != n) {
    throw ConfigError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                      std::to_string(n));
  }
  LossResult<Scalar> out{0.0, Tensor<Scalar>(logits.shape())};
  auto z = logits.rows();
  auto g = out.grad.rows();
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= classes) {
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                      std::to_string(classes) + ")");
    }
    const Scalar peak = z.row(i).maxCoeff();
    const auto e = (z.row(i).array() - peak).exp();
    const Scalar sum = e.sum();
    total += double(std::log(sum) - (z(i, y) - peak));
    g.row(i) = (e / sum).matrix();
    g(i, y) -= Scalar(1);
  }
  g /= Scalar(n);
  out.loss = total / double(n);
  return out;
}

/// Fraction of rows whose true label ranks among the k largest logits;
/// ties rank the lower class index first.
template <typename Scalar>
double topk_accuracy(const Tensor<Scalar>& logits, std::span<const int> labels, int k) {
  const Index n = logits.shape().n;
  const Index classes = logits.shape().item();
  if (k < 1 || k > classes) {
    throw ConfigError("topk_accuracy: k=" + std::to_string(k) + " outside [1, " +
                      std::to_string(classes) + "]");
  }
  if (Index(labels.size()) != n) throw ConfigError("topk_accuracy: label count mismatch");
  if (n == 0) return 0.0;
  auto z = logits.rows();
  Index hits = 0;
  for (Index i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= classes) throw DataError("topk_accuracy: label out of range");
    Index rank = 0;
    for (Index j = 0; j < classes; ++j) {
      if (z(i, j) > z(i, y) || (z(i, j) == z(i, y) && j < y)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return double(hits) / double(n);
}

}  // namespace ulsam
