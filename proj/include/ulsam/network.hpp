#pragma once

// Runtime network instantiated from a ModelGraph: weights, forward pass
// with recorded intermediates, and reverse-mode backward pass.

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "ulsam/attention.hpp"
#include "ulsam/conv.hpp"
#include "ulsam/graph.hpp"
#include "ulsam/ops.hpp"

namespace ulsam {

/// A named tensor owned by the network. Buffers (BN running statistics)
/// are not trainable but are checkpointed.
template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar>* tensor = nullptr;
  bool trainable = true;
};

template <typename Scalar>
using TensorList = std::vector<NamedTensor<Scalar>>;

template <typename Scalar>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) = 0;
  /// Returns the input gradient and accumulates parameter gradients.
  virtual Tensor<Scalar> backward(const Tensor<Scalar>& dy) = 0;
  virtual void collect(TensorList<Scalar>&) {}
};

namespace detail {

inline void accumulate_grad(auto& param, const auto& grad) { param.grad() += grad.values(); }

template <typename Scalar>
void require_forward(const Tensor<Scalar>& cached, const char* what) {
  if (cached.empty()) throw StateError(std::string(what) + ": backward called before forward");
}

template <typename Scalar, typename Rng>
void fill_normal(Tensor<Scalar>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Index i = 0; i < t.size(); ++i) t[i] = Scalar(dist(rng));
}

}  // namespace detail

/// Convolution, optional batch norm, optional activation.
template <typename Scalar>
class ConvUnit : public Layer<Scalar> {
 public:
  template <typename Rng>
  ConvUnit(std::string name, ConvSpec<Scalar> spec, bool batch_norm, Activation act, Rng& rng)
      : name_(std::move(name)), spec_(std::move(spec)), act_(act) {
    spec_.validate();
    const Index fan_in = spec_.weight.shape().c * spec_.kernel * spec_.kernel;
    detail::fill_normal(spec_.weight, std::sqrt(2.0 / double(fan_in)), rng);
    if (batch_norm) bn_.emplace(spec_.out_channels);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override {
    input_ = x;
    Tensor<Scalar> y = conv2d(x, spec_);
    if (bn_) y = batch_norm(y, *bn_, mode, &bn_cache_);
    pre_act_ = y;
    switch (act_) {
      case Activation::Relu: return relu(y);
      case Activation::Relu6: return relu6(y);
      case Activation::None: break;
    }
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    detail::require_forward(input_, name_.c_str());
    Tensor<Scalar> d;
    switch (act_) {
      case Activation::Relu: d = relu_backward(pre_act_, dy); break;
      case Activation::Relu6: d = relu6_backward(pre_act_, dy); break;
      case Activation::None: d = dy; break;
    }
    if (bn_) {
      auto g = batch_norm_backward(*bn_, bn_cache_, d);
      detail::accumulate_grad(bn_->gamma, g.gamma);
      detail::accumulate_grad(bn_->beta, g.beta);
      d = std::move(g.input);
    }
    auto g = conv2d_backward(input_, spec_, d);
    detail::accumulate_grad(spec_.weight, g.weight);
    if (spec_.bias) detail::accumulate_grad(*spec_.bias, *g.bias);
    return std::move(g.input);
  }

  void collect(TensorList<Scalar>& out) override {
    out.push_back({name_ + ".weight", &spec_.weight, true});
    if (spec_.bias) out.push_back({name_ + ".bias", &*spec_.bias, true});
    if (bn_) {
      out.push_back({name_ + ".bn.gamma", &bn_->gamma, true});
      out.push_back({name_ + ".bn.beta", &bn_->beta, true});
      out.push_back({name_ + ".bn.running_mean", &bn_->running_mean, false});
      out.push_back({name_ + ".bn.running_var", &bn_->running_var, false});
    }
  }

 private:
  std::string name_;
  ConvSpec<Scalar> spec_;
  Activation act_;
  std::optional<BatchNorm<Scalar>> bn_;
  BatchNormCache<Scalar> bn_cache_;
  Tensor<Scalar> input_;
  Tensor<Scalar> pre_act_;
};

/// Depthwise 3x3 + BN + act, then pointwise 1x1 + BN + act.
template <typename Scalar>
class DwsUnit : public Layer<Scalar> {
 public:
  template <typename Rng>
  DwsUnit(const std::string& name, const LayerSpec& l, Rng& rng)
      : dw_(name + ".dw", ConvSpec<Scalar>::depthwise(l.in_channels, 3, l.stride, 1), true,
            l.activation, rng),
        pw_(name + ".pw", ConvSpec<Scalar>::pointwise(l.in_channels, l.out_channels), true,
            l.activation, rng) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override {
    return pw_.forward(dw_.forward(x, mode), mode);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    return dw_.backward(pw_.backward(dy));
  }
  void collect(TensorList<Scalar>& out) override {
    dw_.collect(out);
    pw_.collect(out);
  }

 private:
  ConvUnit<Scalar> dw_;
  ConvUnit<Scalar> pw_;
};

/// Inverted residual: [expand 1x1 + BN + act] -> dw 3x3 + BN + act ->
/// project 1x1 + BN, with identity skip when stride 1 and in == out.
template <typename Scalar>
class BottleneckUnit : public Layer<Scalar> {
 public:
  template <typename Rng>
  BottleneckUnit(const std::string& name, const LayerSpec& l, Rng& rng) : skip_(l.has_skip()) {
    const Index hidden = l.hidden_channels();
    if (l.expansion != 1) {
      expand_ = std::make_unique<ConvUnit<Scalar>>(
          name + ".expand", ConvSpec<Scalar>::pointwise(l.in_channels, hidden), true,
          l.activation, rng);
    }
    dw_ = std::make_unique<ConvUnit<Scalar>>(
        name + ".dw", ConvSpec<Scalar>::depthwise(hidden, 3, l.stride, 1), true, l.activation, rng);
    project_ = std::make_unique<ConvUnit<Scalar>>(
        name + ".project", ConvSpec<Scalar>::pointwise(hidden, l.out_channels), true,
        Activation::None, rng);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override {
    Tensor<Scalar> h = expand_ ? expand_->forward(x, mode) : x;
    Tensor<Scalar> y = project_->forward(dw_->forward(h, mode), mode);
    if (skip_) y.values() += x.values();
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    Tensor<Scalar> d = dw_->backward(project_->backward(dy));
    if (expand_) d = expand_->backward(d);
    if (skip_) d.values() += dy.values();
    return d;
  }

  void collect(TensorList<Scalar>& out) override {
    if (expand_) expand_->collect(out);
    dw_->collect(out);
    project_->collect(out);
  }

 private:
  bool skip_;
  std::unique_ptr<ConvUnit<Scalar>> expand_;
  std::unique_ptr<ConvUnit<Scalar>> dw_;
  std::unique_ptr<ConvUnit<Scalar>> project_;
};

template <typename Scalar>
class UlsamUnit : public Layer<Scalar> {
 public:
  template <typename Rng>
  UlsamUnit(std::string name, const LayerSpec& l, Rng& rng)
      : name_(std::move(name)),
        block_(UlsamConfig{l.in_channels, l.groups},
               UlsamWeights<Scalar>::random(UlsamConfig{l.in_channels, l.groups}, rng)) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode) override { return block_.forward(x); }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    auto g = block_.backward(dy);
    detail::accumulate_grad(block_.weights().depthwise, g.depthwise);
    detail::accumulate_grad(block_.weights().pointwise, g.pointwise);
    return std::move(g.input);
  }

  void collect(TensorList<Scalar>& out) override {
    out.push_back({name_ + ".dw", &block_.weights().depthwise, true});
    out.push_back({name_ + ".pw", &block_.weights().pointwise, true});
  }

  UlsamBlock<Scalar>& block() { return block_; }

 private:
  std::string name_;
  UlsamBlock<Scalar> block_;
};

template <typename Scalar>
class GapUnit : public Layer<Scalar> {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode) override {
    shape_ = x.shape();
    return global_avg_pool(x);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    return global_avg_pool_backward(shape_, dy);
  }

 private:
  Shape shape_{};
};

template <typename Scalar>
class FcUnit : public Layer<Scalar> {
 public:
  template <typename Rng>
  FcUnit(std::string name, const LayerSpec& l, Rng& rng)
      : name_(std::move(name)),
        weight_(l.out_channels, l.in_channels, 1, 1),
        bias_(1, l.out_channels, 1, 1) {
    detail::fill_normal(weight_, std::sqrt(1.0 / double(l.in_channels)), rng);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode) override {
    input_ = x;
    return fully_connected(x, weight_, &bias_);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    detail::require_forward(input_, name_.c_str());
    auto g = fully_connected_backward(input_, weight_, dy);
    detail::accumulate_grad(weight_, g.weight);
    detail::accumulate_grad(bias_, g.bias);
    return std::move(g.input);
  }
  void collect(TensorList<Scalar>& out) override {
    out.push_back({name_ + ".weight", &weight_, true});
    out.push_back({name_ + ".bias", &bias_, true});
  }

 private:
  std::string name_;
  Tensor<Scalar> weight_;
  Tensor<Scalar> bias_;
  Tensor<Scalar> input_;
};

/// Logits pass through; softmax is applied by the loss or at prediction.
template <typename Scalar>
class SoftmaxHeadUnit : public Layer<Scalar> {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode) override { return x; }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override { return dy; }
};

template <typename Scalar>
class Network {
 public:
  explicit Network(ModelGraph graph, std::uint64_t seed = 0) : graph_(std::move(graph)) {
    graph_.validate();
    std::mt19937_64 rng(seed);
    for (const auto& l : graph_.layers) layers_.push_back(make_layer(l, rng));
    for (auto& layer : layers_) layer->collect(tensors_);
  }

  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  const ModelGraph& graph() const { return graph_; }
  int num_classes() const { return graph_.output_channels(); }

  /// Logits of shape (N, num_classes, 1, 1).
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    const Shape& s = x.shape();
    if (s.n < 1) throw ConfigError("model_forward: empty batch");
    if (s.c != graph_.input_channels) {
      throw ConfigError("model_forward: input channels " + std::to_string(s.c) + ", expected " +
                        std::to_string(graph_.input_channels));
    }
    if (s.h < 1 || s.w < 1) {
      throw ConfigError("model_forward: input size " + std::to_string(s.h) + "x" +
                        std::to_string(s.w) + " is incompatible");
    }
    Tensor<Scalar> y = x;
    for (auto& layer : layers_) y = layer->forward(y, mode);
    forwarded_ = true;
    return y;
  }

  /// Accumulates gradients into every trainable tensor's grad buffer and
  /// returns the gradient with respect to the input.
  Tensor<Scalar> backward(const Tensor<Scalar>& dlogits) {
    if (!forwarded_) throw StateError("model_backward: called before forward");
    Tensor<Scalar> d = dlogits;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d);
    return d;
  }

  /// Trainable parameters and buffers, in graph order.
  TensorList<Scalar>& tensors() { return tensors_; }

  TensorList<Scalar> trainable() {
    TensorList<Scalar> out;
    for (const auto& t : tensors_) {
      if (t.trainable) out.push_back(t);
    }
    return out;
  }

  void zero_grad() {
    for (auto& t : tensors_) {
      if (t.trainable) {
        t.tensor->grad();
        t.tensor->zero_grad();
      }
    }
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& t : tensors_) {
      if (t.trainable) n += t.tensor->size();
    }
    return n;
  }

  Layer<Scalar>& layer(std::size_t i) { return *layers_.at(i); }

 private:
  template <typename Rng>
  std::unique_ptr<Layer<Scalar>> make_layer(const LayerSpec& l, Rng& rng) {
    const std::string name = l.label.empty() ? std::string(layer_kind_name(l.kind)) : l.label;
    switch (l.kind) {
      case LayerKind::Conv2d:
        return std::make_unique<ConvUnit<Scalar>>(
            name,
            l.kernel == 1
                ? ConvSpec<Scalar>::pointwise(l.in_channels, l.out_channels, l.bias)
                : ConvSpec<Scalar>::standard(l.in_channels, l.out_channels, l.kernel, l.stride,
                                             l.kernel / 2, l.bias),
            l.batch_norm, l.activation, rng);
      case LayerKind::DwsBlock: return std::make_unique<DwsUnit<Scalar>>(name, l, rng);
      case LayerKind::ResidualBottleneck:
        return std::make_unique<BottleneckUnit<Scalar>>(name, l, rng);
      case LayerKind::Ulsam: return std::make_unique<UlsamUnit<Scalar>>(name + ".ulsam", l, rng);
      case LayerKind::GlobalAvgPool: return std::make_unique<GapUnit<Scalar>>();
      case LayerKind::FullyConnected: return std::make_unique<FcUnit<Scalar>>("fc", l, rng);
      case LayerKind::SoftmaxHead: return std::make_unique<SoftmaxHeadUnit<Scalar>>();
    }
    throw ConfigError("network: unknown layer kind");
  }

  ModelGraph graph_;
  std::vector<std::unique_ptr<Layer<Scalar>>> layers_;
  TensorList<Scalar> tensors_;
  bool forwarded_ = false;
};

}  // namespace ulsam
