#pragma once

// Subspace attention (ULSAM) and a squeeze-excitation baseline.
//
// For each contiguous group of G = m / g channels F_n:
//   A_n  = softmax_hw( pw_n . maxpool3x3p1( dw_n * F_n ) )
//   F^_n = A_n * F_n + F_n
// and the block output is the channel concatenation of all F^_n.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "ulsam/conv.hpp"
#include "ulsam/ops.hpp"

namespace ulsam {

struct UlsamConfig {
  Index channels = 0;
  Index groups = 1;

  Index group_size() const { return channels / groups; }

  void validate() const {
    if (channels <= 0) throw ConfigError("ulsam: channels must be positive");
    if (groups <= 0 || groups > channels) {
      throw ConfigError("ulsam: groups " + std::to_string(groups) + " outside [1, " +
                        std::to_string(channels) + "]");
    }
    if (channels % groups != 0) {
      throw ConfigError("ulsam: groups " + std::to_string(groups) + " does not divide channels " +
                        std::to_string(channels));
    }
  }

  /// 2m: one depthwise scalar and one pointwise scalar per channel,
  /// whatever the grouping.
  std::int64_t parameter_count() const { return 2 * channels; }
};

/// Depthwise 1x1 weights have shape (m, 1, 1, 1); the g single-filter
/// pointwise convolutions are stacked as (g, G, 1, 1). Channel c of either
/// tensor is flat element c.
template <typename Scalar>
struct UlsamWeights {
  Tensor<Scalar> depthwise;
  Tensor<Scalar> pointwise;

  static UlsamWeights zeros(const UlsamConfig& cfg) {
    cfg.validate();
    return {Tensor<Scalar>(cfg.channels, 1, 1, 1),
            Tensor<Scalar>(cfg.groups, cfg.group_size(), 1, 1)};
  }

  /// Zero-mean normal with variance 2 / G.
  template <typename Rng>
  static UlsamWeights random(const UlsamConfig& cfg, Rng& rng) {
    UlsamWeights w = zeros(cfg);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(cfg.group_size())));
    for (Index i = 0; i < w.depthwise.size(); ++i) w.depthwise[i] = Scalar(dist(rng));
    for (Index i = 0; i < w.pointwise.size(); ++i) w.pointwise[i] = Scalar(dist(rng));
    return w;
  }

  void check(const UlsamConfig& cfg) const {
    if (depthwise.size() != cfg.channels) {
      throw ConfigError("ulsam: depthwise weight count " + std::to_string(depthwise.size()) +
                        " != channels " + std::to_string(cfg.channels));
    }
    if (pointwise.size() != cfg.channels) {
      throw ConfigError("ulsam: pointwise weight count " + std::to_string(pointwise.size()) +
                        " != channels " + std::to_string(cfg.channels));
    }
  }

  std::int64_t parameter_count() const { return depthwise.size() + pointwise.size(); }
};

/// Contiguous channel slices [k*G, (k+1)*G) for k = 0..g-1.
template <typename Scalar>
std::vector<Tensor<Scalar>> split_groups(const Tensor<Scalar>& f, Index groups) {
  const Index m = f.shape().c;
  if (groups <= 0 || m % groups != 0) {
    throw ConfigError("split_groups: groups " + std::to_string(groups) +
                      " does not divide channels " + std::to_string(m));
  }
  const Index size = m / groups;
  std::vector<Tensor<Scalar>> parts;
  parts.reserve(static_cast<std::size_t>(groups));
  for (Index k = 0; k < groups; ++k) parts.push_back(channel_slice(f, k * size, size));
  return parts;
}

namespace detail {

// Total order on values used to make the pointwise reduction independent of
// channel order: ascending by value, -0 before +0.
template <typename Scalar>
bool reduction_before(Scalar a, Scalar b) {
  if (a < b) return true;
  if (b < a) return false;
  return std::signbit(a) && !std::signbit(b);
}

// Single-filter pointwise convolution over G channels. Products are summed
// in sorted order so permuting channels (with their weights) gives bitwise
// the same logits.
template <typename Scalar>
Tensor<Scalar> single_filter_pointwise(const Tensor<Scalar>& p, std::span<const Scalar> weights) {
  const Shape& s = p.shape();
  Tensor<Scalar> out(s.n, 1, s.h, s.w);
  std::vector<Scalar> terms(static_cast<std::size_t>(s.c));
  for (Index n = 0; n < s.n; ++n) {
    Scalar* dst = out.channel(n, 0);
    for (Index i = 0; i < s.plane(); ++i) {
      for (Index c = 0; c < s.c; ++c) terms[c] = weights[c] * p.channel(n, c)[i];
      std::sort(terms.begin(), terms.end(), reduction_before<Scalar>);
      Scalar acc = terms[0];
      for (std::size_t c = 1; c < terms.size(); ++c) acc += terms[c];
      dst[i] = acc;
    }
  }
  MacCounter::local().add(OpKind::Pointwise, s.n * s.c * s.plane());
  return out;
}

template <typename Scalar>
ConvSpec<Scalar> depthwise_1x1(std::span<const Scalar> weights) {
  auto spec = ConvSpec<Scalar>::depthwise(Index(weights.size()), 1, 1, 0);
  std::copy(weights.begin(), weights.end(), spec.weight.data());
  return spec;
}

}  // namespace detail

/// Intermediates of one group's attention map; kept for the backward pass.
template <typename Scalar>
struct AttentionTrace {
  Tensor<Scalar> scaled;   // dw * F
  Tensor<Scalar> pooled;   // maxpool(dw * F)
  Tensor<Scalar> attention;
};

template <typename Scalar>
AttentionTrace<Scalar> attention_trace(const Tensor<Scalar>& group, std::span<const Scalar> dw,
                                       std::span<const Scalar> pw) {
  const Index g_size = group.shape().c;
  if (Index(dw.size()) != g_size || Index(pw.size()) != g_size) {
    throw ConfigError("attention_map: weight lengths must equal group size " +
                      std::to_string(g_size));
  }
  MacCategoryScope scope(OpKind::Attention);
  AttentionTrace<Scalar> t;
  t.scaled = depthwise_conv(group, detail::depthwise_1x1(dw));
  t.pooled = maxpool_3x3_p1(t.scaled);
  t.attention = spatial_softmax(detail::single_filter_pointwise(t.pooled, pw));
  return t;
}

/// softmax(PW(maxpool(DW(F_n)))) for one group; output (N, 1, h, w).
template <typename Scalar>
Tensor<Scalar> attention_map(const Tensor<Scalar>& group, std::span<const Scalar> dw,
                             std::span<const Scalar> pw) {
  return attention_trace(group, dw, pw).attention;
}

namespace detail {
template <typename Scalar>
std::span<const Scalar> group_span(const Tensor<Scalar>& t, Index k, Index size) {
  return {t.data() + k * size, static_cast<std::size_t>(size)};
}
}  // namespace detail

/// Attention maps of all groups stacked as (N, g, h, w).
template <typename Scalar>
Tensor<Scalar> ulsam_attention_maps(const Tensor<Scalar>& f, const UlsamConfig& cfg,
                                    const UlsamWeights<Scalar>& w) {
  cfg.validate();
  w.check(cfg);
  if (f.shape().c != cfg.channels) {
    throw ConfigError("ulsam: input channels " + std::to_string(f.shape().c) + " != " +
                      std::to_string(cfg.channels));
  }
  const Index size = cfg.group_size();
  const auto groups = split_groups(f, cfg.groups);
  std::vector<Tensor<Scalar>> maps;
  for (Index k = 0; k < cfg.groups; ++k) {
    maps.push_back(attention_map(groups[k], detail::group_span(w.depthwise, k, size),
                                 detail::group_span(w.pointwise, k, size)));
  }
  return channel_concat<Scalar>(maps);
}

template <typename Scalar>
struct UlsamGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> depthwise;
  Tensor<Scalar> pointwise;
};

/// ULSAM block with a recorded forward pass for backpropagation.
template <typename Scalar>
class UlsamBlock {
 public:
  UlsamBlock(UlsamConfig cfg, UlsamWeights<Scalar> weights)
      : cfg_(cfg), weights_(std::move(weights)) {
    cfg_.validate();
    weights_.check(cfg_);
  }

  const UlsamConfig& config() const { return cfg_; }
  UlsamWeights<Scalar>& weights() { return weights_; }
  const UlsamWeights<Scalar>& weights() const { return weights_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& f) {
    if (f.shape().c != cfg_.channels) {
      throw ConfigError("ulsam: input channels " + std::to_string(f.shape().c) + " != " +
                        std::to_string(cfg_.channels));
    }
    const Index size = cfg_.group_size();
    groups_ = split_groups(f, cfg_.groups);
    traces_.clear();
    std::vector<Tensor<Scalar>> outputs;
    for (Index k = 0; k < cfg_.groups; ++k) {
      traces_.push_back(attention_trace(groups_[k], detail::group_span(weights_.depthwise, k, size),
                                        detail::group_span(weights_.pointwise, k, size)));
      outputs.push_back(broadcast_mul_add(groups_[k], traces_.back().attention));
    }
    input_shape_ = f.shape();
    return channel_concat<Scalar>(outputs);
  }

  UlsamGrads<Scalar> backward(const Tensor<Scalar>& dy) const {
    if (!input_shape_) throw StateError("ulsam: backward called before forward");
    if (!(dy.shape() == *input_shape_)) {
      throw ConfigError("ulsam: upstream gradient shape " + to_string(dy.shape()) +
                        ", expected " + to_string(*input_shape_));
    }
    const Index size = cfg_.group_size();
    UlsamGrads<Scalar> g{Tensor<Scalar>(dy.shape()), Tensor<Scalar>(weights_.depthwise.shape()),
                         Tensor<Scalar>(weights_.pointwise.shape())};
    std::vector<Tensor<Scalar>> dinputs;
    for (Index k = 0; k < cfg_.groups; ++k) {
      const Tensor<Scalar> up = channel_slice(dy, k * size, size);
      const Tensor<Scalar>& feat = groups_[k];
      const AttentionTrace<Scalar>& tr = traces_[k];
      auto bg = broadcast_mul_add_backward(feat, tr.attention, up);
      const Tensor<Scalar> dlogits = spatial_softmax_backward(tr.attention, bg.attention);

      // Single-filter pointwise: logits = sum_c pw_c * pooled_c.
      const Shape& ps = tr.pooled.shape();
      Tensor<Scalar> dpooled(ps);
      for (Index c = 0; c < size; ++c) {
        const Scalar pw = weights_.pointwise[k * size + c];
        Scalar dpw(0);
        for (Index n = 0; n < ps.n; ++n) {
          const Scalar* dl = dlogits.channel(n, 0);
          const Scalar* pooled = tr.pooled.channel(n, c);
          Scalar* dp = dpooled.channel(n, c);
          for (Index i = 0; i < ps.plane(); ++i) {
            dpw += dl[i] * pooled[i];
            dp[i] = pw * dl[i];
          }
        }
        g.pointwise[k * size + c] = dpw;
      }
      const Tensor<Scalar> dscaled = maxpool_3x3_p1_backward(tr.scaled, dpooled);
      auto dw_grads = depthwise_conv_backward(
          feat, detail::depthwise_1x1(detail::group_span(weights_.depthwise, k, size)), dscaled);
      for (Index c = 0; c < size; ++c) g.depthwise[k * size + c] = dw_grads.weight[c];
      bg.features.values() += dw_grads.input.values();
      dinputs.push_back(std::move(bg.features));
    }
    g.input = channel_concat<Scalar>(dinputs);
    return g;
  }

 private:
  UlsamConfig cfg_;
  UlsamWeights<Scalar> weights_;
  std::vector<Tensor<Scalar>> groups_;
  std::vector<AttentionTrace<Scalar>> traces_;
  std::optional<Shape> input_shape_;
};

/// Stateless forward.
template <typename Scalar>
Tensor<Scalar> ulsam_forward(const Tensor<Scalar>& f, const UlsamConfig& cfg,
                             const UlsamWeights<Scalar>& w) {
  UlsamBlock<Scalar> block(cfg, w);
  return block.forward(f);
}

/// Closed form for g == m (G == 1): per channel,
/// softmax(a2 * maxpool(a1 * F_c)), computed with scalar arithmetic.
/// Returns the (N, m, h, w) stack of attention maps.
template <typename Scalar>
Tensor<Scalar> case3_reduction_check(const Tensor<Scalar>& f, const UlsamConfig& cfg,
                                     const UlsamWeights<Scalar>& w) {
  cfg.validate();
  w.check(cfg);
  if (cfg.groups != cfg.channels) {
    throw ConfigError("case3_reduction_check: requires g == m, got g=" +
                      std::to_string(cfg.groups) + " m=" + std::to_string(cfg.channels));
  }
  const Shape& s = f.shape();
  if (s.c != cfg.channels) throw ConfigError("case3_reduction_check: channel mismatch");
  Tensor<Scalar> maps(s);
  for (Index c = 0; c < s.c; ++c) {
    const Scalar a1 = w.depthwise[c];
    const Scalar a2 = w.pointwise[c];
    Tensor<Scalar> scaled = channel_slice(f, c, 1);
    scaled.values() = a1 * scaled.values();
    Tensor<Scalar> logits = maxpool_3x3_p1(scaled);
    logits.values() = a2 * logits.values();
    const Tensor<Scalar> a = spatial_softmax(logits);
    for (Index n = 0; n < s.n; ++n) maps.item(n).row(c) = a.item(n).row(0);
  }
  return maps;
}

// ---------------------------------------------------------------------------
// Squeeze-excitation: F scaled per channel by sigmoid(W2 relu(W1 gap(F))).

struct SeConfig {
  Index channels = 0;
  Index reduction = 16;

  Index hidden() const { return channels / reduction; }

  void validate() const {
    if (channels <= 0 || reduction <= 0) throw ConfigError("se: channels and r must be positive");
    if (channels % reduction != 0) {
      throw ConfigError("se: reduction " + std::to_string(reduction) +
                        " does not divide channels " + std::to_string(channels));
    }
  }

  std::int64_t parameter_count() const { return 2 * channels * channels / reduction; }
};

/// squeeze: (m/r, m, 1, 1); excite: (m, m/r, 1, 1). No biases.
template <typename Scalar>
struct SeWeights {
  Tensor<Scalar> squeeze;
  Tensor<Scalar> excite;

  static SeWeights zeros(const SeConfig& cfg) {
    cfg.validate();
    return {Tensor<Scalar>(cfg.hidden(), cfg.channels, 1, 1),
            Tensor<Scalar>(cfg.channels, cfg.hidden(), 1, 1)};
  }

  std::int64_t parameter_count() const { return squeeze.size() + excite.size(); }
};

template <typename Scalar>
struct SeGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> squeeze;
  Tensor<Scalar> excite;
};

template <typename Scalar>
class SeBlock {
 public:
  SeBlock(SeConfig cfg, SeWeights<Scalar> weights) : cfg_(cfg), weights_(std::move(weights)) {
    cfg_.validate();
    if (!(weights_.squeeze.shape() == Shape{cfg_.hidden(), cfg_.channels, 1, 1}) ||
        !(weights_.excite.shape() == Shape{cfg_.channels, cfg_.hidden(), 1, 1})) {
      throw ConfigError("se: weight shapes must be (m/r, m) and (m, m/r)");
    }
  }

  SeWeights<Scalar>& weights() { return weights_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& f) {
    if (f.shape().c != cfg_.channels) throw ConfigError("se: input channel mismatch");
    input_ = f;
    pooled_ = global_avg_pool(f);
    hidden_pre_ = fully_connected<Scalar>(pooled_, weights_.squeeze, nullptr);
    hidden_ = relu(hidden_pre_);
    gate_pre_ = fully_connected<Scalar>(hidden_, weights_.excite, nullptr);
    gate_ = sigmoid(gate_pre_);
    Tensor<Scalar> y(f.shape());
    for (Index n = 0; n < f.shape().n; ++n) {
      y.item(n) = gate_.item(n).col(0).asDiagonal() * f.item(n);
    }
    has_forward_ = true;
    return y;
  }

  SeGrads<Scalar> backward(const Tensor<Scalar>& dy) const {
    if (!has_forward_) throw StateError("se: backward called before forward");
    const Shape& s = input_.shape();
    SeGrads<Scalar> g;
    g.input = Tensor<Scalar>(s);
    Tensor<Scalar> dgate(s.n, s.c, 1, 1);
    for (Index n = 0; n < s.n; ++n) {
      g.input.item(n) = gate_.item(n).col(0).asDiagonal() * dy.item(n);
      dgate.item(n).col(0) = (dy.item(n).array() * input_.item(n).array()).rowwise().sum();
    }
    const Tensor<Scalar> dgate_pre = sigmoid_backward(gate_pre_, dgate);
    auto ex = fully_connected_backward(hidden_, weights_.excite, dgate_pre);
    const Tensor<Scalar> dhidden_pre = relu_backward(hidden_pre_, ex.input);
    auto sq = fully_connected_backward(pooled_, weights_.squeeze, dhidden_pre);
    g.input.values() += global_avg_pool_backward(s, sq.input).values();
    g.squeeze = std::move(sq.weight);
    g.excite = std::move(ex.weight);
    return g;
  }

 private:
  SeConfig cfg_;
  SeWeights<Scalar> weights_;
  Tensor<Scalar> input_, pooled_, hidden_pre_, hidden_, gate_pre_, gate_;
  bool has_forward_ = false;
};

template <typename Scalar>
Tensor<Scalar> se_forward(const Tensor<Scalar>& f, const SeConfig& cfg,
                          const SeWeights<Scalar>& w) {
  SeBlock<Scalar> block(cfg, w);
  return block.forward(f);
}

}  // namespace ulsam
