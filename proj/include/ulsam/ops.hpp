#pragma once

// Pooling, normalisation, activation and tensor-plumbing kernels.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ulsam/mac_counter.hpp"
#include "ulsam/tensor.hpp"

namespace ulsam {

// ---------------------------------------------------------------------------
// 3x3 max pooling, padding 1, stride 1. Padded cells act as -inf.

template <typename Scalar>
Tensor<Scalar> maxpool_3x3_p1(const Tensor<Scalar>& x) {
  const Shape& s = x.shape();
  if (s.h < 1 || s.w < 1) throw ConfigError("maxpool_3x3_p1: spatial extents must be >= 1");
  Tensor<Scalar> y(s);
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      const Scalar* src = x.channel(n, c);
      Scalar* dst = y.channel(n, c);
      for (Index i = 0; i < s.h; ++i) {
        for (Index j = 0; j < s.w; ++j) {
          Scalar best = -std::numeric_limits<Scalar>::infinity();
          for (Index ii = std::max<Index>(i - 1, 0); ii <= std::min(i + 1, s.h - 1); ++ii) {
            for (Index jj = std::max<Index>(j - 1, 0); jj <= std::min(j + 1, s.w - 1); ++jj) {
              best = std::max(best, src[ii * s.w + jj]);
            }
          }
          dst[i * s.w + j] = best;
        }
      }
    }
  }
  return y;
}

/// Routes each upstream value to the first maximum of its window in
/// row-major scan order.
template <typename Scalar>
Tensor<Scalar> maxpool_3x3_p1_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& dy) {
  const Shape& s = x.shape();
  if (!(dy.shape() == s)) {
    throw ConfigError("maxpool_3x3_p1: upstream gradient shape " + to_string(dy.shape()) +
                      ", expected " + to_string(s));
  }
  Tensor<Scalar> dx(s);
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      const Scalar* src = x.channel(n, c);
      const Scalar* up = dy.channel(n, c);
      Scalar* dst = dx.channel(n, c);
      for (Index i = 0; i < s.h; ++i) {
        for (Index j = 0; j < s.w; ++j) {
          Index arg = -1;
          Scalar best = -std::numeric_limits<Scalar>::infinity();
          for (Index ii = std::max<Index>(i - 1, 0); ii <= std::min(i + 1, s.h - 1); ++ii) {
            for (Index jj = std::max<Index>(j - 1, 0); jj <= std::min(j + 1, s.w - 1); ++jj) {
              if (arg < 0 || src[ii * s.w + jj] > best) {
                best = src[ii * s.w + jj];
                arg = ii * s.w + jj;
              }
            }
          }
          dst[arg] += up[i * s.w + j];
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Softmax over the flattened h*w positions of a single-channel map.

template <typename Scalar>
Tensor<Scalar> spatial_softmax(const Tensor<Scalar>& x) {
  const Shape& s = x.shape();
  if (s.c != 1) {
    throw ConfigError("spatial_softmax: expected 1 channel, got " + std::to_string(s.c));
  }
  Tensor<Scalar> y(s);
  const Index hw = s.plane();
  for (Index n = 0; n < s.n; ++n) {
    const Scalar* src = x.channel(n, 0);
    Scalar* dst = y.channel(n, 0);
    Scalar peak = -std::numeric_limits<Scalar>::infinity();
    for (Index i = 0; i < hw; ++i) peak = std::max(peak, src[i]);
    // Neumaier-compensated normaliser.
    Scalar sum(0);
    Scalar comp(0);
    for (Index i = 0; i < hw; ++i) {
      const Scalar e = std::exp(src[i] - peak);
      dst[i] = e;
      const Scalar t = sum + e;
      comp += std::abs(sum) >= std::abs(e) ? (sum - t) + e : (e - t) + sum;
      sum = t;
    }
    const Scalar total = sum + comp;
    for (Index i = 0; i < hw; ++i) dst[i] /= total;
  }
  return y;
}

/// Backward from the softmax output `y`.
template <typename Scalar>
Tensor<Scalar> spatial_softmax_backward(const Tensor<Scalar>& y, const Tensor<Scalar>& dy) {
  const Shape& s = y.shape();
  if (!(dy.shape() == s)) throw ConfigError("spatial_softmax: upstream gradient shape mismatch");
  Tensor<Scalar> dx(s);
  const Index hw = s.plane();
  for (Index n = 0; n < s.n; ++n) {
    const Scalar* out = y.channel(n, 0);
    const Scalar* up = dy.channel(n, 0);
    Scalar dot(0);
    for (Index i = 0; i < hw; ++i) dot += up[i] * out[i];
    Scalar* dst = dx.channel(n, 0);
    for (Index i = 0; i < hw; ++i) dst[i] = out[i] * (up[i] - dot);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// (A (x) F) (+) F with A broadcast over channels.

namespace detail {
template <typename Scalar>
void check_broadcast(const Tensor<Scalar>& f, const Tensor<Scalar>& a) {
  const Shape& fs = f.shape();
  const Shape& as = a.shape();
  if (as.c != 1) throw ConfigError("broadcast_mul_add: attention must have 1 channel");
  if (as.n != fs.n) throw ConfigError("broadcast_mul_add: batch mismatch");
  if (as.h != fs.h) {
    throw ConfigError("broadcast_mul_add: attention height " + std::to_string(as.h) +
                      " != feature height " + std::to_string(fs.h));
  }
  if (as.w != fs.w) {
    throw ConfigError("broadcast_mul_add: attention width " + std::to_string(as.w) +
                      " != feature width " + std::to_string(fs.w));
  }
}
}  // namespace detail

template <typename Scalar>
Tensor<Scalar> broadcast_mul_add(const Tensor<Scalar>& f, const Tensor<Scalar>& a) {
  detail::check_broadcast(f, a);
  const Shape& s = f.shape();
  Tensor<Scalar> y(s);
  for (Index n = 0; n < s.n; ++n) {
    const Scalar* att = a.channel(n, 0);
    for (Index c = 0; c < s.c; ++c) {
      const Scalar* src = f.channel(n, c);
      Scalar* dst = y.channel(n, c);
      for (Index i = 0; i < s.plane(); ++i) {
        const Scalar weighted = att[i] * src[i];
        dst[i] = weighted + src[i];
      }
    }
  }
  return y;
}

template <typename Scalar>
struct BroadcastGrads {
  Tensor<Scalar> features;
  Tensor<Scalar> attention;
};

template <typename Scalar>
BroadcastGrads<Scalar> broadcast_mul_add_backward(const Tensor<Scalar>& f, const Tensor<Scalar>& a,
                                                  const Tensor<Scalar>& dy) {
  detail::check_broadcast(f, a);
  const Shape& s = f.shape();
  BroadcastGrads<Scalar> g{Tensor<Scalar>(s), Tensor<Scalar>(a.shape())};
  for (Index n = 0; n < s.n; ++n) {
    const Scalar* att = a.channel(n, 0);
    Scalar* datt = g.attention.channel(n, 0);
    for (Index c = 0; c < s.c; ++c) {
      const Scalar* src = f.channel(n, c);
      const Scalar* up = dy.channel(n, c);
      Scalar* dsrc = g.features.channel(n, c);
      for (Index i = 0; i < s.plane(); ++i) {
        dsrc[i] = up[i] * (att[i] + Scalar(1));
        datt[i] += up[i] * src[i];
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Channel concatenation and slicing.

template <typename Scalar>
Tensor<Scalar> channel_concat(std::span<const Tensor<Scalar>> parts) {
  if (parts.empty()) throw ConfigError("channel_concat: no parts");
  const Shape& first = parts.front().shape();
  Index channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.n != first.n) throw ConfigError("channel_concat: batch mismatch");
    if (s.h != first.h || s.w != first.w) {
      throw ConfigError("channel_concat: spatial mismatch " + to_string(s) + " vs " +
                        to_string(first));
    }
    channels += s.c;
  }
  Tensor<Scalar> y(first.n, channels, first.h, first.w);
  for (Index n = 0; n < first.n; ++n) {
    Index offset = 0;
    for (const auto& p : parts) {
      y.item(n).middleRows(offset, p.shape().c) = p.item(n);
      offset += p.shape().c;
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> channel_slice(const Tensor<Scalar>& x, Index begin, Index count) {
  const Shape& s = x.shape();
  if (begin < 0 || count < 0 || begin + count > s.c) {
    throw ConfigError("channel_slice: range out of bounds");
  }
  Tensor<Scalar> y(s.n, count, s.h, s.w);
  for (Index n = 0; n < s.n; ++n) y.item(n) = x.item(n).middleRows(begin, count);
  return y;
}

// ---------------------------------------------------------------------------
// Global average pooling: (N, C, H, W) -> (N, C, 1, 1).

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  const Shape& s = x.shape();
  if (s.plane() == 0) throw ConfigError("global_avg_pool: empty spatial extent");
  Tensor<Scalar> y(s.n, s.c, 1, 1);
  for (Index n = 0; n < s.n; ++n) {
    y.item(n).col(0) = x.item(n).rowwise().sum() / Scalar(s.plane());
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Shape& input, const Tensor<Scalar>& dy) {
  if (!(dy.shape() == Shape{input.n, input.c, 1, 1})) {
    throw ConfigError("global_avg_pool: upstream gradient shape " + to_string(dy.shape()));
  }
  Tensor<Scalar> dx(input);
  const Scalar inv = Scalar(1) / Scalar(input.plane());
  for (Index n = 0; n < input.n; ++n) {
    for (Index c = 0; c < input.c; ++c) dx.item(n).row(c).setConstant(dy(n, c, 0, 0) * inv);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Fully connected: input flattened to (N, M); weight (out, M, 1, 1); bias
// (1, out, 1, 1). Output (N, out, 1, 1).

template <typename Scalar>
struct DenseGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
};

namespace detail {
template <typename Scalar>
void check_dense(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>* bias) {
  if (x.shape().item() != weight.shape().c) {
    throw ConfigError("fully_connected: input features " + std::to_string(x.shape().item()) +
                      " != weight in_features " + std::to_string(weight.shape().c));
  }
  if (weight.shape().h != 1 || weight.shape().w != 1) {
    throw ConfigError("fully_connected: weight must be (out, in, 1, 1)");
  }
  if (bias && bias->size() != weight.shape().n) {
    throw ConfigError("fully_connected: bias length " + std::to_string(bias->size()) +
                      " != out_features " + std::to_string(weight.shape().n));
  }
}
}  // namespace detail

template <typename Scalar>
Tensor<Scalar> fully_connected(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                               const Tensor<Scalar>* bias) {
  detail::check_dense(x, weight, bias);
  const Index out = weight.shape().n;
  Tensor<Scalar> y(x.shape().n, out, 1, 1);
  y.rows().noalias() = x.rows() * weight.rows().transpose();
  if (bias) {
    for (Index n = 0; n < x.shape().n; ++n) {
      y.rows().row(n) += bias->rows().row(0);
    }
  }
  MacCounter::local().add(OpKind::FullyConnected, x.shape().n * x.shape().item() * out);
  return y;
}

template <typename Scalar>
DenseGrads<Scalar> fully_connected_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                                            const Tensor<Scalar>& dy) {
  detail::check_dense<Scalar>(x, weight, nullptr);
  if (!(dy.shape() == Shape{x.shape().n, weight.shape().n, 1, 1})) {
    throw ConfigError("fully_connected: upstream gradient shape " + to_string(dy.shape()));
  }
  DenseGrads<Scalar> g{Tensor<Scalar>(x.shape()), Tensor<Scalar>(weight.shape()),
                       Tensor<Scalar>(1, weight.shape().n, 1, 1)};
  g.input.rows().noalias() = dy.rows() * weight.rows();
  g.weight.rows().noalias() = dy.rows().transpose() * x.rows();
  g.bias.rows().row(0) = dy.rows().colwise().sum();
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise activations. Backward passes take the forward input.

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.shape());
  y.values() = x.values().max(Scalar(0));
  return y;
}

template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx(x.shape());
  dx.values() = (x.values() > Scalar(0)).select(dy.values(), Scalar(0));
  return dx;
}

template <typename Scalar>
Tensor<Scalar> relu6(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.shape());
  y.values() = x.values().max(Scalar(0)).min(Scalar(6));
  return y;
}

template <typename Scalar>
Tensor<Scalar> relu6_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx(x.shape());
  dx.values() =
      (x.values() > Scalar(0) && x.values() < Scalar(6)).select(dy.values(), Scalar(0));
  return dx;
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.shape());
  y.values() = Scalar(1) / (Scalar(1) + (-x.values()).exp());
  return y;
}

template <typename Scalar>
Tensor<Scalar> sigmoid_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& dy) {
  const Tensor<Scalar> y = sigmoid(x);
  Tensor<Scalar> dx(x.shape());
  dx.values() = dy.values() * y.values() * (Scalar(1) - y.values());
  return dx;
}

// ---------------------------------------------------------------------------
// Batch normalisation over (N, H, W) per channel.

enum class Mode { Train, Infer };

template <typename Scalar>
struct BatchNorm {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  Scalar momentum = Scalar(0.9);  // weight kept by the running statistics
  Scalar eps = Scalar(1e-5);

  explicit BatchNorm(Index channels = 0)
      : gamma(1, channels, 1, 1, Scalar(1)),
        beta(1, channels, 1, 1),
        running_mean(1, channels, 1, 1),
        running_var(1, channels, 1, 1, Scalar(1)) {}

  Index channels() const { return gamma.size(); }
};

template <typename Scalar>
struct BatchNormCache {
  Tensor<Scalar> normalized;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> inv_std;
  Mode mode = Mode::Infer;
};

template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& x, BatchNorm<Scalar>& bn, Mode mode,
                          BatchNormCache<Scalar>* cache = nullptr) {
  const Shape& s = x.shape();
  if (s.c != bn.channels()) {
    throw ConfigError("batch_norm: input channels " + std::to_string(s.c) + " != " +
                      std::to_string(bn.channels()));
  }
  const Index count = s.n * s.plane();
  Eigen::Array<Scalar, Eigen::Dynamic, 1> mean(s.c);
  Eigen::Array<Scalar, Eigen::Dynamic, 1> var(s.c);
  if (mode == Mode::Train) {
    if (count == 0) throw ConfigError("batch_norm: empty batch in training mode");
    mean.setZero();
    var.setZero();
    for (Index n = 0; n < s.n; ++n) mean += x.item(n).rowwise().sum().array();
    mean /= Scalar(count);
    for (Index n = 0; n < s.n; ++n) {
      var += (x.item(n).array().colwise() - mean).square().rowwise().sum();
    }
    var /= Scalar(count);
    const Scalar keep = bn.momentum;
    bn.running_mean.values() = keep * bn.running_mean.values() + (Scalar(1) - keep) * mean;
    bn.running_var.values() = keep * bn.running_var.values() + (Scalar(1) - keep) * var;
  } else {
    mean = bn.running_mean.values();
    var = bn.running_var.values();
  }
  const Eigen::Array<Scalar, Eigen::Dynamic, 1> inv_std = (var + bn.eps).rsqrt();
  Tensor<Scalar> xhat(s);
  Tensor<Scalar> y(s);
  for (Index n = 0; n < s.n; ++n) {
    xhat.item(n).array() = (x.item(n).array().colwise() - mean).colwise() * inv_std;
    y.item(n).array() = (xhat.item(n).array().colwise() * bn.gamma.values()).colwise() +
                        bn.beta.values();
  }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = inv_std;
    cache->mode = mode;
  }
  return y;
}

template <typename Scalar>
struct BatchNormGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
};

template <typename Scalar>
BatchNormGrads<Scalar> batch_norm_backward(const BatchNorm<Scalar>& bn,
                                           const BatchNormCache<Scalar>& cache,
                                           const Tensor<Scalar>& dy) {
  const Shape& s = dy.shape();
  if (!(cache.normalized.shape() == s)) throw StateError("batch_norm: backward without forward");
  const Index count = s.n * s.plane();
  BatchNormGrads<Scalar> g{Tensor<Scalar>(s), Tensor<Scalar>(1, s.c, 1, 1),
                           Tensor<Scalar>(1, s.c, 1, 1)};
  Eigen::Array<Scalar, Eigen::Dynamic, 1> sum_dy = Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(s.c);
  Eigen::Array<Scalar, Eigen::Dynamic, 1> sum_dy_xhat =
      Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(s.c);
  for (Index n = 0; n < s.n; ++n) {
    sum_dy += dy.item(n).array().rowwise().sum();
    sum_dy_xhat += (dy.item(n).array() * cache.normalized.item(n).array()).rowwise().sum();
  }
  g.gamma.values() = sum_dy_xhat;
  g.beta.values() = sum_dy;
  const auto scale = bn.gamma.values() * cache.inv_std;
  for (Index n = 0; n < s.n; ++n) {
    if (cache.mode == Mode::Train) {
      g.input.item(n).array() =
          ((dy.item(n).array().colwise() - sum_dy / Scalar(count)) -
           cache.normalized.item(n).array().colwise() * (sum_dy_xhat / Scalar(count)))
              .colwise() *
          scale;
    } else {
      g.input.item(n).array() = dy.item(n).array().colwise() * scale;
    }
  }
  return g;
}

}  // namespace ulsam
