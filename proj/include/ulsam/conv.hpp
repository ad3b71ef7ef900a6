#pragma once

// Convolution kernels (cross-correlation, no kernel flip) with analytic
// backward passes. Standard and pointwise convolutions go through Eigen
// GEMM; depthwise convolution is a direct loop.

#include <optional>
#include <string>

#include "ulsam/mac_counter.hpp"
#include "ulsam/tensor.hpp"

namespace ulsam {

enum class ConvKind { Standard, Depthwise, Pointwise };

inline const char* conv_kind_name(ConvKind kind) {
  switch (kind) {
    case ConvKind::Standard: return "conv2d_standard";
    case ConvKind::Depthwise: return "depthwise_conv";
    case ConvKind::Pointwise: return "pointwise_conv";
  }
  return "conv";
}

/// Convolution hyper-parameters and weights.
///
/// Weight layout is (out_channels, in_channels, kernel, kernel) for standard
/// and pointwise kinds and (channels, 1, kernel, kernel) for depthwise.
/// The optional bias has shape (1, out_channels, 1, 1).
template <typename Scalar>
struct ConvSpec {
  ConvKind kind = ConvKind::Standard;
  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel = 1;
  Index stride = 1;
  Index padding = 0;
  Tensor<Scalar> weight;
  std::optional<Tensor<Scalar>> bias;

  static ConvSpec standard(Index in, Index out, Index kernel, Index stride, Index padding,
                           bool with_bias = false) {
    ConvSpec s;
    s.kind = ConvKind::Standard;
    s.in_channels = in;
    s.out_channels = out;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    s.weight = Tensor<Scalar>(out, in, kernel, kernel);
    if (with_bias) s.bias = Tensor<Scalar>(1, out, 1, 1);
    return s;
  }

  static ConvSpec depthwise(Index channels, Index kernel, Index stride, Index padding) {
    ConvSpec s;
    s.kind = ConvKind::Depthwise;
    s.in_channels = channels;
    s.out_channels = channels;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    s.weight = Tensor<Scalar>(channels, 1, kernel, kernel);
    return s;
  }

  static ConvSpec pointwise(Index in, Index out, bool with_bias = false) {
    ConvSpec s;
    s.kind = ConvKind::Pointwise;
    s.in_channels = in;
    s.out_channels = out;
    s.weight = Tensor<Scalar>(out, in, 1, 1);
    if (with_bias) s.bias = Tensor<Scalar>(1, out, 1, 1);
    return s;
  }

  Index output_extent(Index in) const { return (in + 2 * padding - kernel) / stride + 1; }

  void validate() const {
    const std::string op = conv_kind_name(kind);
    if (in_channels <= 0 || out_channels <= 0 || kernel <= 0) {
      throw ConfigError(op + ": channels and kernel must be positive");
    }
    if (stride <= 0 || padding < 0) {
      throw ConfigError(op + ": stride must be positive and padding non-negative");
    }
    Shape expected;
    switch (kind) {
      case ConvKind::Depthwise:
        if (out_channels != in_channels) {
          throw ConfigError(op + ": out_channels " + std::to_string(out_channels) +
                            " != in_channels " + std::to_string(in_channels));
        }
        expected = {in_channels, 1, kernel, kernel};
        break;
      case ConvKind::Pointwise:
        if (kernel != 1) throw ConfigError(op + ": kernel must be 1, got " + std::to_string(kernel));
        if (stride != 1 || padding != 0) {
          throw ConfigError(op + ": stride must be 1 and padding 0");
        }
        expected = {out_channels, in_channels, 1, 1};
        break;
      case ConvKind::Standard:
        expected = {out_channels, in_channels, kernel, kernel};
        break;
    }
    if (!(weight.shape() == expected)) {
      throw ConfigError(op + ": weight shape " + to_string(weight.shape()) + ", expected " +
                        to_string(expected));
    }
    if (bias && !(bias->shape() == Shape{1, out_channels, 1, 1})) {
      throw ConfigError(op + ": bias shape " + to_string(bias->shape()));
    }
  }

  /// Validates `input` against this spec and returns the output shape.
  Shape output_shape(const Shape& input) const {
    validate();
    const std::string op = conv_kind_name(kind);
    if (input.c != in_channels) {
      throw ConfigError(op + ": input channels " + std::to_string(input.c) +
                        " != in_channels " + std::to_string(in_channels));
    }
    if (input.h + 2 * padding < kernel) {
      throw ConfigError(op + ": input height " + std::to_string(input.h) +
                        " too small for kernel " + std::to_string(kernel));
    }
    if (input.w + 2 * padding < kernel) {
      throw ConfigError(op + ": input width " + std::to_string(input.w) +
                        " too small for kernel " + std::to_string(kernel));
    }
    return {input.n, out_channels, output_extent(input.h), output_extent(input.w)};
  }

  std::int64_t parameter_count() const {
    return weight.size() + (bias ? bias->size() : 0);
  }
};

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weight;
  std::optional<Tensor<Scalar>> bias;
};

namespace detail {

// Column buffer (in*k*k, ho*wo) for one batch item; out-of-range taps are zero.
template <typename Scalar>
void im2col(const Tensor<Scalar>& x, Index n, const ConvSpec<Scalar>& spec, Index ho, Index wo,
            RowMatrix<Scalar>& cols) {
  const Shape& s = x.shape();
  const Index k = spec.kernel;
  cols.resize(s.c * k * k, ho * wo);
  for (Index c = 0; c < s.c; ++c) {
    const Scalar* src = x.channel(n, c);
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        Scalar* row = cols.data() + ((c * k + ki) * k + kj) * ho * wo;
        for (Index oi = 0; oi < ho; ++oi) {
          const Index ii = oi * spec.stride - spec.padding + ki;
          for (Index oj = 0; oj < wo; ++oj) {
            const Index jj = oj * spec.stride - spec.padding + kj;
            const bool inside = ii >= 0 && ii < s.h && jj >= 0 && jj < s.w;
            row[oi * wo + oj] = inside ? src[ii * s.w + jj] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& cols, Index n, const ConvSpec<Scalar>& spec, Index ho,
                Index wo, Tensor<Scalar>& dx) {
  const Shape& s = dx.shape();
  const Index k = spec.kernel;
  for (Index c = 0; c < s.c; ++c) {
    Scalar* dst = dx.channel(n, c);
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        const Scalar* row = cols.data() + ((c * k + ki) * k + kj) * ho * wo;
        for (Index oi = 0; oi < ho; ++oi) {
          const Index ii = oi * spec.stride - spec.padding + ki;
          if (ii < 0 || ii >= s.h) continue;
          for (Index oj = 0; oj < wo; ++oj) {
            const Index jj = oj * spec.stride - spec.padding + kj;
            if (jj < 0 || jj >= s.w) continue;
            dst[ii * s.w + jj] += row[oi * wo + oj];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void check_kind(const ConvSpec<Scalar>& spec, ConvKind kind) {
  if (spec.kind != kind) {
    throw ConfigError(std::string(conv_kind_name(kind)) + ": spec is of kind " +
                      conv_kind_name(spec.kind));
  }
}

template <typename Scalar>
void add_bias(const ConvSpec<Scalar>& spec, Tensor<Scalar>& y) {
  if (!spec.bias) return;
  const Shape& s = y.shape();
  for (Index n = 0; n < s.n; ++n) {
    auto m = y.item(n);
    for (Index c = 0; c < s.c; ++c) m.row(c).array() += (*spec.bias)[c];
  }
}

template <typename Scalar>
Tensor<Scalar> bias_grad(const Tensor<Scalar>& dy) {
  const Shape& s = dy.shape();
  Tensor<Scalar> db(1, s.c, 1, 1);
  for (Index n = 0; n < s.n; ++n) {
    auto m = dy.item(n);
    for (Index c = 0; c < s.c; ++c) db[c] += m.row(c).sum();
  }
  return db;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> conv2d_standard(const Tensor<Scalar>& x, const ConvSpec<Scalar>& spec) {
  detail::check_kind(spec, ConvKind::Standard);
  const Shape out_shape = spec.output_shape(x.shape());
  Tensor<Scalar> y(out_shape);
  const auto w = spec.weight.rows();  // (out, in*k*k)
  RowMatrix<Scalar> cols;
  for (Index n = 0; n < out_shape.n; ++n) {
    detail::im2col(x, n, spec, out_shape.h, out_shape.w, cols);
    y.item(n).noalias() = w * cols;
    MacCounter::local().add(OpKind::Standard, w.rows() * w.cols() * cols.cols());
  }
  detail::add_bias(spec, y);
  return y;
}

template <typename Scalar>
ConvGrads<Scalar> conv2d_standard_backward(const Tensor<Scalar>& x, const ConvSpec<Scalar>& spec,
                                           const Tensor<Scalar>& dy) {
  detail::check_kind(spec, ConvKind::Standard);
  const Shape out_shape = spec.output_shape(x.shape());
  if (!(dy.shape() == out_shape)) {
    throw ConfigError("conv2d_standard: upstream gradient shape " + to_string(dy.shape()) +
                      ", expected " + to_string(out_shape));
  }
  ConvGrads<Scalar> g{Tensor<Scalar>::zeros_like(x), Tensor<Scalar>::zeros_like(spec.weight), {}};
  const auto w = spec.weight.rows();
  auto dw = g.weight.rows();
  RowMatrix<Scalar> cols;
  RowMatrix<Scalar> dcols;
  for (Index n = 0; n < out_shape.n; ++n) {
    detail::im2col(x, n, spec, out_shape.h, out_shape.w, cols);
    const auto dyn = dy.item(n);
    dw.noalias() += dyn * cols.transpose();
    dcols.noalias() = w.transpose() * dyn;
    detail::col2im_add(dcols, n, spec, out_shape.h, out_shape.w, g.input);
  }
  if (spec.bias) g.bias = detail::bias_grad(dy);
  return g;
}

template <typename Scalar>
Tensor<Scalar> pointwise_conv(const Tensor<Scalar>& x, const ConvSpec<Scalar>& spec) {
  detail::check_kind(spec, ConvKind::Pointwise);
  const Shape out_shape = spec.output_shape(x.shape());
  Tensor<Scalar> y(out_shape);
  const auto w = spec.weight.rows();  // (out, in)
  for (Index n = 0; n < out_shape.n; ++n) {
    y.item(n).noalias() = w * x.item(n);
    MacCounter::local().add(OpKind::Pointwise, w.rows() * w.cols() * out_shape.plane());
  }
  detail::add_bias(spec, y);
  return y;
}

template <typename Scalar>
ConvGrads<Scalar> pointwise_conv_backward(const Tensor<Scalar>& x, const ConvSpec<Scalar>& spec,
                                          const Tensor<Scalar>& dy) {
  detail::check_kind(spec, ConvKind::Pointwise);
  const Shape out_shape = spec.output_shape(x.shape());
  if (!(dy.shape() == out_shape)) {
    throw ConfigError("pointwise_conv: upstream gradient shape " + to_string(dy.shape()) +
                      ", expected " + to_string(out_shape));
  }
  ConvGrads<Scalar> g{Tensor<Scalar>::zeros_like(x), Tensor<Scalar>::zeros_like(spec.weight), {}};
  const auto w = spec.weight.rows();
  auto dw = g.weight.rows();
  for (Index n = 0; n < out_shape.n; ++n) {
    dw.noalias() += dy.item(n) * x.item(n).transpose();
    g.input.item(n).noalias() = w.transpose() * dy.item(n);
  }
  if (spec.bias) g.bias = detail::bias_grad(dy);
  return g;
}

template <typename Scalar>
Tensor<Scalar> depthwise_conv(const Tensor<Scalar>& x, const ConvSpec<Scalar>& spec) {
  detail::check_kind(spec, ConvKind::Depthwise);
  const Shape o = spec.output_shape(x.shape());
  const Shape& s = x.shape();
  const Index k = spec.kernel;
  Tensor<Scalar> y(o);
  for (Index n = 0; n < o.n; ++n) {
    for (Index c = 0; c < o.c; ++c) {
      const Scalar* src = x.channel(n, c);
      const Scalar* ker = spec.weight.channel(c, 0);
      Scalar* dst = y.channel(n, c);
      for (Index oi = 0; oi < o.h; ++oi) {
        for (Index oj = 0; oj < o.w; ++oj) {
          Scalar acc(0);
          for (Index ki = 0; ki < k; ++ki) {
            const Index ii = oi * spec.stride - spec.padding + ki;
            if (ii < 0 || ii >= s.h) continue;
            for (Index kj = 0; kj < k; ++kj) {
              const Index jj = oj * spec.stride - spec.padding + kj;
              if (jj < 0 || jj >= s.w) continue;
              acc += ker[ki * k + kj] * src[ii * s.w + jj];
            }
          }
          dst[oi * o.w + oj] = acc;
        }
      }
    }
  }
  // Padded taps count as executed MACs against a zero operand, as in the
  // analytic s_k*s_k*m*h*w count.
  MacCounter::local().add(OpKind::Depthwise, o.n * o.c * o.h * o.w * k * k);
  detail::add_bias(spec, y);
  return y;
}

template <typename Scalar>
ConvGrads<Scalar> depthwise_conv_backward(const Tensor<Scalar>& x, const ConvSpec<Scalar>& spec,
                                          const Tensor<Scalar>& dy) {
  detail::check_kind(spec, ConvKind::Depthwise);
  const Shape o = spec.output_shape(x.shape());
  if (!(dy.shape() == o)) {
    throw ConfigError("depthwise_conv: upstream gradient shape " + to_string(dy.shape()) +
                      ", expected " + to_string(o));
  }
  const Shape& s = x.shape();
  const Index k = spec.kernel;
  ConvGrads<Scalar> g{Tensor<Scalar>::zeros_like(x), Tensor<Scalar>::zeros_like(spec.weight), {}};
  for (Index n = 0; n < o.n; ++n) {
    for (Index c = 0; c < o.c; ++c) {
      const Scalar* src = x.channel(n, c);
      const Scalar* ker = spec.weight.channel(c, 0);
      const Scalar* up = dy.channel(n, c);
      Scalar* dsrc = g.input.channel(n, c);
      Scalar* dker = g.weight.channel(c, 0);
      for (Index oi = 0; oi < o.h; ++oi) {
        for (Index oj = 0; oj < o.w; ++oj) {
          const Scalar u = up[oi * o.w + oj];
          for (Index ki = 0; ki < k; ++ki) {
            const Index ii = oi * spec.stride - spec.padding + ki;
            if (ii < 0 || ii >= s.h) continue;
            for (Index kj = 0; kj < k; ++kj) {
              const Index jj = oj * spec.stride - spec.padding + kj;
              if (jj < 0 || jj >= s.w) continue;
              dker[ki * k + kj] += u * src[ii * s.w + jj];
              dsrc[ii * s.w + jj] += u * ker[ki * k + kj];
            }
          }
        }
      }
    }
  }
  if (spec.bias) g.bias = detail::bias_grad(dy);
  return g;
}

/// Dispatches on `spec.kind`.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const ConvSpec<Scalar>& spec) {
  switch (spec.kind) {
    case ConvKind::Depthwise: return depthwise_conv(x, spec);
    case ConvKind::Pointwise: return pointwise_conv(x, spec);
    case ConvKind::Standard: break;
  }
  return conv2d_standard(x, spec);
}

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& x, const ConvSpec<Scalar>& spec,
                                  const Tensor<Scalar>& dy) {
  switch (spec.kind) {
    case ConvKind::Depthwise: return depthwise_conv_backward(x, spec, dy);
    case ConvKind::Pointwise: return pointwise_conv_backward(x, spec, dy);
    case ConvKind::Standard: break;
  }
  return conv2d_standard_backward(x, spec, dy);
}

}  // namespace ulsam
