#pragma once

#include <Eigen/Core>

#include <cstring>
#include <optional>
#include <sstream>
#include <string>
#include <utility>

#include "ulsam/errors.hpp"

namespace ulsam {

using Index = Eigen::Index;

/// Extents of a rank-4 (batch, channels, height, width) tensor.
struct Shape {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  Index size() const { return n * c * h * w; }
  Index plane() const { return h * w; }
  Index item() const { return c * h * w; }

  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << s.n << "x" << s.c << "x" << s.h << "x" << s.w;
  return os.str();
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense NCHW tensor with an optional gradient buffer of the same shape.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(shape) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      throw ConfigError("tensor: negative extent in " + to_string(shape));
    }
    values_ = Array::Constant(shape.size(), fill);
  }

  Tensor(Index n, Index c, Index h, Index w, Scalar fill = Scalar(0))
      : Tensor(Shape{n, c, h, w}, fill) {}

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

  const Shape& shape() const { return shape_; }
  Index size() const { return shape_.size(); }
  bool empty() const { return shape_.size() == 0; }

  Array& values() { return values_; }
  const Array& values() const { return values_; }
  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }

  Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Scalar& operator()(Index n, Index c, Index h, Index w) { return values_[offset(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const {
    return values_[offset(n, c, h, w)];
  }
  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  /// Batch item `n` viewed as a (channels, h*w) row-major matrix.
  MatrixMap item(Index n) {
    return MatrixMap(data() + n * shape_.item(), shape_.c, shape_.plane());
  }
  ConstMatrixMap item(Index n) const {
    return ConstMatrixMap(data() + n * shape_.item(), shape_.c, shape_.plane());
  }

  /// Whole tensor viewed as (n, c*h*w).
  MatrixMap rows() { return MatrixMap(data(), shape_.n, shape_.item()); }
  ConstMatrixMap rows() const { return ConstMatrixMap(data(), shape_.n, shape_.item()); }

  Scalar* channel(Index n, Index c) { return data() + offset(n, c, 0, 0); }
  const Scalar* channel(Index n, Index c) const { return data() + offset(n, c, 0, 0); }

  bool has_grad() const { return grad_.has_value(); }

  /// Gradient buffer; allocated (zeroed) on first access.
  Array& grad() {
    if (!grad_) grad_ = Array::Zero(values_.size());
    return *grad_;
  }
  const Array& grad() const {
    if (!grad_) throw StateError("tensor: no gradient buffer");
    return *grad_;
  }
  void zero_grad() {
    if (grad_) grad_->setZero();
  }
  void drop_grad() { grad_.reset(); }

  /// Reinterpret with a new shape of equal size; drops the gradient buffer.
  Tensor reshaped(Shape shape) const {
    if (shape.size() != shape_.size()) {
      throw ConfigError("tensor: cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    Tensor out;
    out.shape_ = shape;
    out.values_ = values_;
    return out;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.values() = values_.template cast<Other>();
    return out;
  }

 private:
  Shape shape_{};
  Array values_;
  std::optional<Array> grad_;
};

template <typename Scalar>
bool bitwise_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!(a.shape() == b.shape())) return false;
  for (Index i = 0; i < a.size(); ++i) {
    if (std::memcmp(&a.data()[i], &b.data()[i], sizeof(Scalar)) != 0) return false;
  }
  return true;
}

}  // namespace ulsam
