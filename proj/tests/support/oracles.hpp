#pragma once

// Reference computations used as test oracles. Nothing here calls into the
// library kernels it is meant to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ulsam/tensor.hpp"

namespace ulsam::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

/// Central difference of `loss` with respect to every entry of `x`.
inline Tensor<double> central_difference(Tensor<double>& x, const std::function<double()>& loss,
                                         double eps = 1e-5) {
  Tensor<double> g(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double up = loss();
    x[i] = saved - eps;
    const double down = loss();
    x[i] = saved;
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

inline double max_relative_error(const Tensor<double>& analytic, const Tensor<double>& numeric,
                                 double floor = 1e-6) {
  double worst = 0.0;
  for (Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i];
    const double n = numeric[i];
    const double scale = std::max({std::abs(a), std::abs(n), floor});
    worst = std::max(worst, std::abs(a - n) / scale);
  }
  return worst;
}

/// sum(r * y): a scalar loss whose gradient with respect to y is r.
inline double project(const Tensor<double>& y, const Tensor<double>& r) {
  double s = 0.0;
  for (Index i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

/// Direct-loop convolution. `groups` == in channels gives depthwise.
inline Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, Index stride,
                                 Index pad, Index groups = 1) {
  const Shape s = x.shape();
  const Shape k = w.shape();
  const Index ho = (s.h + 2 * pad - k.h) / stride + 1;
  const Index wo = (s.w + 2 * pad - k.w) / stride + 1;
  const Index in_per_group = s.c / groups;
  const Index out_per_group = k.n / groups;
  Tensor<double> y(s.n, k.n, ho, wo);
  for (Index n = 0; n < s.n; ++n) {
    for (Index o = 0; o < k.n; ++o) {
      const Index group = o / out_per_group;
      for (Index i = 0; i < ho; ++i) {
        for (Index j = 0; j < wo; ++j) {
          double acc = 0.0;
          for (Index c = 0; c < in_per_group; ++c) {
            for (Index u = 0; u < k.h; ++u) {
              for (Index v = 0; v < k.w; ++v) {
                const Index r = i * stride + u - pad;
                const Index q = j * stride + v - pad;
                if (r < 0 || q < 0 || r >= s.h || q >= s.w) continue;
                acc += x(n, group * in_per_group + c, r, q) * w(o, c, u, v);
              }
            }
          }
          y(n, o, i, j) = acc;
        }
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Closed-form cost model written directly from the architecture tables.

struct ModelCost {
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

inline std::int64_t width(std::int64_t c, double alpha) {
  return std::max<std::int64_t>(8, std::int64_t(std::floor(double(c) * alpha / 8.0 + 0.5)) * 8);
}

inline std::int64_t after_stride(std::int64_t h, std::int64_t stride) {
  return (h + 2 - 3) / stride + 1;
}

/// `inserts` and `substitutes` list layer numbers; ULSAM costs 2m params
/// and 2*m*h*w MACs.
inline ModelCost mv1_cost(double alpha, std::int64_t classes, std::vector<int> inserts = {},
                          std::vector<int> substitutes = {}) {
  struct Row { std::int64_t in, out, stride; };
  const Row rows[] = {{32, 64, 1},   {64, 128, 2},  {128, 128, 1}, {128, 256, 2}, {256, 256, 1},
                      {256, 512, 2}, {512, 512, 1}, {512, 512, 1}, {512, 512, 1}, {512, 512, 1},
                      {512, 512, 1}, {512, 1024, 2}, {1024, 1024, 1}};
  ModelCost c;
  std::int64_t h = 112;
  const std::int64_t c1 = width(32, alpha);
  c.params += 27 * c1;
  c.macs += 27 * c1 * h * h;
  auto has = [](const std::vector<int>& v, int x) {
    return std::find(v.begin(), v.end(), x) != v.end();
  };
  for (int i = 0; i < 13; ++i) {
    const int number = i + 2;
    const std::int64_t m = width(rows[i].in, alpha);
    const std::int64_t n = width(rows[i].out, alpha);
    const std::int64_t ho = after_stride(h, rows[i].stride);
    if (has(substitutes, number)) {
      c.params += 2 * m;
      c.macs += 2 * m * h * h;
    } else {
      c.params += 9 * m + m * n;
      c.macs += 9 * m * ho * ho + m * n * ho * ho;
    }
    h = ho;
    if (has(inserts, number)) {
      c.params += 2 * n;
      c.macs += 2 * n * h * h;
    }
  }
  const std::int64_t last = width(1024, alpha);
  c.params += last * classes + classes;
  c.macs += last * classes;
  return c;
}

inline ModelCost mv2_cost(std::int64_t classes, std::vector<int> substitutes = {}) {
  struct Row { std::int64_t in, out, stride, t; };
  const Row rows[] = {
      {32, 16, 1, 1},   {16, 24, 2, 6},   {24, 24, 1, 6},   {24, 32, 2, 6},   {32, 32, 1, 6},
      {32, 32, 1, 6},   {32, 64, 2, 6},   {64, 64, 1, 6},   {64, 64, 1, 6},   {64, 64, 1, 6},
      {64, 96, 1, 6},   {96, 96, 1, 6},   {96, 96, 1, 6},   {96, 160, 2, 6},  {160, 160, 1, 6},
      {160, 160, 1, 6}, {160, 320, 1, 6}};
  ModelCost c;
  std::int64_t h = 112;
  c.params += 27 * 32;
  c.macs += 27 * 32 * h * h;
  for (int i = 0; i < 17; ++i) {
    const int number = i + 2;
    const Row& r = rows[i];
    const std::int64_t hidden = r.in * r.t;
    const std::int64_t ho = after_stride(h, r.stride);
    if (std::find(substitutes.begin(), substitutes.end(), number) != substitutes.end()) {
      c.params += 2 * r.in;
      c.macs += 2 * r.in * h * h;
    } else {
      if (r.t != 1) {
        c.params += r.in * hidden;
        c.macs += r.in * hidden * h * h;
      }
      c.params += 9 * hidden + hidden * r.out;
      c.macs += 9 * hidden * ho * ho + hidden * r.out * ho * ho;
    }
    h = ho;
  }
  c.params += 320 * 1280;
  c.macs += 320 * 1280 * h * h;
  c.params += 1280 * classes + classes;
  c.macs += 1280 * classes;
  return c;
}

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("ulsam_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace ulsam::testing
