#include "ulsam/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <memory>
#include <optional>
#include <random>
#include <sstream>

#include "ulsam/network.hpp"
#include "ulsam/train.hpp"

namespace ulsam {
namespace {

using T = Tensor<double>;
using Rng = std::mt19937_64;

constexpr double kAgreement = 1e-4;
constexpr double kSmallestStep = 1e-9;

struct Probe {
  std::string op;
  std::string shape;
  std::vector<T*> leaves;
  std::function<T()> forward;
  std::function<std::vector<T>(const T& dy)> backward;
  std::int64_t samples_per_leaf = -1;  // all entries when negative
  bool network = false;
  bool refine_step = false;
};

T uniform(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  T t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

/// Uniform values kept at least `margin` away from every kink.
T away_from(const Shape& s, Rng& rng, double lo, double hi, std::initializer_list<double> kinks,
            double margin = 1e-3) {
  std::uniform_real_distribution<double> d(lo, hi);
  T t(s);
  for (Index i = 0; i < t.size(); ++i) {
    double v;
    bool near;
    do {
      v = d(rng);
      near = false;
      for (double k : kinks) near = near || std::abs(v - k) < margin;
    } while (near);
    t[i] = v;
  }
  return t;
}

/// Distinct values on a 0.05 grid, shuffled, so no two pooling candidates
/// are within the perturbation of each other.
T distinct(const Shape& s, Rng& rng) {
  T t(s);
  std::vector<double> v(static_cast<std::size_t>(t.size()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = -1.0 + 0.05 * double(i);
  std::shuffle(v.begin(), v.end(), rng);
  for (Index i = 0; i < t.size(); ++i) t[i] = v[i];
  return t;
}

double weighted_sum(const T& y, const T& w) { return (y.values() * w.values()).sum(); }

double central_difference(Probe& p, T& leaf, Index i, const T& w, double eps) {
  const double orig = leaf[i];
  leaf[i] = orig + eps;
  const double up = weighted_sum(p.forward(), w);
  leaf[i] = orig - eps;
  const double down = weighted_sum(p.forward(), w);
  leaf[i] = orig;
  return (up - down) / (2.0 * eps);
}

/// Refines the step by factors of 10 until two consecutive estimates agree;
/// empty when they never do (a dense set of kinks around the point).
std::optional<double> refined_difference(Probe& p, T& leaf, Index i, const T& w, double eps) {
  double previous = central_difference(p, leaf, i, w, eps);
  for (double step = eps / 10.0; step >= kSmallestStep; step /= 10.0) {
    const double current = central_difference(p, leaf, i, w, step);
    if (relative_error(previous, current) < kAgreement) return previous;
    previous = current;
  }
  return std::nullopt;
}

GradcheckRecord run_probe(Probe& p, const GradcheckOptions& opt, double tolerance, Rng& rng) {
  const T y0 = p.forward();
  T w = uniform(y0.shape(), rng);
  std::vector<T> grads = p.backward(w);
  if (grads.size() != p.leaves.size()) throw StateError("gradcheck: leaf/gradient count mismatch");
  if (!opt.fault.empty() && opt.fault == p.op) grads[0].values() = 1.5 * grads[0].values() + 0.01;

  GradcheckRecord rec{p.op, p.shape, 0.0, tolerance, 0, 0};
  for (std::size_t l = 0; l < p.leaves.size(); ++l) {
    T& leaf = *p.leaves[l];
    std::vector<Index> order(static_cast<std::size_t>(leaf.size()));
    for (Index i = 0; i < leaf.size(); ++i) order[i] = i;
    const bool sampled = p.samples_per_leaf >= 0 && leaf.size() > p.samples_per_leaf;
    if (sampled) std::shuffle(order.begin(), order.end(), rng);
    Index wanted = sampled ? p.samples_per_leaf : leaf.size();
    for (Index i : order) {
      if (wanted == 0) break;
      double numeric;
      if (p.refine_step) {
        const auto estimate = refined_difference(p, leaf, i, w, opt.eps);
        if (!estimate) {
          ++rec.skipped;
          continue;
        }
        numeric = *estimate;
      } else {
        numeric = central_difference(p, leaf, i, w, opt.eps);
      }
      rec.max_rel_error = std::max(rec.max_rel_error, relative_error(grads[l][i], numeric));
      ++rec.checked;
      --wanted;
    }
  }
  return rec;
}

std::string conv_shape(const Shape& x, const ConvSpec<double>& spec) {
  std::ostringstream os;
  os << to_string(x) << " k" << spec.kernel << " s" << spec.stride << " p" << spec.padding
     << " -> " << spec.out_channels;
  return os.str();
}

void add_conv(std::vector<Probe>& out, const char* op, Shape x_shape, ConvSpec<double> spec,
              Rng& rng) {
  auto x = std::make_shared<T>(uniform(x_shape, rng));
  auto s = std::make_shared<ConvSpec<double>>(std::move(spec));
  s->weight = uniform(s->weight.shape(), rng);
  if (s->bias) s->bias = uniform(s->bias->shape(), rng);
  Probe p{op, conv_shape(x_shape, *s), {x.get(), &s->weight}, {}, {}};
  if (s->bias) p.leaves.push_back(&*s->bias);
  p.forward = [x, s] { return conv2d(*x, *s); };
  p.backward = [x, s](const T& dy) {
    auto g = conv2d_backward(*x, *s, dy);
    std::vector<T> r{std::move(g.input), std::move(g.weight)};
    if (g.bias) r.push_back(std::move(*g.bias));
    return r;
  };
  out.push_back(std::move(p));
}

void add_unary(std::vector<Probe>& out, const char* op, T input,
               T (*fwd)(const T&), T (*bwd)(const T&, const T&)) {
  auto x = std::make_shared<T>(std::move(input));
  Probe p{op, to_string(x->shape()), {x.get()}, {}, {}};
  p.forward = [x, fwd] { return fwd(*x); };
  p.backward = [x, bwd](const T& dy) { return std::vector<T>{bwd(*x, dy)}; };
  out.push_back(std::move(p));
}

void add_batch_norm(std::vector<Probe>& out, Shape shape, Mode mode, Rng& rng) {
  auto x = std::make_shared<T>(uniform(shape, rng, -2.0, 2.0));
  auto bn = std::make_shared<BatchNorm<double>>(shape.c);
  bn->gamma = uniform(bn->gamma.shape(), rng, 0.5, 1.5);
  bn->beta = uniform(bn->beta.shape(), rng);
  bn->running_mean = uniform(bn->running_mean.shape(), rng, -0.5, 0.5);
  bn->running_var = uniform(bn->running_var.shape(), rng, 0.5, 2.0);
  auto cache = std::make_shared<BatchNormCache<double>>();
  Probe p{mode == Mode::Train ? "batch_norm_train" : "batch_norm_infer", to_string(shape),
          {x.get(), &bn->gamma, &bn->beta}, {}, {}};
  p.forward = [x, bn, cache, mode] { return batch_norm(*x, *bn, mode, cache.get()); };
  p.backward = [bn, cache](const T& dy) {
    auto g = batch_norm_backward(*bn, *cache, dy);
    return std::vector<T>{std::move(g.input), std::move(g.gamma), std::move(g.beta)};
  };
  out.push_back(std::move(p));
}

void add_ulsam(std::vector<Probe>& out, Shape shape, Index groups, Rng& rng) {
  const UlsamConfig cfg{shape.c, groups};
  auto x = std::make_shared<T>(uniform(shape, rng));
  auto block = std::make_shared<UlsamBlock<double>>(cfg, UlsamWeights<double>::random(cfg, rng));
  Probe p{"ulsam_block", to_string(shape) + " g" + std::to_string(groups),
          {x.get(), &block->weights().depthwise, &block->weights().pointwise}, {}, {}};
  p.forward = [x, block] { return block->forward(*x); };
  p.backward = [block](const T& dy) {
    auto g = block->backward(dy);
    return std::vector<T>{std::move(g.input), std::move(g.depthwise), std::move(g.pointwise)};
  };
  out.push_back(std::move(p));
}

void add_se(std::vector<Probe>& out, Shape shape, Index reduction, Rng& rng) {
  const SeConfig cfg{shape.c, reduction};
  auto w = SeWeights<double>::zeros(cfg);
  w.squeeze = uniform(w.squeeze.shape(), rng);
  w.excite = uniform(w.excite.shape(), rng);
  auto x = std::make_shared<T>(uniform(shape, rng));
  auto block = std::make_shared<SeBlock<double>>(cfg, std::move(w));
  Probe p{"se_block", to_string(shape) + " r" + std::to_string(reduction),
          {x.get(), &block->weights().squeeze, &block->weights().excite}, {}, {}};
  p.forward = [x, block] { return block->forward(*x); };
  p.backward = [block](const T& dy) {
    auto g = block->backward(dy);
    return std::vector<T>{std::move(g.input), std::move(g.squeeze), std::move(g.excite)};
  };
  out.push_back(std::move(p));
}

/// Tiny MV1 with ULSAM at 8:1, 9:1 and 11. Batch-norm affine parameters
/// are drawn away from their (1, 0) initialisation so that dead channels do
/// not sit exactly on a ReLU kink.
void add_network(std::vector<Probe>& out, int input_size, Index batch, Mode mode, Rng& rng) {
  ModelGraph g = build_mv1(0.25, 4);
  g.input_size = input_size;
  g = apply_ulsam(g, parse_positions_csv("8:1,9:1,11"), 4);
  auto net = std::make_shared<Network<double>>(g, rng());
  auto x = std::make_shared<T>(uniform(Shape{batch, 3, input_size, input_size}, rng));
  for (auto& t : net->tensors()) {
    if (t.name.ends_with(".bn.gamma")) *t.tensor = uniform(t.tensor->shape(), rng, 0.8, 1.2);
    if (t.name.ends_with(".bn.beta")) *t.tensor = uniform(t.tensor->shape(), rng, -0.2, 0.2);
  }
  if (mode == Mode::Infer) {
    for (int i = 0; i < 3; ++i) net->forward(uniform(x->shape(), rng), Mode::Train);
  }
  Probe p{"network",
          std::string(mode == Mode::Train ? "train " : "infer ") + "mv1 a0.25 +ulsam(8:1,9:1,11) g4 " +
              to_string(x->shape()),
          {x.get()}, {}, {}};
  for (auto& t : net->trainable()) p.leaves.push_back(t.tensor);
  p.samples_per_leaf = 3;
  p.network = true;
  p.refine_step = true;
  p.forward = [x, net, mode] { return net->forward(*x, mode); };
  p.backward = [net](const T& dy) {
    net->zero_grad();
    std::vector<T> r{net->backward(dy)};
    for (auto& t : net->trainable()) {
      T g(t.tensor->shape());
      g.values() = t.tensor->grad();
      r.push_back(std::move(g));
    }
    return r;
  };
  out.push_back(std::move(p));
}

T relu_fwd(const T& x) { return relu(x); }
T relu_bwd(const T& x, const T& dy) { return relu_backward(x, dy); }
T relu6_fwd(const T& x) { return relu6(x); }
T relu6_bwd(const T& x, const T& dy) { return relu6_backward(x, dy); }
T sigmoid_fwd(const T& x) { return sigmoid(x); }
T sigmoid_bwd(const T& x, const T& dy) { return sigmoid_backward(x, dy); }
T maxpool_fwd(const T& x) { return maxpool_3x3_p1(x); }
T maxpool_bwd(const T& x, const T& dy) { return maxpool_3x3_p1_backward(x, dy); }
T softmax_fwd(const T& x) { return spatial_softmax(x); }
T gap_fwd(const T& x) { return global_avg_pool(x); }
T gap_bwd(const T& x, const T& dy) { return global_avg_pool_backward(x.shape(), dy); }

std::vector<Probe> build_probes(const GradcheckOptions& opt, Rng& rng) {
  std::vector<Probe> out;

  add_conv(out, "conv2d_standard", {1, 3, 5, 5}, ConvSpec<double>::standard(3, 2, 3, 1, 0, true), rng);
  add_conv(out, "conv2d_standard", {2, 2, 6, 7}, ConvSpec<double>::standard(2, 3, 3, 2, 1, true), rng);
  add_conv(out, "conv2d_standard", {1, 3, 7, 7}, ConvSpec<double>::standard(3, 4, 5, 2, 2, false), rng);

  add_conv(out, "depthwise_conv", {1, 3, 5, 5}, ConvSpec<double>::depthwise(3, 3, 1, 1), rng);
  add_conv(out, "depthwise_conv", {2, 2, 7, 6}, ConvSpec<double>::depthwise(2, 3, 2, 1), rng);
  add_conv(out, "depthwise_conv", {1, 4, 3, 3}, ConvSpec<double>::depthwise(4, 3, 1, 0), rng);

  add_conv(out, "pointwise_conv", {1, 3, 4, 4}, ConvSpec<double>::pointwise(3, 2, true), rng);
  add_conv(out, "pointwise_conv", {2, 5, 3, 2}, ConvSpec<double>::pointwise(5, 4), rng);
  add_conv(out, "pointwise_conv", {1, 1, 5, 5}, ConvSpec<double>::pointwise(1, 3, true), rng);

  for (Shape s : {Shape{1, 1, 5, 5}, Shape{2, 3, 4, 6}, Shape{1, 2, 1, 7}}) {
    add_unary(out, "maxpool_3x3_p1", distinct(s, rng), maxpool_fwd, maxpool_bwd);
  }
  for (Shape s : {Shape{1, 1, 3, 3}, Shape{2, 1, 4, 5}, Shape{3, 1, 1, 6}}) {
    add_unary(out, "spatial_softmax", uniform(s, rng, -2.0, 2.0), softmax_fwd,
              [](const T& x, const T& dy) { return spatial_softmax_backward(spatial_softmax(x), dy); });
  }

  for (Shape s : {Shape{1, 3, 4, 4}, Shape{2, 2, 3, 5}, Shape{1, 5, 2, 2}}) {
    auto f = std::make_shared<T>(uniform(s, rng));
    auto a = std::make_shared<T>(uniform(Shape{s.n, 1, s.h, s.w}, rng));
    Probe p{"broadcast_mul_add", to_string(s), {f.get(), a.get()}, {}, {}};
    p.forward = [f, a] { return broadcast_mul_add(*f, *a); };
    p.backward = [f, a](const T& dy) {
      auto g = broadcast_mul_add_backward(*f, *a, dy);
      return std::vector<T>{std::move(g.features), std::move(g.attention)};
    };
    out.push_back(std::move(p));
  }

  for (const std::vector<Shape>& shapes :
       {std::vector<Shape>{{1, 2, 3, 3}, {1, 3, 3, 3}},
        std::vector<Shape>{{2, 1, 4, 2}, {2, 1, 4, 2}, {2, 1, 4, 2}},
        std::vector<Shape>{{1, 4, 2, 2}}}) {
    auto parts = std::make_shared<std::vector<T>>();
    std::string label;
    for (const Shape& s : shapes) {
      parts->push_back(uniform(s, rng));
      label += (label.empty() ? "" : " + ") + to_string(s);
    }
    Probe p{"channel_concat", label, {}, {}, {}};
    for (auto& t : *parts) p.leaves.push_back(&t);
    p.forward = [parts] { return channel_concat<double>(*parts); };
    p.backward = [parts](const T& dy) {
      std::vector<T> r;
      Index begin = 0;
      for (const auto& t : *parts) {
        r.push_back(channel_slice(dy, begin, t.shape().c));
        begin += t.shape().c;
      }
      return r;
    };
    out.push_back(std::move(p));
  }

  for (Shape s : {Shape{1, 3, 4, 4}, Shape{2, 5, 3, 2}, Shape{1, 1, 1, 1}}) {
    add_unary(out, "global_avg_pool", uniform(s, rng), gap_fwd, gap_bwd);
  }

  for (auto [x_shape, outputs, with_bias] :
       {std::tuple{Shape{2, 6, 1, 1}, Index(4), true}, std::tuple{Shape{1, 3, 2, 2}, Index(5), true},
        std::tuple{Shape{3, 4, 1, 1}, Index(1), false}}) {
    auto x = std::make_shared<T>(uniform(x_shape, rng));
    auto w = std::make_shared<T>(uniform(Shape{outputs, x_shape.item(), 1, 1}, rng));
    auto b = std::make_shared<T>(uniform(Shape{1, outputs, 1, 1}, rng));
    Probe p{"fully_connected", to_string(x_shape) + " -> " + std::to_string(outputs),
            {x.get(), w.get()}, {}, {}};
    if (with_bias) p.leaves.push_back(b.get());
    p.forward = [x, w, b, with_bias] { return fully_connected(*x, *w, with_bias ? b.get() : nullptr); };
    p.backward = [x, w, with_bias](const T& dy) {
      auto g = fully_connected_backward(*x, *w, dy);
      std::vector<T> r{std::move(g.input), std::move(g.weight)};
      if (with_bias) r.push_back(std::move(g.bias));
      return r;
    };
    out.push_back(std::move(p));
  }

  const Shape elementwise[] = {{1, 3, 4, 4}, {2, 2, 3, 5}, {1, 1, 1, 7}};
  for (Shape s : elementwise) add_unary(out, "relu", away_from(s, rng, -1.0, 1.0, {0.0}), relu_fwd, relu_bwd);
  for (Shape s : elementwise) {
    add_unary(out, "relu6", away_from(s, rng, -2.0, 8.0, {0.0, 6.0}), relu6_fwd, relu6_bwd);
  }
  for (Shape s : elementwise) add_unary(out, "sigmoid", uniform(s, rng, -4.0, 4.0), sigmoid_fwd, sigmoid_bwd);

  for (Shape s : {Shape{4, 3, 2, 2}, Shape{2, 5, 3, 3}, Shape{8, 2, 1, 1}}) add_batch_norm(out, s, Mode::Train, rng);
  for (Shape s : {Shape{4, 3, 2, 2}, Shape{2, 5, 3, 3}, Shape{1, 2, 1, 1}}) add_batch_norm(out, s, Mode::Infer, rng);

  add_ulsam(out, {1, 4, 5, 5}, 1, rng);
  add_ulsam(out, {2, 8, 4, 4}, 4, rng);
  add_ulsam(out, {1, 6, 3, 5}, 6, rng);

  add_se(out, {1, 16, 3, 3}, 4, rng);
  add_se(out, {2, 32, 2, 2}, 16, rng);
  add_se(out, {1, 8, 4, 4}, 2, rng);

  for (Shape s : {Shape{3, 5, 1, 1}, Shape{1, 2, 1, 1}, Shape{4, 10, 1, 1}}) {
    auto logits = std::make_shared<T>(uniform(s, rng, -2.0, 2.0));
    auto labels = std::make_shared<std::vector<int>>();
    std::uniform_int_distribution<int> pick(0, int(s.c) - 1);
    for (Index n = 0; n < s.n; ++n) labels->push_back(pick(rng));
    Probe p{"cross_entropy", to_string(s), {logits.get()}, {}, {}};
    p.forward = [logits, labels] { return T(1, 1, 1, 1, cross_entropy(*logits, *labels).loss); };
    p.backward = [logits, labels](const T& dy) {
      T g = cross_entropy(*logits, *labels).grad;
      g.values() *= dy[0];
      return std::vector<T>{std::move(g)};
    };
    out.push_back(std::move(p));
  }

  if (opt.include_network) {
    // 8x8 input shrinks layers 6-14 to 1x1, where ULSAM is the identity;
    // 64x64 keeps them at 4x4 and 2x2. Training-mode batch norm over the
    // three samples per channel of the 8x8 batch has gradients of order
    // 1e3 and needs steps below 1e-8, so that size is checked in inference.
    add_network(out, 8, 3, Mode::Infer, rng);
    add_network(out, 64, 4, Mode::Infer, rng);
    add_network(out, 64, 4, Mode::Train, rng);
  }
  return out;
}

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

std::vector<std::string> gradcheck_op_names() {
  return {"conv2d_standard", "depthwise_conv", "pointwise_conv", "maxpool_3x3_p1",
          "spatial_softmax", "broadcast_mul_add", "channel_concat", "global_avg_pool",
          "fully_connected", "relu", "relu6", "sigmoid", "batch_norm_train", "batch_norm_infer",
          "ulsam_block", "se_block", "cross_entropy", "network"};
}

std::vector<GradcheckRecord> run_gradcheck(const GradcheckOptions& options) {
  if (!options.fault.empty()) {
    const auto names = gradcheck_op_names();
    if (std::find(names.begin(), names.end(), options.fault) == names.end()) {
      throw ConfigError("gradcheck: unknown op '" + options.fault + "' for fault injection");
    }
  }
  if (!(options.eps > 0.0)) throw ConfigError("gradcheck: eps must be > 0");
  Rng rng(options.seed);
  auto probes = build_probes(options, rng);
  std::vector<GradcheckRecord> records;
  for (auto& p : probes) {
    const double tol = p.network ? options.network_tolerance : options.op_tolerance;
    records.push_back(run_probe(p, options, tol, rng));
  }
  return records;
}

std::string format_gradcheck(const std::vector<GradcheckRecord>& records) {
  std::ostringstream os;
  int failures = 0;
  for (const auto& r : records) {
    os << (r.passed() ? "PASS " : "FAIL ") << std::left << std::setw(18) << r.op << " "
       << std::setw(40) << r.shape << " max_rel_err=" << std::scientific << std::setprecision(3)
       << r.max_rel_error << " tol=" << std::setprecision(0) << r.tolerance << std::defaultfloat
       << " entries=" << r.checked;
    if (r.skipped) os << " unresolved_resampled=" << r.skipped;
    os << "\n";
    failures += r.passed() ? 0 : 1;
  }
  os << records.size() - std::size_t(failures) << "/" << records.size() << " checks passed\n";
  return os.str();
}

nlohmann::ordered_json gradcheck_json(const std::vector<GradcheckRecord>& records) {
  nlohmann::ordered_json checks = nlohmann::ordered_json::array();
  bool ok = true;
  for (const auto& r : records) {
    checks.push_back({{"op", r.op},
                      {"shape", r.shape},
                      {"max_rel_error", r.max_rel_error},
                      {"tolerance", r.tolerance},
                      {"entries", r.checked},
                      {"unresolved_resampled", r.skipped},
                      {"passed", r.passed()}});
    ok = ok && r.passed();
  }
  nlohmann::ordered_json out;
  out["passed"] = ok;
  out["checks"] = checks;
  return out;
}

}  // namespace ulsam
