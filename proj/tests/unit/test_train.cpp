#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "ulsam/checkpoint.hpp"
#include "ulsam/config.hpp"
#include "ulsam/data.hpp"
#include "ulsam/train.hpp"
#include "ulsam/trainer.hpp"

using namespace ulsam;
using ulsam::testing::TempDir;

namespace {

Tensor<double> scalar(double v) { return Tensor<double>(1, 1, 1, 1, v); }

std::vector<std::uint8_t> cifar_record(std::uint8_t label, std::uint8_t fill) {
  std::vector<std::uint8_t> r(kCifarRecordBytes, fill);
  r[0] = label;
  return r;
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

ModelGraph tiny_graph(int classes) {
  ModelGraph g = apply_ulsam(build_mv1(0.25, classes), parse_positions_csv("8:1,11"), 4);
  g.input_size = 16;
  return g;
}

}  // namespace

TEST(Sgd, QuadraticStep) {
  Tensor<double> theta = scalar(1.0);
  theta.grad()[0] = theta[0];  // d/dθ ½θ²
  SgdState<double> state;
  std::vector<Tensor<double>*> params{&theta};
  sgd_step<double>(params, state, {0.1, 0.0, 0.0});
  EXPECT_DOUBLE_EQ(theta[0], 0.9);
}

TEST(Sgd, ZeroGradientOnlyDecaysVelocity) {
  Tensor<double> theta = scalar(2.0);
  SgdState<double> state;
  state.velocity.push_back(Eigen::ArrayXd::Constant(1, 0.5));
  theta.grad()[0] = 0.0;
  std::vector<Tensor<double>*> params{&theta};
  sgd_step<double>(params, state, {0.0, 0.9, 0.0});
  EXPECT_EQ(theta[0], 2.0);
  EXPECT_DOUBLE_EQ(state.velocity[0][0], 0.45);
}

TEST(Sgd, TwoMomentumSteps) {
  const double lr = 0.1, g = 0.3, theta0 = 1.0;
  Tensor<double> theta = scalar(theta0);
  SgdState<double> state;
  std::vector<Tensor<double>*> params{&theta};
  for (int i = 0; i < 2; ++i) {
    theta.grad()[0] = g;
    sgd_step<double>(params, state, {lr, 0.9, 0.0});
  }
  EXPECT_NEAR(theta[0], theta0 - lr * g * (1.0 + 1.9), 1e-15);
}

TEST(Sgd, CoupledWeightDecay) {
  Tensor<double> theta = scalar(2.0);
  theta.grad()[0] = 0.0;
  SgdState<double> state;
  std::vector<Tensor<double>*> params{&theta};
  sgd_step<double>(params, state, {0.5, 0.9, 0.1});
  EXPECT_DOUBLE_EQ(theta[0], 2.0 - 0.5 * 0.1 * 2.0);
}

TEST(LrSchedule, StepDecay) {
  const auto s = LrSchedule::step_decay(0.1);
  EXPECT_EQ(lr_at(s, 0), 0.1);
  EXPECT_EQ(lr_at(s, 29), 0.1);
  EXPECT_EQ(lr_at(s, 30), 0.01);
  EXPECT_EQ(lr_at(s, 60), 0.001);
}

TEST(LrSchedule, ExpDecay) {
  const auto s = LrSchedule::exp_decay(0.045);
  EXPECT_EQ(lr_at(s, 0), 0.045);
  EXPECT_NEAR(lr_at(s, 1), 0.0441, 1e-15);
  for (int e = 0; e < 200; ++e) EXPECT_EQ(lr_at(s, e), 0.045 * std::pow(0.98, e)) << e;
}

TEST(LrSchedule, Validation) {
  EXPECT_THROW(LrSchedule::step_decay(0.0).validate(), ConfigError);
  EXPECT_THROW(LrSchedule::exp_decay(0.1, 1.0).validate(), ConfigError);
  EXPECT_THROW(LrSchedule::step_decay(0.1, 0.1, 0).validate(), ConfigError);
  EXPECT_THROW(lr_at(LrSchedule::step_decay(0.1), -1), ConfigError);
}

TEST(CrossEntropy, UniformLogits) {
  const std::vector<int> labels{0, 3, 6};
  const auto r = cross_entropy(Tensor<double>(3, 7, 1, 1), labels);
  EXPECT_NEAR(r.loss, std::log(7.0), 1e-15);
}

TEST(CrossEntropy, ConfidentPredictionTendsToZero) {
  Tensor<double> logits(1, 3, 1, 1);
  logits[1] = 50.0;
  const std::vector<int> labels{1};
  EXPECT_LT(cross_entropy(logits, labels).loss, 1e-20);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  Tensor<double> logits = ulsam::testing::random_tensor({4, 5, 1, 1}, rng, -2.0, 2.0);
  const std::vector<int> labels{0, 4, 2, 2};
  const auto r = cross_entropy(logits, labels);
  const auto numeric = ulsam::testing::central_difference(
      logits, [&] { return cross_entropy(logits, labels).loss; });
  EXPECT_LT(ulsam::testing::max_relative_error(r.grad, numeric), 1e-6);
}

TEST(CrossEntropy, LabelOutOfRange) {
  const std::vector<int> labels{3};
  EXPECT_THROW(cross_entropy(Tensor<double>(1, 3, 1, 1), labels), DataError);
}

TEST(TopK, HandEnumeration) {
  Tensor<double> logits(4, 3, 1, 1);
  const double rows[4][3] = {{3, 2, 1}, {1, 3, 2}, {2, 1, 3}, {3, 1, 2}};
  for (Index n = 0; n < 4; ++n)
    for (Index k = 0; k < 3; ++k) logits(n, k, 0, 0) = rows[n][k];
  // Top-2 sets: {0,1} {1,2} {2,0} {0,2}; labels 1, 2, 0, 1 -> hits 3 of 4.
  const std::vector<int> labels{1, 2, 0, 1};
  EXPECT_EQ(topk_accuracy(logits, labels, 2), 0.75);
  EXPECT_EQ(topk_accuracy(logits, labels, 3), 1.0);
  const std::vector<int> one{0};
  EXPECT_EQ(topk_accuracy(Tensor<double>(1, 3, 1, 1), one, 1), 1.0);
  EXPECT_THROW(topk_accuracy(logits, labels, 4), ConfigError);
}

TEST(Cifar10, ParsesRecords) {
  std::vector<std::uint8_t> bytes = cifar_record(7, 255);
  const auto second = cifar_record(2, 0);
  bytes.insert(bytes.end(), second.begin(), second.end());
  const Dataset d = parse_cifar10_records(bytes);
  ASSERT_EQ(d.size(), 2);
  EXPECT_EQ(d.labels[0], 7);
  EXPECT_EQ(d.labels[1], 2);
  EXPECT_EQ(d.images(0, 0, 0, 0), 1.0f);
  EXPECT_EQ(d.images(0, 2, 31, 31), 1.0f);
  EXPECT_EQ(d.images(1, 1, 5, 5), 0.0f);
}

TEST(Cifar10, ChannelMajorLayoutAndNormalisation) {
  auto rec = cifar_record(1, 0);
  rec[1 + 1024 + 32 * 3 + 4] = 51;  // G channel, row 3, col 4
  Normalization norm;
  norm.mean = {0.0f, 0.1f, 0.0f};
  norm.stddev = {1.0f, 0.5f, 1.0f};
  const Dataset d = parse_cifar10_records(rec, norm);
  EXPECT_FLOAT_EQ(d.images(0, 1, 3, 4), (0.2f - 0.1f) / 0.5f);
  EXPECT_FLOAT_EQ(d.images(0, 1, 0, 0), (0.0f - 0.1f) / 0.5f);
}

TEST(Cifar10, TruncatedFileReportsOffset) {
  TempDir dir("cifar");
  std::vector<std::uint8_t> bytes = cifar_record(1, 9);
  bytes.resize(kCifarRecordBytes + 100, 0);
  write_bytes(dir.file("bad.bin"), bytes);
  try {
    load_cifar10_binary({dir.file("bad.bin")});
    FAIL() << "expected IngestError";
  } catch (const IngestError& e) {
    EXPECT_EQ(e.offset(), kCifarRecordBytes);
  }
}

TEST(Cifar10, LabelAboveNineIsDataError) {
  EXPECT_THROW(parse_cifar10_records(cifar_record(10, 0)), DataError);
}

TEST(Cifar10, ConcatenatesFiles) {
  TempDir dir("cifar");
  write_bytes(dir.file("a.bin"), cifar_record(3, 1));
  write_bytes(dir.file("b.bin"), cifar_record(4, 2));
  const Dataset d = load_cifar10_binary({dir.file("a.bin"), dir.file("b.bin")});
  ASSERT_EQ(d.size(), 2);
  EXPECT_EQ(d.labels, (std::vector<int>{3, 4}));
  EXPECT_THROW(load_cifar10_binary({}), ConfigError);
}

TEST(Synthetic, SeededAndBalanced) {
  SyntheticSpec spec;
  spec.samples = 40;
  spec.image_size = 8;
  const Dataset a = make_synthetic(spec);
  const Dataset b = make_synthetic(spec);
  EXPECT_TRUE(bitwise_equal(a.images, b.images));
  for (int c = 0; c < 4; ++c) EXPECT_EQ(std::count(a.labels.begin(), a.labels.end(), c), 10);
  spec.seed = 2;
  EXPECT_FALSE(bitwise_equal(a.images, make_synthetic(spec).images));
}

TEST(Checkpoint, RoundTripIsBitwise) {
  TempDir dir("ckpt");
  Network<float> a(tiny_graph(4), 3);
  Network<float> b(tiny_graph(4), 4);
  save_checkpoint(dir.file("m.ulsm"), a.tensors());
  load_checkpoint(dir.file("m.ulsm"), b.tensors());
  for (std::size_t i = 0; i < a.tensors().size(); ++i) {
    EXPECT_TRUE(bitwise_equal(*a.tensors()[i].tensor, *b.tensors()[i].tensor))
        << a.tensors()[i].name;
  }
}

TEST(Checkpoint, RejectsCorruptFiles) {
  TempDir dir("ckpt");
  Network<float> net(tiny_graph(4), 3);
  const std::string path = dir.file("m.ulsm");
  save_checkpoint(path, net.tensors());
  std::ifstream in(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  auto expect_rejected = [&](std::vector<char> data, const char* what) {
    std::ofstream(path, std::ios::binary).write(data.data(), std::streamsize(data.size()));
    EXPECT_THROW(load_checkpoint(path, net.tensors()), CheckpointError) << what;
  };
  auto magic = bytes;
  magic[0] = 'X';
  expect_rejected(magic, "magic");
  auto version = bytes;
  version[4] = 9;
  expect_rejected(version, "version");
  expect_rejected(std::vector<char>(bytes.begin(), bytes.end() - 3), "truncated");

  Network<float> wider(apply_ulsam(build_mv1(0.5, 4), parse_positions_csv("8:1,11"), 4), 0);
  save_checkpoint(path, wider.tensors());
  EXPECT_THROW(load_checkpoint(path, net.tensors()), CheckpointError);
  EXPECT_THROW(load_checkpoint(dir.file("missing.ulsm"), net.tensors()), CheckpointError);
}

TEST(Trainer, LrHistoryFollowsSchedule) {
  SyntheticSpec spec;
  spec.samples = 8;
  spec.image_size = 16;
  const Dataset data = make_synthetic(spec);
  Network<float> net(tiny_graph(4), 1);
  TrainConfig cfg;
  cfg.schedule = LrSchedule::step_decay(0.05, 0.5, 2);
  cfg.epochs = 5;
  cfg.batch_size = 4;
  const auto history = train_loop(net, data, nullptr, cfg);
  ASSERT_EQ(history.size(), 5u);
  for (const auto& r : history) EXPECT_EQ(r.lr, lr_at(cfg.schedule, r.epoch));
  EXPECT_FALSE(history.back().eval.top5.has_value());
}

TEST(Trainer, CheckpointReproducesEvaluation) {
  TempDir dir("train");
  SyntheticSpec spec;
  spec.samples = 12;
  spec.image_size = 16;
  const Dataset data = make_synthetic(spec);
  Network<float> net(tiny_graph(4), 2);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 6;
  cfg.schedule = LrSchedule::exp_decay(0.02, 0.9);
  cfg.checkpoint_path = dir.file("ck.ulsm");
  const auto history = train_loop(net, data, nullptr, cfg);

  Network<float> reloaded(tiny_graph(4), 99);
  load_checkpoint(cfg.checkpoint_path, reloaded.tensors());
  const EvalResult r = evaluate(reloaded, data, cfg.batch_size);
  EXPECT_EQ(r.top1, history.back().eval.top1);
  Tensor<float> probe = data.images;
  EXPECT_TRUE(bitwise_equal(net.forward(probe, Mode::Infer), reloaded.forward(probe, Mode::Infer)));
}

TEST(Trainer, ClassCountMismatch) {
  SyntheticSpec spec;
  spec.samples = 4;
  spec.image_size = 16;
  spec.classes = 3;
  Network<float> net(tiny_graph(4), 0);
  EXPECT_THROW(train_loop(net, make_synthetic(spec), nullptr, TrainConfig{}), ConfigError);
}

TEST(Trainer, JsonLine) {
  EpochRecord r;
  r.epoch = 2;
  r.lr = 0.5;
  r.eval.top1 = 0.25;
  EXPECT_EQ(to_json_line(r),
            R"({"epoch":2,"lr":0.5,"train_loss":0.0,"train_accuracy":0.0,"top1":0.25,"top5":null})");
}

TEST(Config, ParsesFullDocument) {
  const auto cfg = parse_config(nlohmann::json::parse(R"({
    "arch": "mv1", "alpha": 0.25, "num_classes": 4, "input_size": 32,
    "ulsam": {"g": 4, "positions": ["8:1", "11"]},
    "dataset": {"kind": "synthetic", "classes": 4, "samples": 16, "image_size": 32, "seed": 3},
    "train": {"lr": 0.02, "schedule": "exp", "factor": 0.9, "batch_size": 8, "epochs": 3, "seed": 5}
  })"));
  EXPECT_EQ(cfg.model.alpha, 0.25);
  EXPECT_EQ(cfg.model.groups, 4);
  EXPECT_EQ(cfg.model.positions, (std::vector<std::string>{"8:1", "11"}));
  ASSERT_TRUE(cfg.dataset.has_value());
  EXPECT_EQ(cfg.dataset->synthetic.samples, 16);
  EXPECT_EQ(cfg.train.schedule.kind, ScheduleKind::ExpDecay);
  EXPECT_EQ(cfg.train.seed, 5u);
  EXPECT_EQ(build_graph(cfg.model).ulsam_positions().size(), 2u);
}

TEST(Config, ErrorsNameTheField) {
  const std::pair<const char*, const char*> cases[] = {
      {R"({"alpha": 1.0})", "'arch'"},
      {R"({"arch": "mv1", "ulsam": {"g": "four"}})", "'ulsam.g'"},
      {R"({"arch": "mv1", "colour": 1})", "'colour'"},
      {R"({"arch": "mv1", "train": {"lr": "fast"}})", "'train.lr'"},
      {R"({"arch": "resnet"})", "'arch'"},
  };
  for (const auto& [text, field] : cases) {
    try {
      build_graph(parse_config(nlohmann::json::parse(text)).model);
      ADD_FAILURE() << "accepted " << text;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  }
}
