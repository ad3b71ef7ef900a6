#include "ulsam/trainer.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include <json.hpp>

#include "ulsam/checkpoint.hpp"

namespace ulsam {
namespace {

void check_classes(const Network<float>& net, const Dataset& data, const char* what) {
  if (net.num_classes() != data.classes) {
    throw ConfigError(std::string(what) + ": model head has " + std::to_string(net.num_classes()) +
                      " classes, dataset has " + std::to_string(data.classes));
  }
  if (data.size() < 1) throw DataError(std::string(what) + ": empty dataset");
}

void flip_horizontal(Tensor<float>& batch, Index item) {
  const Shape& s = batch.shape();
  for (Index c = 0; c < s.c; ++c) {
    for (Index i = 0; i < s.h; ++i) {
      float* row = &batch(item, c, i, 0);
      std::reverse(row, row + s.w);
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  schedule.validate();
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
}

std::string to_json_line(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["train_loss"] = r.train_loss;
  j["train_accuracy"] = r.train_accuracy;
  j["top1"] = r.eval.top1;
  j["top5"] = r.eval.top5 ? nlohmann::ordered_json(*r.eval.top5) : nlohmann::ordered_json(nullptr);
  return j.dump();
}

EvalResult evaluate(Network<float>& net, const Dataset& data, int batch_size) {
  check_classes(net, data, "evaluate");
  if (batch_size < 1) throw ConfigError("evaluate: batch size must be >= 1");
  const Index n = data.size();
  const bool want_top5 = data.classes >= 5;
  double top1 = 0.0;
  double top5 = 0.0;
  std::vector<Index> idx;
  for (Index start = 0; start < n; start += batch_size) {
    const Index count = std::min<Index>(batch_size, n - start);
    idx.resize(static_cast<std::size_t>(count));
    std::iota(idx.begin(), idx.end(), start);
    const auto logits = net.forward(data.gather(idx), Mode::Infer);
    const auto labels = data.gather_labels(idx);
    top1 += topk_accuracy(logits, labels, 1) * double(count);
    if (want_top5) top5 += topk_accuracy(logits, labels, 5) * double(count);
  }
  EvalResult r{top1 / double(n), std::nullopt};
  if (want_top5) r.top5 = top5 / double(n);
  return r;
}

std::vector<EpochRecord> train_loop(Network<float>& net, const Dataset& train_data,
                                    const Dataset* eval_data, const TrainConfig& config,
                                    const std::function<void(const EpochRecord&)>& on_epoch) {
  config.validate();
  check_classes(net, train_data, "train");
  const Dataset& eval_set = eval_data ? *eval_data : train_data;
  check_classes(net, eval_set, "train");

  std::vector<Tensor<float>*> params;
  for (auto& t : net.trainable()) params.push_back(t.tensor);
  SgdState<float> state;

  const Index n = train_data.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::vector<EpochRecord> history;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::seed_seq seq{std::uint64_t(config.seed), std::uint64_t(epoch)};
    std::mt19937_64 rng(seq);
    std::iota(order.begin(), order.end(), Index(0));
    std::shuffle(order.begin(), order.end(), rng);
    std::bernoulli_distribution coin(0.5);

    const SgdOptions opt{lr_at(config.schedule, epoch), config.momentum, config.weight_decay};
    double loss_sum = 0.0;
    double correct = 0.0;
    for (Index start = 0; start < n; start += config.batch_size) {
      const Index count = std::min<Index>(config.batch_size, n - start);
      const std::span<const Index> idx(order.data() + start, static_cast<std::size_t>(count));
      Tensor<float> batch = train_data.gather(idx);
      if (config.flip) {
        for (Index i = 0; i < count; ++i) {
          if (coin(rng)) flip_horizontal(batch, i);
        }
      }
      const auto labels = train_data.gather_labels(idx);
      const auto logits = net.forward(batch, Mode::Train);
      const auto loss = cross_entropy(logits, labels);
      net.zero_grad();
      net.backward(loss.grad);
      sgd_step<float>(params, state, opt);
      loss_sum += loss.loss * double(count);
      correct += topk_accuracy(logits, labels, 1) * double(count);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = opt.lr;
    rec.train_loss = loss_sum / double(n);
    rec.train_accuracy = correct / double(n);
    rec.eval = evaluate(net, eval_set, config.batch_size);
    if (!config.checkpoint_path.empty()) save_checkpoint(config.checkpoint_path, net.tensors());
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

}  // namespace ulsam
