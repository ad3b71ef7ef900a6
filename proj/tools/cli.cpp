#include "cli.hpp"

#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "ulsam/checkpoint.hpp"
#include "ulsam/config.hpp"
#include "ulsam/cost.hpp"
#include "ulsam/gradcheck.hpp"
#include "ulsam/trainer.hpp"

namespace ulsam {
namespace {

struct Options {
  std::string config;
  std::string arch;
  int groups = 0;
  std::string positions;
  double alpha = 1.0;
  int num_classes = 0;
  int input_size = 0;
  std::uint64_t seed = 0;
  std::string format = "text";
  std::string out;
  std::string checkpoint;
  int k = 0;
  bool count_bn = false;
  std::string fault;

  CLI::Option* arch_opt = nullptr;
  CLI::Option* groups_opt = nullptr;
  CLI::Option* positions_opt = nullptr;
  CLI::Option* alpha_opt = nullptr;
  CLI::Option* classes_opt = nullptr;
  CLI::Option* input_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* k_opt = nullptr;
};

void add_format(CLI::App* cmd, Options& o) {
  cmd->add_option("--format", o.format, "Output format")->check(CLI::IsMember({"text", "json"}));
  cmd->add_option("--out", o.out, "Write output to PATH instead of stdout");
}

void add_model(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "JSON run configuration");
  o.arch_opt = cmd->add_option("--arch", o.arch, "Architecture")->check(CLI::IsMember({"mv1", "mv2"}));
  o.groups_opt = cmd->add_option("--g", o.groups, "ULSAM subspace count");
  o.positions_opt = cmd->add_option("--positions", o.positions, "ULSAM positions, e.g. 8:1,9:1,11");
  o.alpha_opt = cmd->add_option("--alpha", o.alpha, "Width multiplier");
  o.classes_opt = cmd->add_option("--num-classes", o.num_classes, "Classifier outputs");
  o.input_opt = cmd->add_option("--input-size", o.input_size, "Square input resolution");
}

void add_seed(CLI::App* cmd, Options& o) {
  o.seed_opt = cmd->add_option("--seed", o.seed, "Random seed");
}

/// Config file first, then command-line overrides.
RunConfig resolve(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  ModelConfig& m = cfg.model;
  if (o.arch_opt && o.arch_opt->count()) m.arch = o.arch;
  if (o.alpha_opt && o.alpha_opt->count()) m.alpha = o.alpha;
  if (o.classes_opt && o.classes_opt->count()) m.num_classes = o.num_classes;
  if (o.input_opt && o.input_opt->count()) m.input_size = o.input_size;
  if (o.groups_opt && o.groups_opt->count()) m.groups = o.groups;
  if (o.positions_opt && o.positions_opt->count()) {
    m.positions.clear();
    for (const auto& d : parse_positions_csv(o.positions)) m.positions.push_back(d.to_string());
  }
  if (o.seed_opt && o.seed_opt->count()) cfg.train.seed = o.seed;
  if (!(m.alpha > 0.0 && m.alpha <= 1.0)) throw ConfigError("--alpha must be in (0, 1]");
  if (m.num_classes < 1) throw ConfigError("--num-classes must be >= 1");
  if (m.input_size < 1) throw ConfigError("--input-size must be >= 1");
  if (m.groups < 1) throw ConfigError("--g must be >= 1");
  return cfg;
}

/// Writes to --out when given, otherwise to `out`.
void emit(const Options& o, std::ostream& out, const std::string& text) {
  if (o.out.empty()) {
    out << text;
    return;
  }
  std::ofstream f(o.out);
  if (!f) throw ConfigError("--out: cannot open '" + o.out + "' for writing");
  f << text;
}

struct Datasets {
  Dataset train;
  std::optional<Dataset> eval;
};

Datasets load_datasets(const RunConfig& cfg) {
  if (!cfg.dataset) throw ConfigError("config: field 'dataset' is required for this command");
  const DatasetConfig& d = *cfg.dataset;
  Datasets out;
  if (d.kind == DatasetKind::Synthetic) {
    out.train = make_synthetic(d.synthetic);
  } else {
    out.train = load_cifar10_binary(d.train_paths, d.normalization);
    if (!d.eval_paths.empty()) out.eval = load_cifar10_binary(d.eval_paths, d.normalization);
  }
  return out;
}

int cmd_analyze(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve(o);
  const ModelGraph graph = build_graph(cfg.model);
  const CostReport report = analyze_model(graph, CostOptions{o.count_bn});
  emit(o, out, o.format == "json" ? report_json(report).dump(2) + "\n" : format_report(report));
  return kExitOk;
}

int cmd_describe(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve(o);
  emit(o, out, describe(build_graph(cfg.model)));
  return kExitOk;
}

int cmd_table1(const Options& o, std::ostream& out) {
  const auto rows = table1_rows();
  emit(o, out, o.format == "json" ? table1_json(rows).dump(2) + "\n" : format_table1(rows));
  return kExitOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out, std::ostream& err) {
  GradcheckOptions opt;
  opt.seed = o.seed;
  opt.fault = o.fault;
  const auto records = run_gradcheck(opt);
  emit(o, out, o.format == "json" ? gradcheck_json(records).dump(2) + "\n" : format_gradcheck(records));
  int status = kExitOk;
  for (const auto& r : records) {
    if (!r.passed()) {
      err << "gradcheck failed: op " << r.op << ", shape " << r.shape << ", max relative error "
          << std::scientific << std::setprecision(3) << r.max_rel_error << "\n";
      status = kExitCheckFailed;
    }
  }
  return status;
}

int cmd_train(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve(o);
  const Datasets data = load_datasets(cfg);
  cfg.train.checkpoint_path = o.checkpoint;
  ModelGraph graph = build_graph(cfg.model);
  graph.input_size = int(data.train.images.shape().h);
  Network<float> net(graph, cfg.train.seed);

  std::ofstream file;
  if (!o.out.empty()) {
    file.open(o.out);
    if (!file) throw ConfigError("--out: cannot open '" + o.out + "' for writing");
  }
  std::ostream& history = o.out.empty() ? out : file;
  train_loop(net, data.train, data.eval ? &*data.eval : nullptr, cfg.train,
             [&](const EpochRecord& r) {
               history << to_json_line(r) << "\n";
               history.flush();
               if (!o.out.empty() && o.format == "text") {
                 out << "epoch " << r.epoch << " lr " << r.lr << " loss " << r.train_loss
                     << " top1 " << r.eval.top1 << "\n";
               }
             });
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve(o);
  const Datasets data = load_datasets(cfg);
  const Dataset& set = data.eval ? *data.eval : data.train;
  if (o.k_opt->count() && (o.k < 1 || o.k > set.classes)) {
    throw ConfigError("--k " + std::to_string(o.k) + " outside [1, " + std::to_string(set.classes) +
                      "]");
  }
  ModelGraph graph = build_graph(cfg.model);
  graph.input_size = int(set.images.shape().h);
  Network<float> net(graph, cfg.train.seed);
  load_checkpoint(o.checkpoint, net.tensors());
  const EvalResult r = evaluate(net, set, cfg.train.batch_size);

  nlohmann::ordered_json j;
  j["top1"] = r.top1;
  j["top5"] = r.top5 ? nlohmann::ordered_json(*r.top5) : nlohmann::ordered_json(nullptr);
  if (o.k_opt->count() && o.k != 1 && o.k != 5) {
    std::vector<Index> idx(static_cast<std::size_t>(set.size()));
    for (Index i = 0; i < set.size(); ++i) idx[i] = i;
    j["top" + std::to_string(o.k)] =
        topk_accuracy(net.forward(set.gather(idx), Mode::Infer), set.labels, o.k);
  }
  if (o.format == "json") {
    emit(o, out, j.dump() + "\n");
  } else {
    std::ostringstream os;
    for (const auto& [key, value] : j.items()) {
      os << key << " " << (value.is_null() ? std::string("n/a") : value.dump()) << "\n";
    }
    emit(o, out, os.str());
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"ULSAM subspace attention: cost analysis, gradient checks and training"};
  app.name("ulsam");
  app.require_subcommand(1, 1);
  Options oa, od, ot, og, otr, oe;

  auto* analyze = app.add_subcommand("analyze", "Per-layer parameter and MAC report");
  add_model(analyze, oa);
  add_format(analyze, oa);
  analyze->add_flag("--count-bn", oa.count_bn, "Include batch-norm parameters");

  auto* describe_cmd = app.add_subcommand("describe", "Print the layer list of a model");
  add_model(describe_cmd, od);
  add_format(describe_cmd, od);

  auto* table1 = app.add_subcommand("table1", "Attention-module overhead comparison");
  add_format(table1, ot);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  add_seed(gradcheck, og);
  add_format(gradcheck, og);
  gradcheck->add_option("--inject-fault", og.fault, "Corrupt the analytic gradient of OP");

  auto* train = app.add_subcommand("train", "Train a model; history as JSON lines");
  add_model(train, otr);
  add_seed(train, otr);
  add_format(train, otr);
  train->add_option("--checkpoint", otr.checkpoint, "Checkpoint written after every epoch")
      ->default_val("checkpoint.ulsm");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_model(eval, oe);
  add_seed(eval, oe);
  add_format(eval, oe);
  eval->add_option("--checkpoint", oe.checkpoint, "Checkpoint to load")->required();
  oe.k_opt = eval->add_option("--k", oe.k, "Also report top-k accuracy");

  try {
    std::vector<std::string> args;
    for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*analyze) return cmd_analyze(oa, out);
    if (*describe_cmd) return cmd_describe(od, out);
    if (*table1) return cmd_table1(ot, out);
    if (*gradcheck) return cmd_gradcheck(og, out, err);
    if (*train) return cmd_train(otr, out);
    if (*eval) return cmd_eval(oe, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IngestError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace ulsam
