#include "ulsam/config.hpp"

#include <fstream>
#include <initializer_list>

namespace ulsam {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& field, const std::string& why) {
  throw ConfigError("config: field '" + field + "' " + why);
}

void reject_unknown(const json& obj, const std::string& prefix,
                    std::initializer_list<const char*> known) {
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) fail(prefix + key, "is not recognised");
  }
}

const json* member(const json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

const json& object(const json& obj, const char* key, const std::string& field) {
  const json& v = obj.at(key);
  if (!v.is_object()) fail(field, "must be an object");
  return v;
}

void read_number(const json& obj, const char* key, const std::string& prefix, double& out) {
  if (const json* v = member(obj, key)) {
    if (!v->is_number()) fail(prefix + key, "must be a number");
    out = v->get<double>();
  }
}

template <typename Int>
void read_int(const json& obj, const char* key, const std::string& prefix, Int& out) {
  if (const json* v = member(obj, key)) {
    if (!v->is_number_integer()) fail(prefix + key, "must be an integer");
    out = v->get<Int>();
  }
}

void read_string(const json& obj, const char* key, const std::string& prefix, std::string& out) {
  if (const json* v = member(obj, key)) {
    if (!v->is_string()) fail(prefix + key, "must be a string");
    out = v->get<std::string>();
  }
}

std::vector<std::string> string_list(const json& v, const std::string& field) {
  if (!v.is_array()) fail(field, "must be an array of strings");
  std::vector<std::string> out;
  for (const auto& item : v) {
    if (!item.is_string()) fail(field, "must be an array of strings");
    out.push_back(item.get<std::string>());
  }
  return out;
}

std::array<float, 3> triple(const json& v, const std::string& field) {
  if (!v.is_array() || v.size() != 3) fail(field, "must be an array of 3 numbers");
  std::array<float, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (!v[i].is_number()) fail(field, "must be an array of 3 numbers");
    out[i] = v[i].get<float>();
  }
  return out;
}

DatasetConfig parse_dataset(const json& d) {
  reject_unknown(d, "dataset.", {"kind", "classes", "samples", "image_size", "seed", "noise",
                                 "train", "eval", "mean", "std"});
  DatasetConfig out;
  std::string kind;
  read_string(d, "kind", "dataset.", kind);
  if (kind == "synthetic") {
    out.kind = DatasetKind::Synthetic;
    auto& s = out.synthetic;
    read_int(d, "classes", "dataset.", s.classes);
    read_int(d, "samples", "dataset.", s.samples);
    read_int(d, "image_size", "dataset.", s.image_size);
    read_int(d, "seed", "dataset.", s.seed);
    double noise = s.noise;
    read_number(d, "noise", "dataset.", noise);
    s.noise = float(noise);
    if (s.classes < 1) fail("dataset.classes", "must be >= 1");
    if (s.samples < 1) fail("dataset.samples", "must be >= 1");
    if (s.image_size < 1) fail("dataset.image_size", "must be >= 1");
  } else if (kind == "cifar10") {
    out.kind = DatasetKind::Cifar10;
    const json* train = member(d, "train");
    if (!train) fail("dataset.train", "is required for cifar10");
    out.train_paths = string_list(*train, "dataset.train");
    if (out.train_paths.empty()) fail("dataset.train", "must list at least one file");
    if (const json* e = member(d, "eval")) out.eval_paths = string_list(*e, "dataset.eval");
  } else {
    fail("dataset.kind", "must be \"synthetic\" or \"cifar10\"");
  }
  if (const json* m = member(d, "mean")) out.normalization.mean = triple(*m, "dataset.mean");
  if (const json* s = member(d, "std")) {
    out.normalization.stddev = triple(*s, "dataset.std");
    for (float v : out.normalization.stddev) {
      if (!(v > 0.0f)) fail("dataset.std", "entries must be > 0");
    }
  }
  return out;
}

TrainConfig parse_train(const json& t) {
  reject_unknown(t, "train.", {"lr", "schedule", "factor", "every", "momentum", "weight_decay",
                               "batch_size", "epochs", "seed", "flip"});
  TrainConfig out;
  std::string schedule = "step";
  read_string(t, "schedule", "train.", schedule);
  if (schedule == "step") {
    out.schedule = LrSchedule::step_decay(0.1);
  } else if (schedule == "exp") {
    out.schedule = LrSchedule::exp_decay(0.045);
  } else {
    fail("train.schedule", "must be \"step\" or \"exp\"");
  }
  read_number(t, "lr", "train.", out.schedule.initial);
  read_number(t, "factor", "train.", out.schedule.factor);
  read_int(t, "every", "train.", out.schedule.every);
  read_number(t, "momentum", "train.", out.momentum);
  read_number(t, "weight_decay", "train.", out.weight_decay);
  read_int(t, "batch_size", "train.", out.batch_size);
  read_int(t, "epochs", "train.", out.epochs);
  read_int(t, "seed", "train.", out.seed);
  if (const json* f = member(t, "flip")) {
    if (!f->is_boolean()) fail("train.flip", "must be a boolean");
    out.flip = f->get<bool>();
  }
  if (!(out.schedule.initial > 0.0)) fail("train.lr", "must be > 0");
  if (!(out.schedule.factor > 0.0 && out.schedule.factor < 1.0)) fail("train.factor", "must be in (0, 1)");
  if (out.schedule.every < 1) fail("train.every", "must be >= 1");
  if (!(out.momentum >= 0.0 && out.momentum < 1.0)) fail("train.momentum", "must be in [0, 1)");
  if (!(out.weight_decay >= 0.0)) fail("train.weight_decay", "must be >= 0");
  if (out.batch_size < 1) fail("train.batch_size", "must be >= 1");
  if (out.epochs < 0) fail("train.epochs", "must be >= 0");
  return out;
}

}  // namespace

RunConfig parse_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  reject_unknown(j, "", {"arch", "alpha", "num_classes", "input_size", "ulsam", "dataset", "train"});
  RunConfig cfg;
  auto& m = cfg.model;
  if (!member(j, "arch")) fail("arch", "is required");
  read_string(j, "arch", "", m.arch);
  if (m.arch != "mv1" && m.arch != "mv2") fail("arch", "must be \"mv1\" or \"mv2\"");
  read_number(j, "alpha", "", m.alpha);
  read_int(j, "num_classes", "", m.num_classes);
  read_int(j, "input_size", "", m.input_size);
  if (!(m.alpha > 0.0 && m.alpha <= 1.0)) fail("alpha", "must be in (0, 1]");
  if (m.arch == "mv2" && m.alpha != 1.0) fail("alpha", "must be 1.0 for mv2");
  if (m.num_classes < 1) fail("num_classes", "must be >= 1");
  if (m.input_size < 1) fail("input_size", "must be >= 1");

  if (member(j, "ulsam")) {
    const json& u = object(j, "ulsam", "ulsam");
    reject_unknown(u, "ulsam.", {"g", "positions"});
    read_int(u, "g", "ulsam.", m.groups);
    if (m.groups < 1) fail("ulsam.g", "must be >= 1");
    if (const json* p = member(u, "positions")) m.positions = string_list(*p, "ulsam.positions");
    try {
      parse_positions(m.positions);
    } catch (const DirectiveError& e) {
      fail("ulsam.positions", std::string("is invalid: ") + e.what());
    }
  }
  if (member(j, "dataset")) cfg.dataset = parse_dataset(object(j, "dataset", "dataset"));
  if (member(j, "train")) cfg.train = parse_train(object(j, "train", "train"));
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

ModelGraph build_graph(const ModelConfig& model) {
  ModelGraph g;
  if (model.arch == "mv1") {
    g = build_mv1(model.alpha, model.num_classes);
  } else if (model.arch == "mv2") {
    if (model.alpha != 1.0) throw ConfigError("config: field 'alpha' must be 1.0 for mv2");
    g = build_mv2(model.num_classes);
  } else {
    throw ConfigError("config: field 'arch' must be \"mv1\" or \"mv2\"");
  }
  g.input_size = model.input_size;
  if (!model.positions.empty()) g = apply_ulsam(g, parse_positions(model.positions), model.groups);
  return g;
}

}  // namespace ulsam
