// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
// followed by indented detail lines; exits non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cli.hpp"
#include "oracles.hpp"
#include "ulsam/attention.hpp"
#include "ulsam/checkpoint.hpp"
#include "ulsam/cost.hpp"
#include "ulsam/gradcheck.hpp"
#include "ulsam/graph.hpp"
#include "ulsam/network.hpp"
#include "ulsam/trainer.hpp"

using namespace ulsam;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fixed(double v, int places) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(places) << v;
  return os.str();
}

// ---------------------------------------------------------------------------

Outcome table1() {
  Outcome o;
  const auto start = Clock::now();
  const char* argv[] = {"ulsam", "table1", "--format", "json"};
  std::ostringstream out, err;
  const int code = run_cli(4, argv, out, err);
  const double elapsed = seconds_since(start);
  o.check(code == 0, "table1 exit code " + std::to_string(code));
  if (code != 0) return o;

  struct Expected { const char* module; const char* params_k; const char* macs_m;
                    const char* params_norm; const char* macs_norm; };
  const Expected expected[] = {
      {"Non-local", "524", "102.76", "512x", "512x"}, {"A2-Net", "66", "12.85", "64x", "64x"},
      {"SE-Net", "33", "0.03", "33x", "0.16x"},       {"BAM", "84", "16.49", "82x", "82.16x"},
      {"CBAM", "33", "0.05", "33x", "0.26x"},         {"ULSAM", "1", "0.2", "1x", "1x"}};
  const auto rows = nlohmann::json::parse(out.str());
  o.check(rows.size() == 6, "six rows");
  for (std::size_t i = 0; i < std::min<std::size_t>(rows.size(), 6); ++i) {
    const auto& r = rows[i];
    const Expected& e = expected[i];
    const std::pair<const char*, const char*> cells[] = {{"params_k", e.params_k},
                                                         {"macs_m", e.macs_m},
                                                         {"params_norm", e.params_norm},
                                                         {"macs_norm", e.macs_norm}};
    for (const auto& [key, want] : cells) {
      const std::string got = r[key].get<std::string>();
      o.check(got == want, std::string(e.module) + " " + key + ": got " + got + ", expected " + want);
    }
  }
  o.check(elapsed < 1.0, "runtime " + fixed(elapsed, 3) + " s < 1 s");
  return o;
}

Outcome model_costs() {
  Outcome o;
  const auto start = Clock::now();
  struct Case { const char* name; std::function<ModelGraph()> build; double params; double macs; };
  auto with = [](ModelGraph g, const char* csv) { return apply_ulsam(g, parse_positions_csv(csv), 4); };
  const Case cases[] = {
      {"MV1 a=1.0", [] { return build_mv1(1.0, 1000); }, 4.2e6, 569e6},
      {"MV1+(8:1,9:1,11)", [&] { return with(build_mv1(1.0, 1000), "8:1,9:1,11"); }, 3.9e6, 517e6},
      {"MV1 a=0.75", [] { return build_mv1(0.75, 1000); }, 2.6e6, 325e6},
      {"MV1 a=0.5", [] { return build_mv1(0.5, 1000); }, 1.3e6, 149e6},
      {"MV2", [] { return build_mv2(1000); }, 3.4e6, 300e6},
      {"MV2+(14,17)", [&] { return with(build_mv2(1000), "14,17"); }, 2.96e6, 261.88e6},
      {"MV2+(16,17)", [&] { return with(build_mv2(1000), "16,17"); }, 2.77e6, 269.07e6},
      {"MV2+(13,14,16,17)", [&] { return with(build_mv2(1000), "13,14,16,17"); }, 2.54e6,
       223.77e6}};
  for (const Case& c : cases) {
    const CostReport r = analyze_model(c.build());
    const double dp = 100.0 * (double(r.total_params) - c.params) / c.params;
    const double dm = 100.0 * (double(r.total_macs) - c.macs) / c.macs;
    o.check(std::abs(dp) <= 2.0, std::string(c.name) + " params " + std::to_string(r.total_params) +
                                     " vs " + fixed(c.params / 1e6, 2) + "M (" + fixed(dp, 2) + "%)");
    o.check(std::abs(dm) <= 2.0, std::string(c.name) + " MACs " + std::to_string(r.total_macs) +
                                     " vs " + fixed(c.macs / 1e6, 2) + "M (" + fixed(dm, 2) + "%)");
  }
  const double elapsed = seconds_since(start);
  o.check(elapsed < 5.0, "runtime " + fixed(elapsed, 3) + " s < 5 s");
  return o;
}

Outcome flops_split() {
  Outcome o;
  const CostReport r = analyze_model(build_mv1(1.0, 1000));
  const double pw = r.kind_share(OpKind::Pointwise);
  const double dw = r.kind_share(OpKind::Depthwise);
  double block = 0.0;
  for (const auto& row : r.rows) {
    for (const char* label : {"8", "9", "10", "11", "12"}) {
      if (row.layer == label) block += row.share;
    }
  }
  o.check(std::abs(pw - 94.86) <= 0.5, "pointwise share " + fixed(pw, 2) + "% (94.86 +- 0.5)");
  o.check(std::abs(dw - 3.06) <= 0.5, "depthwise share " + fixed(dw, 2) + "% (3.06 +- 0.5)");
  o.check(std::abs(block - 46.0) <= 1.0, "layers 8-12 share " + fixed(block, 2) + "% (46 +- 1)");
  return o;
}

Outcome ulsam_invariants() {
  Outcome o;
  const auto start = Clock::now();
  using T = Tensor<double>;
  std::mt19937_64 rng(2024);
  const Index m = 32;

  bool shapes = true, sums = true, params = true, locality = true;
  double worst_sum = 0.0;
  for (Index g : {Index(1), Index(2), Index(4), Index(8), Index(16), m}) {
    const UlsamConfig cfg{m, g};
    const auto w = UlsamWeights<double>::random(cfg, rng);
    const T f = testing::random_tensor({2, m, 9, 7}, rng, -2.0, 2.0);
    const T y = ulsam_forward(f, cfg, w);
    shapes = shapes && y.shape() == f.shape();
    const T maps = ulsam_attention_maps(f, cfg, w);
    for (Index n = 0; n < 2; ++n) {
      for (Index k = 0; k < g; ++k) {
        worst_sum = std::max(worst_sum, std::abs(maps.item(n).row(k).sum() - 1.0));
      }
    }
    params = params && cfg.parameter_count() == 2 * m && w.parameter_count() == 2 * m;

    const Index size = cfg.group_size();
    for (Index k = 0; k < g; ++k) {
      T masked(f.shape());
      for (Index n = 0; n < 2; ++n) masked.item(n).middleRows(k * size, size) = f.item(n).middleRows(k * size, size);
      locality = locality && bitwise_equal(channel_slice(ulsam_forward(masked, cfg, w), k * size, size),
                                           channel_slice(y, k * size, size));
    }
  }
  sums = worst_sum <= 1e-12;
  o.check(shapes, "output shape preserved for g in {1,2,4,8,16,m}");
  o.check(sums, "per-group attention sums within " + fixed(worst_sum * 1e15, 1) + "e-15 of 1");
  o.check(params, "parameter count 2m = " + std::to_string(2 * m) + " for every g");
  o.check(locality, "group independence (bitwise)");

  bool equivariant = true;
  for (Index g : {Index(1), Index(4), Index(8)}) {
    const UlsamConfig cfg{m, g};
    const auto w = UlsamWeights<double>::random(cfg, rng);
    const T f = testing::random_tensor({2, m, 6, 6}, rng, -2.0, 2.0);
    const Index size = cfg.group_size();
    std::vector<Index> perm(static_cast<std::size_t>(m));
    std::iota(perm.begin(), perm.end(), 0);
    for (Index k = 0; k < g; ++k) {
      std::shuffle(perm.begin() + k * size, perm.begin() + (k + 1) * size, rng);
    }
    T fp = f;
    auto wp = w;
    for (Index c = 0; c < m; ++c) {
      for (Index n = 0; n < 2; ++n) fp.item(n).row(c) = f.item(n).row(perm[c]);
      wp.depthwise[c] = w.depthwise[perm[c]];
      wp.pointwise[c] = w.pointwise[perm[c]];
    }
    const T y = ulsam_forward(f, cfg, w);
    const T yp = ulsam_forward(fp, cfg, wp);
    for (Index c = 0; c < m; ++c) {
      for (Index n = 0; n < 2; ++n) {
        equivariant = equivariant && std::memcmp(yp.channel(n, c), y.channel(n, perm[c]),
                                                 sizeof(double) * y.shape().plane()) == 0;
      }
    }
  }
  o.check(equivariant, "within-group permutation equivariance (bitwise, 64-bit)");

  const UlsamConfig case3{m, m};
  const auto w3 = UlsamWeights<double>::random(case3, rng);
  const T f3 = testing::random_tensor({2, m, 5, 5}, rng, -2.0, 2.0);
  o.check(bitwise_equal(case3_reduction_check(f3, case3, w3), ulsam_attention_maps(f3, case3, w3)),
          "g=m maps bitwise equal to the closed form");

  const double elapsed = seconds_since(start);
  o.check(elapsed < 10.0, "runtime " + fixed(elapsed, 3) + " s < 10 s");
  return o;
}

Outcome gradient_suite() {
  Outcome o;
  const auto start = Clock::now();
  const auto records = run_gradcheck(GradcheckOptions{});
  const double elapsed = seconds_since(start);
  double worst_op = 0.0, worst_net = 0.0;
  for (const auto& r : records) {
    (r.op == "network" ? worst_net : worst_op) = std::max(r.op == "network" ? worst_net : worst_op,
                                                          r.max_rel_error);
    if (!r.passed()) o.check(false, r.op + " " + r.shape + " max rel error " + std::to_string(r.max_rel_error));
  }
  o.check(worst_op < 1e-4, std::to_string(records.size()) + " records; worst per-op rel error " +
                               std::to_string(worst_op) + " < 1e-4");
  o.check(worst_net < 1e-3, "worst end-to-end rel error " + std::to_string(worst_net) + " < 1e-3");
  o.check(elapsed < 60.0, "runtime " + fixed(elapsed, 1) + " s < 60 s");
  return o;
}

Outcome instrumented_macs() {
  Outcome o;
  struct Case { const char* name; ModelGraph graph; };
  auto with = [](ModelGraph g, const char* csv) { return apply_ulsam(g, parse_positions_csv(csv), 4); };
  const Case cases[] = {{"MV1", build_mv1(1.0, 1000)},
                        {"MV1+(8:1,9:1,11)", with(build_mv1(1.0, 1000), "8:1,9:1,11")},
                        {"MV2", build_mv2(1000)},
                        {"MV2+(13,14,16,17)", with(build_mv2(1000), "13,14,16,17")}};
  for (const Case& c : cases) {
    const CostReport report = analyze_model(c.graph);
    Network<float> net(c.graph, 0);
    MacCounts counted{};
    std::int64_t total = 0;
    {
      MacTally tally;
      net.forward(Tensor<float>(1, 3, 224, 224), Mode::Infer);
      counted = tally.counts();
      total = tally.total();
    }
    o.check(total == report.total_macs, std::string(c.name) + " instrumented " + std::to_string(total) +
                                            " vs analytic " + std::to_string(report.total_macs));
    o.check(counted == report.macs_by_kind, std::string(c.name) + " per-kind tallies agree");
  }
  return o;
}

/// Mean of loss[e-4 .. e].
double smoothed(const std::vector<EpochRecord>& h, std::size_t e) {
  double s = 0.0;
  for (std::size_t i = e - 4; i <= e; ++i) s += h[i].train_loss;
  return s / 5.0;
}

Outcome training_sanity() {
  Outcome o;
  const auto start = Clock::now();
  testing::TempDir dir("acceptance");

  SyntheticSpec spec;
  spec.classes = 4;
  spec.samples = 256;
  spec.image_size = 64;
  spec.seed = 1;
  spec.noise = 1.0f;
  const Dataset data = make_synthetic(spec);

  ModelGraph graph = apply_ulsam(build_mv1(0.25, 4), parse_positions_csv("8:1,9:1,11"), 4);
  graph.input_size = 64;
  Network<float> net(graph, 7);

  TrainConfig cfg;
  cfg.schedule = LrSchedule::exp_decay(0.02, 0.9);
  cfg.momentum = 0.9;
  cfg.weight_decay = 4e-5;
  cfg.batch_size = 64;
  cfg.epochs = 30;
  cfg.seed = 7;
  cfg.checkpoint_path = dir.file("final.ulsm");
  const auto history = train_loop(net, data, nullptr, cfg);
  const double elapsed = seconds_since(start);

  int first = -1;
  for (const auto& r : history) {
    if (first < 0 && r.eval.top1 > 0.95) first = r.epoch;
  }
  o.check(first >= 0, "training-set top-1 (inference mode) > 95% first at epoch " +
                          std::to_string(first) + "; final " + fixed(history.back().eval.top1, 4));

  int violations = 0;
  std::string worst;
  for (std::size_t e = 5; e + 1 < history.size(); ++e) {
    if (smoothed(history, e + 1) > smoothed(history, e)) {
      ++violations;
      worst += " " + std::to_string(e + 1);
    }
  }
  o.check(violations == 0, "5-epoch mean loss non-increasing after epoch 5 (" +
                               std::to_string(violations) + " increases" + worst + "); final loss " +
                               fixed(history.back().train_loss, 5));

  Network<float> reloaded(graph, 12345);
  load_checkpoint(cfg.checkpoint_path, reloaded.tensors());
  bool same = true;
  for (std::size_t i = 0; i < net.tensors().size(); ++i) {
    same = same && bitwise_equal(*net.tensors()[i].tensor, *reloaded.tensors()[i].tensor);
  }
  same = same && bitwise_equal(net.forward(data.images, Mode::Infer),
                               reloaded.forward(data.images, Mode::Infer));
  o.check(same, "checkpoint round-trip bitwise (tensors and logits)");
  o.check(elapsed < 300.0, "runtime " + fixed(elapsed, 1) + " s < 300 s");
  return o;
}

Outcome lr_schedules() {
  Outcome o;
  const auto step = LrSchedule::step_decay(0.1);
  o.check(lr_at(step, 0) == 0.1 && lr_at(step, 30) == 0.01 && lr_at(step, 60) == 0.001,
          "StepDecay 0.1 / 0.01 / 0.001 at epochs 0 / 30 / 60");
  const auto exp = LrSchedule::exp_decay(0.045, 0.98);
  bool exact = true;
  for (int e = 0; e <= 300; ++e) exact = exact && lr_at(exp, e) == 0.045 * std::pow(0.98, e);
  o.check(exact, "ExpDecay equals 0.045 * 0.98^e exactly for e in [0, 300]");
  return o;
}

}  // namespace

int main() {
  struct Criterion { int id; const char* title; std::function<Outcome()> run; };
  const Criterion criteria[] = {
      {1, "Table 1 attention overheads", table1},
      {2, "model parameter and MAC totals", model_costs},
      {3, "MV1 MAC split", flops_split},
      {4, "ULSAM structural invariants", ulsam_invariants},
      {5, "finite-difference gradient suite", gradient_suite},
      {6, "analytic vs instrumented MACs", instrumented_macs},
      {7, "desk-scale training sanity", training_sanity},
      {8, "learning-rate schedules", lr_schedules},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << ": " << c.title << "\n";
    for (const auto& n : o.notes) std::cout << "    " << n << "\n";
    std::cout.flush();
    if (!o.pass) ++failed;
  }
  std::cout << (std::size(criteria) - failed) << "/" << std::size(criteria) << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
