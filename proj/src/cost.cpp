#include "ulsam/cost.hpp"

#include <cmath>
#include <cstdio>
#include <iomanip>
#include <sstream>

#include "ulsam/errors.hpp"

namespace ulsam {

std::int64_t flops_sconv(std::int64_t kernel, std::int64_t m, std::int64_t n, std::int64_t h,
                         std::int64_t w) {
  return kernel * kernel * m * n * h * w;
}

DwsMacs flops_dws(std::int64_t kernel, std::int64_t m, std::int64_t n, std::int64_t h,
                  std::int64_t w) {
  return {kernel * kernel * m * h * w, m * n * h * w};
}

const char* attention_kind_name(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::NonLocal: return "Non-local";
    case AttentionKind::A2Net: return "A2-Net";
    case AttentionKind::SENet: return "SE-Net";
    case AttentionKind::BAM: return "BAM";
    case AttentionKind::CBAM: return "CBAM";
    case AttentionKind::ULSAM: return "ULSAM";
  }
  return "?";
}

Overhead attention_overhead(const AttentionOverheadQuery& q) {
  if (q.m < 1 || q.h < 1 || q.w < 1) throw ConfigError("attention_overhead: m, h, w must be >= 1");
  const std::int64_t m = q.m;
  const std::int64_t hw = q.h * q.w;
  const bool mlp = q.kind == AttentionKind::SENet || q.kind == AttentionKind::BAM ||
                   q.kind == AttentionKind::CBAM;
  if (mlp) {
    if (q.r < 1 || m % q.r != 0) {
      throw ConfigError("attention_overhead: r=" + std::to_string(q.r) + " does not divide m=" +
                        std::to_string(m));
    }
  }
  const std::int64_t mlp_cost = 2 * m * m / q.r;
  switch (q.kind) {
    case AttentionKind::NonLocal:
      return {2 * m * m, 2 * m * m * hw};
    case AttentionKind::A2Net: {
      const std::int64_t t = q.t.value_or(m / 8);
      return {2 * m * t, 2 * m * t * hw};
    }
    case AttentionKind::SENet:
      return {mlp_cost, mlp_cost};
    case AttentionKind::BAM: {
      if ((m * m) % (q.r * q.r) != 0) {
        throw ConfigError("attention_overhead: r^2 does not divide m^2 for BAM");
      }
      const std::int64_t params = 4 * m * m / q.r + 18 * m * m / (q.r * q.r);
      return {params, mlp_cost + params * hw};
    }
    case AttentionKind::CBAM:
      return {mlp_cost + 98, mlp_cost + 98 * hw};
    case AttentionKind::ULSAM:
      return {2 * m, 2 * m * hw};
  }
  throw ConfigError("attention_overhead: unknown kind");
}

std::string format_trimmed(double value, int places) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(places) << value;
  std::string s = os.str();
  if (s.find('.') != std::string::npos) {
    while (!s.empty() && s.back() == '0') s.pop_back();
    if (!s.empty() && s.back() == '.') s.pop_back();
  }
  if (s == "-0") s = "0";
  return s;
}

std::vector<Table1Row> table1_rows(std::int64_t m, std::int64_t h, std::int64_t w, std::int64_t r) {
  const AttentionKind kinds[] = {AttentionKind::NonLocal, AttentionKind::A2Net,
                                 AttentionKind::SENet,    AttentionKind::BAM,
                                 AttentionKind::CBAM,     AttentionKind::ULSAM};
  const Overhead base = attention_overhead({AttentionKind::ULSAM, m, h, w, std::nullopt, r});
  std::vector<Table1Row> rows;
  for (AttentionKind kind : kinds) {
    Table1Row row{kind, attention_overhead({kind, m, h, w, std::nullopt, r}), {}, {}, {}, {}};
    row.params_k = format_trimmed(double(row.cost.params) / 1e3, 0);
    row.macs_m = format_trimmed(double(row.cost.macs) / 1e6, 2);
    row.params_norm = format_trimmed(double(row.cost.params) / double(base.params), 0) + "x";
    row.macs_norm = format_trimmed(double(row.cost.macs) / double(base.macs), 2) + "x";
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_table1(const std::vector<Table1Row>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(11) << "module" << " | " << std::right << std::setw(9)
     << "params/1e3" << " | " << std::setw(8) << "MACs/1e6" << " | " << std::setw(12)
     << "params(norm)" << " | " << std::setw(10) << "MACs(norm)" << "\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(11) << attention_kind_name(r.kind) << " | " << std::right
       << std::setw(10) << r.params_k << " | " << std::setw(8) << r.macs_m << " | "
       << std::setw(12) << r.params_norm << " | " << std::setw(10) << r.macs_norm << "\n";
  }
  os << "MACs: multiply-accumulates (the s_k*s_k*m*n*h*w FLOPs convention); m=512, t=m/8, r=16, "
        "h*w=14*14\n";
  return os.str();
}

nlohmann::json table1_json(const std::vector<Table1Row>& rows) {
  auto out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"module", attention_kind_name(r.kind)},
                   {"params", r.cost.params},
                   {"macs", r.cost.macs},
                   {"params_k", r.params_k},
                   {"macs_m", r.macs_m},
                   {"params_norm", r.params_norm},
                   {"macs_norm", r.macs_norm}});
  }
  return out;
}

namespace {

int conv_out(int in, int kernel, int stride) {
  const int pad = kernel / 2;
  return (in + 2 * pad - kernel) / stride + 1;
}

void add_macs(CostRow& row, OpKind kind, std::int64_t macs) {
  row.macs_by_kind[static_cast<std::size_t>(kind)] += macs;
  row.macs += macs;
}

}  // namespace

double CostReport::kind_share(OpKind kind) const {
  if (total_macs == 0) return 0.0;
  return 100.0 * double(macs_by_kind[static_cast<std::size_t>(kind)]) / double(total_macs);
}

CostReport analyze_model(const ModelGraph& graph, const CostOptions& options) {
  graph.validate();
  const std::int64_t bn = options.count_batchnorm ? 2 : 0;
  CostReport report;
  report.arch = graph.arch;
  report.positions = graph.ulsam_positions();
  int h = graph.input_size;
  int w = graph.input_size;
  for (const auto& l : graph.layers) {
    CostRow row;
    row.layer = l.label.empty() ? "-" : l.label;
    row.kind = layer_kind_name(l.kind);
    const std::int64_t in = l.in_channels;
    const std::int64_t out = l.out_channels;
    switch (l.kind) {
      case LayerKind::Conv2d: {
        const int ho = conv_out(h, l.kernel, l.stride);
        const int wo = conv_out(w, l.kernel, l.stride);
        const OpKind kind = l.kernel == 1 ? OpKind::Pointwise : OpKind::Standard;
        add_macs(row, kind, flops_sconv(l.kernel, in, out, ho, wo));
        row.params = std::int64_t(l.kernel) * l.kernel * in * out + (l.bias ? out : 0) +
                     (l.batch_norm ? bn * out : 0);
        h = ho;
        w = wo;
        break;
      }
      case LayerKind::DwsBlock: {
        const int ho = conv_out(h, 3, l.stride);
        const int wo = conv_out(w, 3, l.stride);
        const DwsMacs d = flops_dws(3, in, out, ho, wo);
        add_macs(row, OpKind::Depthwise, d.depthwise);
        add_macs(row, OpKind::Pointwise, d.pointwise);
        row.params = 9 * in + bn * in + in * out + bn * out;
        h = ho;
        w = wo;
        break;
      }
      case LayerKind::ResidualBottleneck: {
        const std::int64_t hidden = l.hidden_channels();
        if (l.expansion != 1) {
          add_macs(row, OpKind::Pointwise, flops_sconv(1, in, hidden, h, w));
          row.params += in * hidden + bn * hidden;
        }
        const int ho = conv_out(h, 3, l.stride);
        const int wo = conv_out(w, 3, l.stride);
        const DwsMacs d = flops_dws(3, hidden, out, ho, wo);
        add_macs(row, OpKind::Depthwise, d.depthwise);
        add_macs(row, OpKind::Pointwise, d.pointwise);
        row.params += 9 * hidden + bn * hidden + hidden * out + bn * out;
        h = ho;
        w = wo;
        break;
      }
      case LayerKind::Ulsam: {
        const Overhead o = attention_overhead({AttentionKind::ULSAM, in, h, w, std::nullopt, 16});
        add_macs(row, OpKind::Attention, o.macs);
        row.params = o.params;
        break;
      }
      case LayerKind::GlobalAvgPool:
        h = 1;
        w = 1;
        break;
      case LayerKind::FullyConnected:
        add_macs(row, OpKind::FullyConnected, in * out);
        row.params = in * out + (l.bias ? out : 0);
        break;
      case LayerKind::SoftmaxHead:
        break;
    }
    row.height = h;
    row.width = w;
    report.total_params += row.params;
    report.total_macs += row.macs;
    for (std::size_t k = 0; k < kOpKindCount; ++k) report.macs_by_kind[k] += row.macs_by_kind[k];
    report.rows.push_back(std::move(row));
  }
  for (auto& row : report.rows) {
    row.share = report.total_macs ? 100.0 * double(row.macs) / double(report.total_macs) : 0.0;
  }
  return report;
}

std::string format_millions(std::int64_t value, int places) {
  return format_trimmed(double(value) / 1e6, places) + "M";
}

std::string format_report(const CostReport& report) {
  std::ostringstream os;
  os << std::left << std::setw(8) << "layer" << std::setw(20) << "kind" << std::right
     << std::setw(10) << "out hw" << std::setw(12) << "params" << std::setw(14) << "MACs"
     << std::setw(9) << "share" << "\n";
  for (const auto& r : report.rows) {
    std::ostringstream hw;
    hw << r.height << "x" << r.width;
    std::ostringstream share;
    share << std::fixed << std::setprecision(2) << r.share << "%";
    os << std::left << std::setw(8) << r.layer << std::setw(20) << r.kind << std::right
       << std::setw(10) << hw.str() << std::setw(12) << r.params << std::setw(14) << r.macs
       << std::setw(9) << share.str() << "\n";
  }
  os << "MACs by op kind:";
  for (std::size_t k = 0; k < kOpKindCount; ++k) {
    std::ostringstream share;
    share << std::fixed << std::setprecision(2) << report.kind_share(static_cast<OpKind>(k));
    os << " " << op_kind_name(static_cast<OpKind>(k)) << " " << share.str() << "%";
  }
  os << "\n";
  if (!report.positions.empty()) {
    os << "ULSAM positions: ";
    for (std::size_t i = 0; i < report.positions.size(); ++i) {
      os << (i ? ", " : "") << report.positions[i];
    }
    os << "\n";
  }
  os << "total: " << report.total_params << " params, " << report.total_macs << " MACs\n";
  os << format_millions(report.total_params, 2) << " params / "
     << format_millions(report.total_macs, 2) << " MACs\n";
  os << "(MACs are multiply-accumulates, the s_k*s_k*m*n*h*w FLOPs convention)\n";
  return os.str();
}

nlohmann::json report_json(const CostReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"layer", r.layer},
                    {"kind", r.kind},
                    {"params", r.params},
                    {"macs", r.macs},
                    {"share", r.share}});
  }
  nlohmann::json shares = nlohmann::json::object();
  for (std::size_t k = 0; k < kOpKindCount; ++k) {
    shares[std::string(op_kind_name(static_cast<OpKind>(k)))] =
        report.kind_share(static_cast<OpKind>(k));
  }
  return {{"arch", report.arch},
          {"positions", report.positions},
          {"rows", rows},
          {"total_params", report.total_params},
          {"total_macs", report.total_macs},
          {"kind_shares", shares}};
}

}  // namespace ulsam
