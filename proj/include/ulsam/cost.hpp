#pragma once

// Analytic parameter and multiply-accumulate (MAC) accounting.
//
// "FLOPs" follows the s_k*s_k*m*n*h*w convention: one MAC per kernel tap
// per output element. MACs exclude batch norm, activations, pooling,
// softmax and the attention re-weighting; parameters count weights and
// enabled biases (BN affine pairs only when CostOptions asks for them).

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ulsam/graph.hpp"
#include "ulsam/mac_counter.hpp"

namespace ulsam {

std::int64_t flops_sconv(std::int64_t kernel, std::int64_t m, std::int64_t n, std::int64_t h,
                         std::int64_t w);

struct DwsMacs {
  std::int64_t depthwise = 0;
  std::int64_t pointwise = 0;
  std::int64_t total() const { return depthwise + pointwise; }
};

DwsMacs flops_dws(std::int64_t kernel, std::int64_t m, std::int64_t n, std::int64_t h,
                  std::int64_t w);

enum class AttentionKind { NonLocal, A2Net, SENet, BAM, CBAM, ULSAM };

const char* attention_kind_name(AttentionKind kind);

struct AttentionOverheadQuery {
  AttentionKind kind = AttentionKind::ULSAM;
  std::int64_t m = 512;
  std::int64_t h = 14;
  std::int64_t w = 14;
  std::optional<std::int64_t> t;  // A2-Net attention maps; defaults to m / 8
  std::int64_t r = 16;            // MLP reduction ratio
};

struct Overhead {
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

/// Closed-form overheads of the six attention modules. BAM assumes
/// dilation 4; CBAM's spatial-conv constant is 98 (7x7x2).
Overhead attention_overhead(const AttentionOverheadQuery& q);

struct Table1Row {
  AttentionKind kind;
  Overhead cost;
  std::string params_k;     // params / 1e3
  std::string macs_m;       // macs / 1e6
  std::string params_norm;  // vs ULSAM
  std::string macs_norm;
};

/// The six-row comparison at m = 512, t = m/8, r = 16, h = w = 14.
std::vector<Table1Row> table1_rows(std::int64_t m = 512, std::int64_t h = 14, std::int64_t w = 14,
                                   std::int64_t r = 16);
std::string format_table1(const std::vector<Table1Row>& rows);
nlohmann::json table1_json(const std::vector<Table1Row>& rows);

/// Decimal rendering with `places` digits, trailing zeros (and a bare
/// point) stripped: 0.20 -> "0.2", 512.00 -> "512".
std::string format_trimmed(double value, int places);

struct CostOptions {
  bool count_batchnorm = false;
};

struct CostRow {
  std::string layer;  // position label, "-" for head layers
  std::string kind;
  int height = 0;     // output spatial extent
  int width = 0;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  MacCounts macs_by_kind{};
  double share = 0.0;  // percent of total MACs
};

struct CostReport {
  std::string arch;
  std::vector<std::string> positions;
  std::vector<CostRow> rows;
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;
  MacCounts macs_by_kind{};

  double kind_share(OpKind kind) const;  // percent
};

CostReport analyze_model(const ModelGraph& graph, const CostOptions& options = {});

std::string format_report(const CostReport& report);
nlohmann::json report_json(const CostReport& report);

/// "4.2M"-style rendering used in totals lines.
std::string format_millions(std::int64_t value, int places);

}  // namespace ulsam
