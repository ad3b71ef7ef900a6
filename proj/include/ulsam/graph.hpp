#pragma once

// Structural description of MobileNet-V1/V2 graphs and ULSAM placement.
// A ModelGraph carries no weights; Network<Scalar> instantiates one.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ulsam {

enum class LayerKind {
  Conv2d,
  DwsBlock,
  ResidualBottleneck,
  Ulsam,
  GlobalAvgPool,
  FullyConnected,
  SoftmaxHead,
};

enum class Activation { None, Relu, Relu6 };

const char* layer_kind_name(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::Conv2d;
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;
  int kernel = 1;        // Conv2d only
  int expansion = 1;     // ResidualBottleneck only
  int groups = 1;        // Ulsam only
  Activation activation = Activation::None;
  bool batch_norm = false;  // Conv2d only; DWS and bottleneck blocks always carry BN
  bool bias = false;
  int number = 0;        // layer number in the reference tables, 0 if unnumbered
  std::string label;     // "8", "8:1", or empty for head layers
  std::vector<LayerSpec> replaced;  // the layer a substituting ULSAM stands in for

  /// Identity skip connection (bottlenecks with stride 1 and in == out).
  bool has_skip() const {
    return kind == LayerKind::ResidualBottleneck && stride == 1 && in_channels == out_channels;
  }
  int hidden_channels() const { return in_channels * expansion; }
  bool preserves_shape() const { return stride == 1 && in_channels == out_channels; }
};

struct PositionDirective {
  enum class Mode { InsertAfter, Substitute };

  int layer = 0;
  Mode mode = Mode::InsertAfter;

  /// Parses "L" (substitute layer L) or "L:1" (insert after layer L).
  static PositionDirective parse(const std::string& text);
  std::string to_string() const;

  friend bool operator==(const PositionDirective&, const PositionDirective&) = default;
};

std::vector<PositionDirective> parse_positions(const std::vector<std::string>& items);
/// Comma-separated variant, e.g. "8:1,9:1,11".
std::vector<PositionDirective> parse_positions_csv(const std::string& csv);

struct ModelGraph {
  std::string arch;  // "mv1" or "mv2"
  double alpha = 1.0;
  int num_classes = 1000;
  int input_size = 224;
  int input_channels = 3;
  std::vector<LayerSpec> layers;

  /// Checks channel continuity and per-layer constraints.
  void validate() const;
  int output_channels() const;
  /// Labels of ULSAM layers in graph order, e.g. {"8:1", "9:1", "11"}.
  std::vector<std::string> ulsam_positions() const;
  /// Index into `layers` of the layer numbered `number`, if present.
  std::optional<std::size_t> find_numbered(int number) const;
};

/// Nearest multiple of 8, minimum 8.
int scale_channels(int channels, double alpha);

ModelGraph build_mv1(double alpha, int num_classes);
ModelGraph build_mv2(int num_classes);

/// Places ULSAM blocks with `groups` subspaces. Original layer numbering is
/// preserved: inserted blocks are labelled "L:1", substitutes "L".
ModelGraph apply_ulsam(const ModelGraph& graph, const std::vector<PositionDirective>& directives,
                       int groups);

/// Undoes one directive previously applied by apply_ulsam.
ModelGraph remove_ulsam(const ModelGraph& graph, const PositionDirective& directive);

std::string describe(const ModelGraph& graph);

}  // namespace ulsam
