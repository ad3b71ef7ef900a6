#include "ulsam/graph.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

#include "ulsam/errors.hpp"

namespace ulsam {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2d: return "Conv2d";
    case LayerKind::DwsBlock: return "DwsBlock";
    case LayerKind::ResidualBottleneck: return "ResidualBottleneck";
    case LayerKind::Ulsam: return "Ulsam";
    case LayerKind::GlobalAvgPool: return "GlobalAvgPool";
    case LayerKind::FullyConnected: return "FullyConnected";
    case LayerKind::SoftmaxHead: return "SoftmaxHead";
  }
  return "?";
}

namespace {

int parse_layer_number(const std::string& text, const std::string& whole) {
  int value = 0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (text.empty() || ec != std::errc() || ptr != last || value <= 0) {
    throw DirectiveError("invalid position '" + whole + "': expected \"L\" or \"L:1\"");
  }
  return value;
}

LayerSpec conv_layer(int number, int in, int out, int kernel, int stride, Activation act) {
  LayerSpec l;
  l.kind = LayerKind::Conv2d;
  l.in_channels = in;
  l.out_channels = out;
  l.kernel = kernel;
  l.stride = stride;
  l.activation = act;
  l.batch_norm = true;
  l.number = number;
  l.label = std::to_string(number);
  return l;
}

LayerSpec head_layer(LayerKind kind, int channels, int out = 0) {
  LayerSpec l;
  l.kind = kind;
  l.in_channels = channels;
  l.out_channels = out == 0 ? channels : out;
  return l;
}

}  // namespace

PositionDirective PositionDirective::parse(const std::string& text) {
  PositionDirective d;
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    d.layer = parse_layer_number(text, text);
    d.mode = Mode::Substitute;
    return d;
  }
  d.layer = parse_layer_number(text.substr(0, colon), text);
  if (text.substr(colon + 1) != "1") {
    throw DirectiveError("invalid position '" + text + "': only \"L\" and \"L:1\" are allowed");
  }
  d.mode = Mode::InsertAfter;
  return d;
}

std::string PositionDirective::to_string() const {
  return std::to_string(layer) + (mode == Mode::InsertAfter ? ":1" : "");
}

std::vector<PositionDirective> parse_positions(const std::vector<std::string>& items) {
  std::vector<PositionDirective> out;
  for (const auto& item : items) out.push_back(PositionDirective::parse(item));
  return out;
}

std::vector<PositionDirective> parse_positions_csv(const std::string& csv) {
  std::vector<std::string> items;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char c) { return std::isspace(c); }),
               item.end());
    if (!item.empty()) items.push_back(item);
  }
  return parse_positions(items);
}

int scale_channels(int channels, double alpha) {
  const double scaled = channels * alpha;
  const int rounded = static_cast<int>(std::floor(scaled / 8.0 + 0.5)) * 8;
  return std::max(8, rounded);
}

void ModelGraph::validate() const {
  if (layers.empty()) throw ConfigError("graph: no layers");
  int channels = input_channels;
  bool flat = false;
  for (const auto& l : layers) {
    const std::string where = std::string(layer_kind_name(l.kind)) +
                              (l.label.empty() ? "" : " at position " + l.label);
    if (l.in_channels != channels) {
      throw ConfigError("graph: " + where + " expects " + std::to_string(l.in_channels) +
                        " input channels, previous layer produces " + std::to_string(channels));
    }
    if (l.stride < 1) throw ConfigError("graph: " + where + " has stride < 1");
    switch (l.kind) {
      case LayerKind::Ulsam:
        if (!l.preserves_shape()) throw ConfigError("graph: " + where + " must preserve shape");
        if (l.groups < 1 || l.in_channels % l.groups != 0) {
          throw ConfigError("graph: " + where + " groups " + std::to_string(l.groups) +
                            " does not divide " + std::to_string(l.in_channels));
        }
        break;
      case LayerKind::FullyConnected:
        if (!flat) throw ConfigError("graph: " + where + " requires a pooled input");
        break;
      case LayerKind::GlobalAvgPool:
        flat = true;
        break;
      default:
        break;
    }
    channels = l.out_channels;
  }
}

int ModelGraph::output_channels() const { return layers.empty() ? 0 : layers.back().out_channels; }

std::vector<std::string> ModelGraph::ulsam_positions() const {
  std::vector<std::string> out;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::Ulsam) out.push_back(l.label);
  }
  return out;
}

std::optional<std::size_t> ModelGraph::find_numbered(int number) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].number == number) return i;
  }
  return std::nullopt;
}

ModelGraph build_mv1(double alpha, int num_classes) {
  if (!(alpha > 0.0) || alpha > 1.0) {
    throw ConfigError("alpha: width multiplier must be in (0, 1], got " + std::to_string(alpha));
  }
  if (num_classes < 1) throw ConfigError("num_classes: must be >= 1");
  ModelGraph g;
  g.arch = "mv1";
  g.alpha = alpha;
  g.num_classes = num_classes;

  auto ch = [alpha](int c) { return scale_channels(c, alpha); };
  g.layers.push_back(conv_layer(1, 3, ch(32), 3, 2, Activation::Relu));

  struct Row { int in, out, stride; };
  const Row rows[] = {{32, 64, 1},   {64, 128, 2},  {128, 128, 1}, {128, 256, 2}, {256, 256, 1},
                      {256, 512, 2}, {512, 512, 1}, {512, 512, 1}, {512, 512, 1}, {512, 512, 1},
                      {512, 512, 1}, {512, 1024, 2}, {1024, 1024, 1}};
  int number = 2;
  for (const Row& r : rows) {
    LayerSpec l;
    l.kind = LayerKind::DwsBlock;
    l.in_channels = ch(r.in);
    l.out_channels = ch(r.out);
    l.stride = r.stride;
    l.activation = Activation::Relu;
    l.number = number;
    l.label = std::to_string(number);
    g.layers.push_back(l);
    ++number;
  }
  const int last = ch(1024);
  g.layers.push_back(head_layer(LayerKind::GlobalAvgPool, last));
  LayerSpec fc = head_layer(LayerKind::FullyConnected, last, num_classes);
  fc.bias = true;
  g.layers.push_back(fc);
  g.layers.push_back(head_layer(LayerKind::SoftmaxHead, num_classes));
  g.validate();
  return g;
}

ModelGraph build_mv2(int num_classes) {
  if (num_classes < 1) throw ConfigError("num_classes: must be >= 1");
  ModelGraph g;
  g.arch = "mv2";
  g.num_classes = num_classes;
  g.layers.push_back(conv_layer(1, 3, 32, 3, 2, Activation::Relu6));

  struct Row { int in, out, stride, expansion; };
  const Row rows[] = {
      {32, 16, 1, 1},   {16, 24, 2, 6},   {24, 24, 1, 6},   {24, 32, 2, 6},   {32, 32, 1, 6},
      {32, 32, 1, 6},   {32, 64, 2, 6},   {64, 64, 1, 6},   {64, 64, 1, 6},   {64, 64, 1, 6},
      {64, 96, 1, 6},   {96, 96, 1, 6},   {96, 96, 1, 6},   {96, 160, 2, 6},  {160, 160, 1, 6},
      {160, 160, 1, 6}, {160, 320, 1, 6}};
  int number = 2;
  for (const Row& r : rows) {
    LayerSpec l;
    l.kind = LayerKind::ResidualBottleneck;
    l.in_channels = r.in;
    l.out_channels = r.out;
    l.stride = r.stride;
    l.expansion = r.expansion;
    l.activation = Activation::Relu6;
    l.number = number;
    l.label = std::to_string(number);
    g.layers.push_back(l);
    ++number;
  }
  g.layers.push_back(conv_layer(19, 320, 1280, 1, 1, Activation::Relu6));
  g.layers.push_back(head_layer(LayerKind::GlobalAvgPool, 1280));
  LayerSpec head = conv_layer(20, 1280, num_classes, 1, 1, Activation::None);
  head.batch_norm = false;
  head.bias = true;
  g.layers.push_back(head);
  g.validate();
  return g;
}

namespace {

LayerSpec make_ulsam(int channels, int groups, std::string label) {
  LayerSpec u;
  u.kind = LayerKind::Ulsam;
  u.in_channels = channels;
  u.out_channels = channels;
  u.groups = groups;
  u.label = std::move(label);
  return u;
}

bool is_feature_layer(const LayerSpec& l) {
  return l.number > 0 && !(l.kind == LayerKind::Conv2d && !l.batch_norm);
}

}  // namespace

ModelGraph apply_ulsam(const ModelGraph& graph, const std::vector<PositionDirective>& directives,
                       int groups) {
  if (groups < 1) throw ConfigError("ulsam.g: must be >= 1");
  std::set<std::string> seen;
  for (const auto& d : directives) {
    if (!seen.insert(d.to_string()).second) {
      throw DirectiveError("duplicate position '" + d.to_string() + "'");
    }
  }
  ModelGraph out = graph;
  for (const auto& d : directives) {
    const auto found = out.find_numbered(d.layer);
    if (!found) {
      throw DirectiveError("position '" + d.to_string() + "': no layer " +
                           std::to_string(d.layer) + " in " + graph.arch);
    }
    std::size_t idx = *found;
    const LayerSpec& target = out.layers[idx];
    if (!is_feature_layer(target)) {
      throw DirectiveError("position '" + d.to_string() + "': layer " + std::to_string(d.layer) +
                           " is the classifier head");
    }
    const int channels = d.mode == PositionDirective::Mode::Substitute ? target.in_channels
                                                                        : target.out_channels;
    if (channels % groups != 0) {
      throw DirectiveError("position '" + d.to_string() + "': g=" + std::to_string(groups) +
                           " does not divide " + std::to_string(channels) + " channels");
    }
    if (d.mode == PositionDirective::Mode::Substitute) {
      if (!target.preserves_shape()) {
        throw DirectiveError("position '" + d.to_string() + "': layer " +
                             std::to_string(d.layer) + " (" + std::to_string(target.in_channels) +
                             ", " + std::to_string(target.out_channels) + ", stride " +
                             std::to_string(target.stride) +
                             ") changes shape and cannot be substituted");
      }
      LayerSpec u = make_ulsam(channels, groups, d.to_string());
      u.number = target.number;
      u.replaced.push_back(target);
      out.layers[idx] = std::move(u);
    } else {
      // After layer L and after any block already inserted there.
      std::size_t pos = idx + 1;
      const std::string prefix = std::to_string(d.layer) + ":";
      while (pos < out.layers.size() && out.layers[pos].label.rfind(prefix, 0) == 0) ++pos;
      out.layers.insert(out.layers.begin() + static_cast<std::ptrdiff_t>(pos),
                        make_ulsam(channels, groups, d.to_string()));
    }
  }
  out.validate();
  return out;
}

ModelGraph remove_ulsam(const ModelGraph& graph, const PositionDirective& directive) {
  ModelGraph out = graph;
  const std::string label = directive.to_string();
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    LayerSpec& l = out.layers[i];
    if (l.kind != LayerKind::Ulsam || l.label != label) continue;
    if (directive.mode == PositionDirective::Mode::Substitute) {
      if (l.replaced.empty()) throw DirectiveError("position '" + label + "': nothing to restore");
      LayerSpec original = l.replaced.front();
      out.layers[i] = std::move(original);
    } else {
      out.layers.erase(out.layers.begin() + static_cast<std::ptrdiff_t>(i));
    }
    out.validate();
    return out;
  }
  throw DirectiveError("position '" + label + "': no ULSAM layer placed there");
}

std::string describe(const ModelGraph& graph) {
  std::ostringstream os;
  os << graph.arch << " alpha=" << graph.alpha << " classes=" << graph.num_classes
     << " input=" << graph.input_channels << "x" << graph.input_size << "x" << graph.input_size
     << "\n";
  for (const auto& l : graph.layers) {
    os << "  " << (l.label.empty() ? "-" : l.label) << "\t" << layer_kind_name(l.kind) << " ("
       << l.in_channels << ", " << l.out_channels << ", " << l.stride << ")";
    if (l.kind == LayerKind::ResidualBottleneck) {
      os << " t=" << l.expansion << (l.has_skip() ? " skip" : "");
    }
    if (l.kind == LayerKind::Ulsam) {
      os << " g=" << l.groups;
      if (!l.replaced.empty()) os << " replaces " << layer_kind_name(l.replaced.front().kind);
    }
    if (l.kind == LayerKind::Conv2d) os << " k=" << l.kernel;
    os << "\n";
  }
  const auto positions = graph.ulsam_positions();
  if (!positions.empty()) {
    os << "ULSAM positions: ";
    for (std::size_t i = 0; i < positions.size(); ++i) os << (i ? ", " : "") << positions[i];
    os << "\n";
  }
  return os.str();
}

}  // namespace ulsam
