#pragma once

// JSON run configuration:
//   {"arch": "mv1"|"mv2", "alpha": 1.0, "num_classes": 1000, "input_size": 224,
//    "ulsam": {"g": 4, "positions": ["8:1", "9:1", "11"]},
//    "dataset": {...}, "train": {...}}
// Only "arch" is required.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ulsam/data.hpp"
#include "ulsam/graph.hpp"
#include "ulsam/trainer.hpp"

namespace ulsam {

struct ModelConfig {
  std::string arch = "mv1";
  double alpha = 1.0;
  int num_classes = 1000;
  int input_size = 224;
  int groups = 1;
  std::vector<std::string> positions;
};

enum class DatasetKind { Synthetic, Cifar10 };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::Synthetic;
  SyntheticSpec synthetic;
  std::vector<std::string> train_paths;  // Cifar10
  std::vector<std::string> eval_paths;   // Cifar10; training set when empty
  Normalization normalization;
};

struct RunConfig {
  ModelConfig model;
  std::optional<DatasetConfig> dataset;
  TrainConfig train;
};

RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::string& path);

/// Builds the architecture and applies the ULSAM positions.
ModelGraph build_graph(const ModelConfig& model);

}  // namespace ulsam
