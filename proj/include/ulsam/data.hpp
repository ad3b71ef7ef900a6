#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ulsam/tensor.hpp"

namespace ulsam {

struct Dataset {
  Tensor<float> images;  // (N, 3, H, W)
  std::vector<int> labels;
  int classes = 0;

  Index size() const { return images.shape().n; }
  /// Copies the samples at `indices` into a batch.
  Tensor<float> gather(std::span<const Index> indices) const;
  std::vector<int> gather_labels(std::span<const Index> indices) const;
};

/// Per-channel (x - mean) / std applied after mapping bytes to [0, 1].
struct Normalization {
  std::array<float, 3> mean{0.0f, 0.0f, 0.0f};
  std::array<float, 3> stddev{1.0f, 1.0f, 1.0f};
};

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// CIFAR-10 binary batches: each record is one label byte followed by
/// 3x32x32 pixel bytes, channel-major (R, G, B), row-major within channel.
Dataset load_cifar10_binary(const std::vector<std::string>& paths, const Normalization& norm = {});
Dataset parse_cifar10_records(std::span<const std::uint8_t> bytes, const Normalization& norm = {},
                              std::uint64_t base_offset = 0);

struct SyntheticSpec {
  int classes = 4;
  int samples = 256;
  int image_size = 32;
  std::uint64_t seed = 1;
  float noise = 0.5f;
};

/// Seeded, linearly separable images: each class has a fixed random
/// prototype; samples are prototype plus Gaussian noise.
Dataset make_synthetic(const SyntheticSpec& spec);

}  // namespace ulsam
