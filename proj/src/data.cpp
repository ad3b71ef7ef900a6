#include "ulsam/data.hpp"

#include <fstream>
#include <iterator>
#include <random>

#include "ulsam/errors.hpp"

namespace ulsam {

Tensor<float> Dataset::gather(std::span<const Index> indices) const {
  const Shape& s = images.shape();
  Tensor<float> batch(Index(indices.size()), s.c, s.h, s.w);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    batch.rows().row(Index(i)) = images.rows().row(indices[i]);
  }
  return batch;
}

std::vector<int> Dataset::gather_labels(std::span<const Index> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (Index i : indices) out.push_back(labels[static_cast<std::size_t>(i)]);
  return out;
}

Dataset parse_cifar10_records(std::span<const std::uint8_t> bytes, const Normalization& norm,
                              std::uint64_t base_offset) {
  const std::size_t whole = bytes.size() / kCifarRecordBytes;
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw IngestError("cifar10: truncated record", base_offset + whole * kCifarRecordBytes);
  }
  Dataset d;
  d.classes = 10;
  d.images = Tensor<float>(Index(whole), 3, 32, 32);
  d.labels.resize(whole);
  for (std::size_t r = 0; r < whole; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw DataError("cifar10: label byte " + std::to_string(rec[0]) + " > 9 at byte offset " +
                      std::to_string(base_offset + r * kCifarRecordBytes));
    }
    d.labels[r] = rec[0];
    float* dst = d.images.data() + Index(r) * 3072;
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 1024; ++i) {
        const float v = float(rec[1 + c * 1024 + i]) / 255.0f;
        dst[c * 1024 + i] = (v - norm.mean[c]) / norm.stddev[c];
      }
    }
  }
  return d;
}

Dataset load_cifar10_binary(const std::vector<std::string>& paths, const Normalization& norm) {
  if (paths.empty()) throw ConfigError("cifar10: no input files");
  std::vector<Dataset> parts;
  Index total = 0;
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cifar10: cannot open '" + path + "'", 0);
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                          std::istreambuf_iterator<char>());
    try {
      parts.push_back(parse_cifar10_records(bytes, norm));
    } catch (const IngestError& e) {
      throw IngestError("cifar10: truncated record in '" + path + "'", e.offset());
    }
    total += parts.back().size();
  }
  Dataset out;
  out.classes = 10;
  out.images = Tensor<float>(total, 3, 32, 32);
  Index row = 0;
  for (auto& p : parts) {
    out.images.rows().middleRows(row, p.size()) = p.images.rows();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    row += p.size();
  }
  return out;
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 1 || spec.samples < 1 || spec.image_size < 1) {
    throw ConfigError("synthetic: classes, samples and image_size must be >= 1");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<float> unit(0.0f, 1.0f);
  const Index s = spec.image_size;
  const Index item = 3 * s * s;

  // Prototypes are coarse 4x4 blocks of +-1 so the class signal survives
  // downsampling.
  std::vector<std::vector<float>> prototypes(static_cast<std::size_t>(spec.classes));
  const Index cells = 4;
  for (auto& proto : prototypes) {
    std::vector<float> coarse(static_cast<std::size_t>(3 * cells * cells));
    for (auto& v : coarse) v = unit(rng) > 0.0f ? 1.0f : -1.0f;
    proto.resize(static_cast<std::size_t>(item));
    for (Index c = 0; c < 3; ++c) {
      for (Index i = 0; i < s; ++i) {
        for (Index j = 0; j < s; ++j) {
          const Index ci = std::min(cells - 1, i * cells / s);
          const Index cj = std::min(cells - 1, j * cells / s);
          proto[(c * s + i) * s + j] = coarse[(c * cells + ci) * cells + cj];
        }
      }
    }
  }

  Dataset d;
  d.classes = spec.classes;
  d.images = Tensor<float>(spec.samples, 3, s, s);
  d.labels.resize(static_cast<std::size_t>(spec.samples));
  for (int n = 0; n < spec.samples; ++n) {
    const int label = n % spec.classes;
    d.labels[n] = label;
    float* dst = d.images.data() + Index(n) * item;
    const auto& proto = prototypes[label];
    for (Index i = 0; i < item; ++i) dst[i] = proto[i] + spec.noise * unit(rng);
  }
  return d;
}

}  // namespace ulsam
