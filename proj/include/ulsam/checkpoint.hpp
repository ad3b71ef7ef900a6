#pragma once

// Binary checkpoint: "ULSM", u32 version, then records of
// {u32 name length, name, u32 rank, u32 extents[rank], f32 values}
// until end of file. All integers and floats are little-endian.

#include <cstdint>
#include <string>
#include <vector>

#include "ulsam/network.hpp"

namespace ulsam {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

template <typename Scalar>
void save_checkpoint(const std::string& path, const TensorList<Scalar>& tensors) {
  std::vector<CheckpointEntry> entries;
  entries.reserve(tensors.size());
  for (const auto& t : tensors) {
    CheckpointEntry e{t.name, t.tensor->shape(), {}};
    e.values.resize(static_cast<std::size_t>(t.tensor->size()));
    for (Index i = 0; i < t.tensor->size(); ++i) e.values[i] = float((*t.tensor)[i]);
    entries.push_back(std::move(e));
  }
  write_checkpoint(path, entries);
}

/// Every tensor in `tensors` must appear in the file with the same shape.
template <typename Scalar>
void load_checkpoint(const std::string& path, TensorList<Scalar>& tensors) {
  const auto entries = read_checkpoint(path);
  for (auto& t : tensors) {
    const CheckpointEntry* found = nullptr;
    for (const auto& e : entries) {
      if (e.name == t.name) {
        found = &e;
        break;
      }
    }
    if (!found) throw CheckpointError("checkpoint '" + path + "': missing tensor " + t.name);
    if (found->shape != t.tensor->shape()) {
      throw CheckpointError("checkpoint '" + path + "': tensor " + t.name + " has shape " +
                            to_string(found->shape) + ", expected " +
                            to_string(t.tensor->shape()));
    }
    for (Index i = 0; i < t.tensor->size(); ++i) (*t.tensor)[i] = Scalar(found->values[i]);
  }
}

}  // namespace ulsam
