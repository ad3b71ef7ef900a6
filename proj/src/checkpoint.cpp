#include "ulsam/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace ulsam {
namespace {

constexpr char kMagic[4] = {'U', 'L', 'S', 'M'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  Reader(const std::string& path, std::vector<unsigned char> bytes)
      : path_(path), bytes_(std::move(bytes)) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError("checkpoint '" + path_ + "': truncated " + what + " at byte " +
                            std::to_string(pos_));
    }
  }

  std::string path_;
  std::vector<unsigned char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  for (const auto& e : entries) {
    if (Index(e.values.size()) != e.shape.size()) {
      throw CheckpointError("checkpoint: tensor " + e.name + " value count mismatch");
    }
    put_u32(out, std::uint32_t(e.name.size()));
    out += e.name;
    put_u32(out, 4);
    for (Index extent : {e.shape.n, e.shape.c, e.shape.h, e.shape.w}) put_u32(out, std::uint32_t(extent));
    for (float v : e.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("checkpoint: cannot open '" + tmp + "' for writing");
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw CheckpointError("checkpoint: write to '" + tmp + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("checkpoint: cannot move '" + tmp + "' to '" + path + "': " + ec.message());
}

std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  Reader r(path, std::vector<unsigned char>((std::istreambuf_iterator<char>(f)),
                                            std::istreambuf_iterator<char>()));
  if (r.text(4, "magic") != std::string(kMagic, 4)) {
    throw CheckpointError("checkpoint '" + path + "': bad magic");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint '" + path + "': unsupported version " +
                          std::to_string(version));
  }
  std::vector<CheckpointEntry> entries;
  while (!r.done()) {
    CheckpointEntry e;
    e.name = r.text(r.u32("name length"), "name");
    const std::uint32_t rank = r.u32("rank");
    if (rank > 4) {
      throw CheckpointError("checkpoint '" + path + "': tensor " + e.name + " has rank " +
                            std::to_string(rank));
    }
    Index extents[4] = {1, 1, 1, 1};
    for (std::uint32_t i = 0; i < rank; ++i) extents[4 - rank + i] = r.u32("extent");
    e.shape = Shape{extents[0], extents[1], extents[2], extents[3]};
    e.values.resize(static_cast<std::size_t>(e.shape.size()));
    for (float& v : e.values) v = std::bit_cast<float>(r.u32("values"));
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace ulsam
