#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace ulsam {

/// Multiply-accumulate categories used by both the analytic cost model
/// and the kernel instrumentation.
enum class OpKind { Standard = 0, Depthwise, Pointwise, FullyConnected, Attention };

inline constexpr std::size_t kOpKindCount = 5;

using MacCounts = std::array<std::int64_t, kOpKindCount>;

std::string_view op_kind_name(OpKind kind);

/// Per-thread MAC tally updated from inside the kernels. Counting is off
/// unless a MacTally is alive on the current thread.
class MacCounter {
 public:
  static MacCounter& local() {
    thread_local MacCounter counter;
    return counter;
  }

  void add(OpKind kind, std::int64_t macs) {
    if (depth_ == 0) return;
    const OpKind target = override_active_ ? override_ : kind;
    counts_[static_cast<std::size_t>(target)] += macs;
  }

  bool enabled() const { return depth_ > 0; }

 private:
  friend class MacTally;
  friend class MacCategoryScope;

  MacCounts counts_{};
  int depth_ = 0;
  bool override_active_ = false;
  OpKind override_ = OpKind::Standard;
};

/// Enables counting for its lifetime and exposes what was tallied.
class MacTally {
 public:
  MacTally() : start_(MacCounter::local().counts_) { ++MacCounter::local().depth_; }
  ~MacTally() { --MacCounter::local().depth_; }
  MacTally(const MacTally&) = delete;
  MacTally& operator=(const MacTally&) = delete;

  MacCounts counts() const {
    MacCounts out{};
    const auto& now = MacCounter::local().counts_;
    for (std::size_t i = 0; i < kOpKindCount; ++i) out[i] = now[i] - start_[i];
    return out;
  }
  std::int64_t total() const {
    std::int64_t sum = 0;
    for (auto v : counts()) sum += v;
    return sum;
  }

 private:
  MacCounts start_;
};

/// Routes every tally made during its lifetime to one category
/// (ULSAM's inner depthwise/pointwise kernels count as Attention).
class MacCategoryScope {
 public:
  explicit MacCategoryScope(OpKind kind)
      : saved_active_(MacCounter::local().override_active_), saved_(MacCounter::local().override_) {
    MacCounter::local().override_active_ = true;
    MacCounter::local().override_ = kind;
  }
  ~MacCategoryScope() {
    MacCounter::local().override_active_ = saved_active_;
    MacCounter::local().override_ = saved_;
  }
  MacCategoryScope(const MacCategoryScope&) = delete;
  MacCategoryScope& operator=(const MacCategoryScope&) = delete;

 private:
  bool saved_active_;
  OpKind saved_;
};

inline std::string_view op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::Standard: return "standard";
    case OpKind::Depthwise: return "depthwise";
    case OpKind::Pointwise: return "pointwise";
    case OpKind::FullyConnected: return "fc";
    case OpKind::Attention: return "attention";
  }
  return "?";
}

}  // namespace ulsam
