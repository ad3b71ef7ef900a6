#pragma once

// Central finite-difference verification of every differentiable op and of
// a full tiny network, at 64-bit.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace ulsam {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double eps = 1e-5;
  double op_tolerance = 1e-4;
  double network_tolerance = 1e-3;
  bool include_network = true;
  /// Name of an op whose analytic gradient is deliberately corrupted.
  std::string fault;
};

struct GradcheckRecord {
  std::string op;
  std::string shape;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::int64_t checked = 0;  // gradient entries compared
  std::int64_t skipped = 0;  // entries whose difference quotient never settled, resampled

  bool passed() const { return max_rel_error < tolerance; }
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is (near) zero from dominating through round-off.
double relative_error(double analytic, double numeric, double floor = 1e-6);

std::vector<std::string> gradcheck_op_names();
std::vector<GradcheckRecord> run_gradcheck(const GradcheckOptions& options);

std::string format_gradcheck(const std::vector<GradcheckRecord>& records);
nlohmann::ordered_json gradcheck_json(const std::vector<GradcheckRecord>& records);

}  // namespace ulsam
