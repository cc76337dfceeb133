#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lfyolo {

struct GradcheckResult {
  std::string block;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Checkable units: single operators first, then composite blocks.
const std::vector<std::string>& gradcheck_blocks();

/// Finite-difference check of one unit on small seeded inputs and
/// parameters. Single operators must agree to 1e-6, composite blocks to
/// 1e-5. `corrupt_analytic` perturbs the analytic side so the check fails.
GradcheckResult run_gradcheck(const std::string& block, std::uint64_t seed,
                              bool corrupt_analytic = false);

}  // namespace lfyolo
